"""Procedural stop sign, mask/perturbation initialization, compositing, PPM/PGM I/O.

Images are float64 arrays of shape (H, W, 3) with values in [0, 1]; masks
are (H, W, 1). Differentiable entry points accept :class:`Tensor` inputs.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

OUTSIDE = 0
RED_BACKGROUND = 1
WHITE_LETTER = 2
WHITE_STRIPE = 3

LABEL_NAMES = {OUTSIDE: "outside", RED_BACKGROUND: "red_background", WHITE_LETTER: "white_letter", WHITE_STRIPE: "white_stripe"}
# PGM gray levels used when exporting a region map
LABEL_GRAY = {OUTSIDE: 0, RED_BACKGROUND: 64, WHITE_LETTER: 128, WHITE_STRIPE: 255}

SIGN_RED = np.array([0.78, 0.07, 0.10])
SIGN_WHITE = np.array([0.95, 0.95, 0.95])

MIN_CANVAS = 32

# 5x7 block glyphs, rows top to bottom
_GLYPHS = {
    "S": ["01111", "10000", "10000", "01110", "00001", "00001", "11110"],
    "T": ["11111", "00100", "00100", "00100", "00100", "00100", "00100"],
    "O": ["01110", "10001", "10001", "10001", "10001", "10001", "01110"],
    "P": ["11110", "10001", "10001", "11110", "10000", "10000", "10000"],
}

# fractions of the octagon apothem
_RIM_INNER = 0.95
_STRIPE_INNER = 0.87
_TEXT_WIDTH = 0.72


class PPMError(ValueError):
    pass


@dataclass(frozen=True)
class RegionMap:
    """Per-pixel labels of a rendered sign (see the module-level label constants)."""

    labels: np.ndarray

    @property
    def shape(self):
        return self.labels.shape

    @property
    def support(self):
        """Octagon support as an (H, W, 1) float alpha map."""
        return (self.labels != OUTSIDE).astype(np.float64)[..., None]

    def count(self, label):
        return int(np.count_nonzero(self.labels == label))

    def to_gray(self):
        out = np.zeros(self.labels.shape, dtype=np.uint8)
        for label, gray in LABEL_GRAY.items():
            out[self.labels == label] = gray
        return out


def octagon_distance(size):
    """Octagon 'radius' of every pixel centre, in units of the apothem.

    A pixel lies inside the regular, flat-topped octagon inscribed in the
    canvas iff the value is <= 1.
    """
    c = size / 2.0
    u = (np.arange(size) + 0.5 - c) / c
    y, x = np.meshgrid(u, u, indexing="ij")
    r = np.sqrt(0.5)
    return np.maximum.reduce([np.abs(x), np.abs(y), np.abs(x + y) * r, np.abs(x - y) * r])


def octagon_support(size):
    return (octagon_distance(size) <= 1.0).astype(np.float64)[..., None]


def _text_mask(size):
    text = "STOP"
    cols = 5 * len(text) + (len(text) - 1)
    unit = _TEXT_WIDTH * size / cols
    x0 = (size - cols * unit) / 2.0
    y0 = (size - 7 * unit) / 2.0
    centers = np.arange(size) + 0.5
    fc = np.floor((centers - x0) / unit).astype(int)
    fr = np.floor((centers - y0) / unit).astype(int)
    bitmap = np.zeros((7, cols), dtype=bool)
    for n, ch in enumerate(text):
        glyph = np.array([[b == "1" for b in row] for row in _GLYPHS[ch]])
        bitmap[:, n * 6 : n * 6 + 5] = glyph
    rows_ok = (fr >= 0) & (fr < 7)
    cols_ok = (fc >= 0) & (fc < cols)
    out = np.zeros((size, size), dtype=bool)
    rr = np.clip(fr, 0, 6)
    cc = np.clip(fc, 0, cols - 1)
    out[:] = bitmap[rr[:, None], cc[None, :]] & rows_ok[:, None] & cols_ok[None, :]
    return out


def render_stop_sign(canvas_size):
    """Render the sign; returns ``(image, RegionMap)`` with an exact label map."""
    size = int(canvas_size)
    if size < MIN_CANVAS:
        raise ValueError(f"canvas_size {size} is below the {MIN_CANVAS}px minimum needed for legible glyphs")
    d = octagon_distance(size)
    labels = np.full((size, size), OUTSIDE, dtype=np.uint8)
    inside = d <= 1.0
    labels[inside] = RED_BACKGROUND
    labels[inside & (d > _STRIPE_INNER) & (d <= _RIM_INNER)] = WHITE_STRIPE
    labels[inside & (d <= _STRIPE_INNER) & _text_mask(size)] = WHITE_LETTER
    image = np.zeros((size, size, 3))
    image[labels == RED_BACKGROUND] = SIGN_RED
    white = (labels == WHITE_LETTER) | (labels == WHITE_STRIPE)
    image[white] = SIGN_WHITE
    return image, RegionMap(labels)


def init_mask(regions):
    """1 on the red background, 0 on letters, stripes and outside the octagon."""
    return (regions.labels == RED_BACKGROUND).astype(np.float64)[..., None]


def init_perturbation(canvas_size):
    """Pure white start: (255, 255, 255) in 8-bit terms, 1.0 in unit scale."""
    return np.ones((int(canvas_size), int(canvas_size), 3))


# ------------------------------------------------------------- resampling


def resize_coords(src_hw, dst_hw):
    """Sampling grid mapping destination pixel centres back onto the source."""
    sh, sw = src_hw
    dh, dw = dst_hw
    ys = (np.arange(dh) + 0.5) * (sh / dh) - 0.5
    xs = (np.arange(dw) + 0.5) * (sw / dw) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx, gy], axis=-1)


def scaled_size(size, scale):
    return max(1, int(round(size * scale)))


def resize(image, scale):
    """Bilinear resize of a Tensor [H,W,C] by ``scale``; identity when the size is unchanged."""
    h, w, _ = image.shape
    dh, dw = scaled_size(h, scale), scaled_size(w, scale)
    if (dh, dw) == (h, w):
        return image
    return ad.bilinear_sample(image, resize_coords((h, w), (dh, dw)))


def resize_array(arr, scale):
    return resize(Tensor(arr), scale).data


def compose(sign, background, position, scale=1.0, alpha=None):
    """Alpha-composite ``sign`` over ``background`` with its top-left at ``position``.

    ``sign`` may be a Tensor (differentiable) or an array; ``alpha`` defaults
    to the octagon support of the sign canvas. Returns a Tensor.
    """
    sign = sign if isinstance(sign, Tensor) else Tensor(sign)
    background = background.data if isinstance(background, Tensor) else np.asarray(background, dtype=np.float64)
    if alpha is None:
        alpha = octagon_support(sign.shape[0])
    alpha = np.asarray(alpha, dtype=np.float64)
    if scale != 1.0:
        sign = resize(sign, scale)
        alpha = resize_array(alpha, scale)
    h, w, _ = sign.shape
    H, W, _ = background.shape
    top, left = int(position[0]), int(position[1])
    if top < 0 or left < 0 or top + h > H or left + w > W:
        raise ValueError(f"sign of size {h}x{w} at (row={top}, col={left}) does not fit a {H}x{W} background")
    a3 = np.repeat(alpha, 3, axis=-1)
    placed = ad.paste(ad.mul(sign, Tensor(a3)), (H, W), top, left)
    full_alpha = np.zeros((H, W, 3))
    full_alpha[top : top + h, left : left + w] = a3
    return ad.add(placed, Tensor(background * (1.0 - full_alpha)))


# --------------------------------------------------------------------- I/O


def quantize(image):
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_ppm(image, path):
    data = quantize(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"save_ppm expects (H, W, 3), got {data.shape}")
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def save_pgm(gray, path):
    """Write an (H, W) uint8 array, or floats in [0, 1], as binary PGM."""
    gray = np.asarray(gray)
    if gray.ndim == 3:
        gray = gray[..., 0]
    if gray.dtype != np.uint8:
        gray = quantize(gray)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(gray).tobytes())


def _read_header(buf, magic):
    """Parse a netpbm header; returns (width, height, maxval, payload offset)."""
    if len(buf) < 2:
        raise PPMError(f"truncated header at byte 0: file has {len(buf)} bytes")
    if buf[:2] != magic:
        raise PPMError(f"unsupported format at byte 0: magic {buf[:2]!r}, expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            if pos >= len(buf):
                raise PPMError(f"truncated header at byte {pos}: expected width, height and maxval")
            raise PPMError(f"malformed header at byte {pos}: unexpected {buf[pos:pos + 1]!r}")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PPMError(f"malformed header at byte {pos}: missing whitespace before payload")
    w, h, maxval = fields
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval} in header ending at byte {pos}; only 255 is supported")
    if w <= 0 or h <= 0:
        raise PPMError(f"malformed header: non-positive size {w}x{h}")
    return w, h, maxval, pos + 1


def load_ppm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, _, off = _read_header(buf, b"P6")
    need = w * h * 3
    if len(buf) - off < need:
        raise PPMError(f"truncated payload at byte {len(buf)}: expected {need} bytes from offset {off}, got {len(buf) - off}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3)
    return data.astype(np.float64) / 255.0


def load_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, _, off = _read_header(buf, b"P5")
    need = w * h
    if len(buf) - off < need:
        raise PPMError(f"truncated payload at byte {len(buf)}: expected {need} bytes from offset {off}, got {len(buf) - off}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(h, w).copy()
