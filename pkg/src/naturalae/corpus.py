"""Bundled procedural corpora.

* scene backgrounds (stand-in for photo backgrounds),
* distractor objects for detector training,
* weathered stop signs used as the real-world noise source.

Everything is generated from fixed seeds, so the corpora are identical on
every machine.
"""

import numpy as np

from .imaging import SIGN_RED, SIGN_WHITE, octagon_support, render_stop_sign

CLASS_NAMES = ("stop sign", "ball", "clock", "kite", "disc")
STOP_SIGN = 0

SCENE_SEED = 20200711
WEATHERED_SEED = 5150

N_SCENES = 24


def _grid(size):
    u = (np.arange(size) + 0.5) / size
    return np.meshgrid(u, u, indexing="ij")


def _muted(rng, lo=0.15, hi=0.85):
    base = rng.uniform(lo, hi)
    return np.clip(base + rng.uniform(-0.15, 0.15, 3), 0.0, 1.0)


def _smooth_noise(rng, size, cells):
    coarse = rng.uniform(0, 1, (cells + 1, cells + 1))
    t = np.linspace(0, cells, size)
    i = np.minimum(t.astype(int), cells - 1)
    f = t - i
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def _scene(kind, rng, size):
    y, x = _grid(size)
    a, b = _muted(rng), _muted(rng)
    if kind == 0:  # sky-to-ground gradient
        img = a * (1 - y[..., None]) + b * y[..., None]
    elif kind == 1:  # horizon split with texture below
        horizon = rng.uniform(0.3, 0.7)
        img = np.where((y < horizon)[..., None], a, b)
        img = img + 0.08 * (_smooth_noise(rng, size, 8)[..., None] - 0.5)
    elif kind == 2:  # stripes
        period = rng.uniform(0.08, 0.3)
        theta = rng.uniform(0, np.pi)
        s = (np.sin(2 * np.pi * (x * np.cos(theta) + y * np.sin(theta)) / period) > 0)[..., None]
        img = np.where(s, a, b)
    elif kind == 3:  # checkerboard
        n = rng.integers(3, 9)
        s = ((np.floor(x * n) + np.floor(y * n)) % 2 == 0)[..., None]
        img = np.where(s, a, b)
    elif kind == 4:  # block clutter, buildings and boxes
        img = np.broadcast_to(a, (size, size, 3)).copy()
        for _ in range(rng.integers(4, 10)):
            r0, c0 = rng.integers(0, size, 2)
            h, w = rng.integers(size // 8, size // 2, 2)
            img[r0 : r0 + h, c0 : c0 + w] = _muted(rng)
    else:  # smooth foliage-like noise
        n = _smooth_noise(rng, size, int(rng.integers(3, 10)))[..., None]
        img = a * n + b * (1 - n)
    return np.clip(img, 0.0, 1.0)


def make_scenes(n=N_SCENES, size=64, seed=SCENE_SEED):
    """List of ``n`` procedurally generated backgrounds of ``size`` x ``size``."""
    rng = np.random.default_rng(seed)
    return [_scene(i % 6, rng, size) for i in range(n)]


# --------------------------------------------------------------- distractors

_PALETTE = np.array(
    [
        [0.15, 0.35, 0.85],
        [0.15, 0.65, 0.25],
        [0.95, 0.85, 0.15],
        [0.55, 0.25, 0.70],
        [0.15, 0.70, 0.75],
        [0.95, 0.55, 0.10],
        [0.40, 0.40, 0.40],
    ]
)


def _pick(rng):
    return np.clip(_PALETTE[rng.integers(len(_PALETTE))] + rng.uniform(-0.08, 0.08, 3), 0, 1)


def _centered(size):
    c = (np.arange(size) + 0.5 - size / 2) / (size / 2)
    return np.meshgrid(c, c, indexing="ij")


def render_ball(size, rng):
    y, x = _centered(size)
    r = np.sqrt(x * x + y * y)
    alpha = (r <= 0.9).astype(float)
    base = _pick(rng)
    shade = np.clip(1.15 - 0.6 * np.sqrt((x + 0.35) ** 2 + (y + 0.35) ** 2), 0.3, 1.2)
    img = np.clip(base * shade[..., None], 0, 1)
    return img * alpha[..., None], alpha[..., None]


def render_clock(size, rng):
    y, x = _centered(size)
    r = np.sqrt(x * x + y * y)
    alpha = (r <= 0.92).astype(float)
    face = np.array([0.93, 0.92, 0.85])
    rim = _pick(rng) * 0.5
    img = np.broadcast_to(face, (size, size, 3)).copy()
    img[r > 0.78] = rim
    ang = np.arctan2(y, x)
    ticks = (r > 0.6) & (r < 0.74) & (np.abs(((ang + np.pi / 12) % (np.pi / 6)) - np.pi / 12) < 0.09)
    img[ticks] = 0.1
    for theta, length, width in ((rng.uniform(0, 2 * np.pi), 0.45, 0.07), (rng.uniform(0, 2 * np.pi), 0.65, 0.05)):
        d = np.array([np.cos(theta), np.sin(theta)])
        t = x * d[0] + y * d[1]
        perp = np.abs(-x * d[1] + y * d[0])
        img[(t > 0) & (t < length) & (perp < width)] = 0.05
    return img * alpha[..., None], alpha[..., None]


def render_kite(size, rng):
    y, x = _centered(size)
    alpha = ((np.abs(x) / 0.6 + np.abs(y + 0.1) / 0.85) <= 1.0).astype(float)
    c1, c2 = _pick(rng), _pick(rng)
    img = np.where(((x > 0) ^ (y > -0.1))[..., None], c1, c2)
    img[(np.abs(x) < 0.03) | (np.abs(y + 0.1) < 0.03)] = 0.2
    return img * alpha[..., None], alpha[..., None]


def render_disc(size, rng):
    y, x = _centered(size)
    squash = rng.uniform(0.45, 0.75)
    r = np.sqrt(x * x + (y / squash) ** 2)
    alpha = (r <= 0.92).astype(float)
    base = _pick(rng)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    img[(r > 0.55) & (r < 0.68)] = np.clip(base * 1.35 + 0.1, 0, 1)
    return img * alpha[..., None], alpha[..., None]


_DISTRACTORS = {1: render_ball, 2: render_clock, 3: render_kite, 4: render_disc}


def render_object(class_id, size, rng):
    """Render one object of ``class_id`` on a ``size`` canvas; returns (image, alpha)."""
    if class_id == STOP_SIGN:
        img, regions = render_stop_sign(size)
        return img, regions.support
    return _DISTRACTORS[class_id](size, rng)


# ---------------------------------------------------------- weathered signs


def _blob(size, rng, radius):
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    return ((yy - cy) ** 2 + (xx - cx) ** 2) <= (radius * size) ** 2


def _stroke(size, rng, width):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    p0 = rng.uniform(0.15, 0.85, 2) * size
    p1 = rng.uniform(0.15, 0.85, 2) * size
    d = p1 - p0
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(d @ d, 1e-9), 0, 1)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    return dist <= width


def weathered_signs(n=12, size=64, seed=WEATHERED_SEED):
    """Stop signs with graffiti, stickers, rust, dirt and fading.

    Returns a list of images; defects stay inside the octagon.
    """
    rng = np.random.default_rng(seed)
    support = octagon_support(size)[..., 0] > 0
    out = []
    for _ in range(n):
        img, _ = render_stop_sign(size)
        img = img.copy()
        for _ in range(rng.integers(1, 4)):  # graffiti
            color = rng.choice([np.array([0.05, 0.05, 0.08]), np.array([0.10, 0.15, 0.55]), np.array([0.15, 0.45, 0.15])])
            img[_stroke(size, rng, rng.uniform(0.8, 2.0)) & support] = np.clip(color + rng.uniform(-0.04, 0.04, 3), 0, 1)
        for _ in range(rng.integers(0, 3)):  # stickers
            r0, c0 = rng.integers(size // 5, size - size // 4, 2)
            h, w = rng.integers(3, size // 6, 2)
            patch = np.zeros((size, size), dtype=bool)
            patch[r0 : r0 + h, c0 : c0 + w] = True
            img[patch & support] = rng.uniform(0.1, 0.9, 3)
        for _ in range(rng.integers(1, 4)):  # rust
            m = _blob(size, rng, rng.uniform(0.03, 0.09)) & support
            img[m] = np.clip(np.array([0.45, 0.25, 0.12]) + rng.uniform(-0.08, 0.08, (int(m.sum()), 3)), 0, 1)
        if rng.uniform() < 0.5:  # fading toward pink
            m = _blob(size, rng, rng.uniform(0.1, 0.2)) & support
            img[m] = np.clip(img[m] * 0.6 + np.array([0.95, 0.75, 0.75]) * 0.4, 0, 1)
        dirt = rng.uniform(0, 1, (size, size)) < 0.03
        img[dirt & support] = np.clip(np.array([0.35, 0.33, 0.30]) + rng.uniform(-0.1, 0.1, (int((dirt & support).sum()), 3)), 0, 1)
        out.append(img)
    return out


SIGN_COLORS = {"red": SIGN_RED, "white": SIGN_WHITE}
