"""Differentiable physical-condition simulators and their sampler.

The chain applied to a sign is distance -> angle -> illumination ->
photographing, followed by pasting onto a scene. Geometric steps are applied
to the sign's alpha map as well so compositing follows the warped outline.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .imaging import compose, octagon_support, resize

# perspective strength: virtual camera distance in units of canvas size
_CAMERA_DISTANCE = 2.5


@dataclass(frozen=True)
class TransformParams:
    scale: float = 1.0
    blur_kernel: int = 1
    homography: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    background_id: int = 0
    position: tuple = (0, 0)
    angle: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError(f"blur_kernel must be odd and >= 1, got {self.blur_kernel}")
        if self.contrast <= 0:
            raise ValueError(f"contrast must be > 0, got {self.contrast}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if abs(np.linalg.det(np.asarray(self.homography))) <= 1e-8:
            raise ValueError("homography is singular")


def _range(lo, hi, name):
    if lo > hi:
        raise ValueError(f"{name} range is reversed: [{lo}, {hi}]")
    return (float(lo), float(hi))


@dataclass
class TransformConfig:
    """Uniform sampling ranges for every transform parameter.

    ``angle`` is the off-frontal tilt in degrees (0 = facing the camera).
    """

    scale: tuple = (0.3, 1.0)
    angle: tuple = (-60.0, 60.0)
    brightness: tuple = (-0.25, 0.25)
    contrast: tuple = (0.6, 1.4)
    noise_sigma: tuple = (0.0, 0.06)
    base_kernel: int = 3
    max_kernel: int = 9
    mc_batch: int = 8
    seed: int = 0

    def __post_init__(self):
        self.scale = _range(*self.scale, "scale")
        if not 0 < self.scale[0] <= self.scale[1] <= 1:
            raise ValueError(f"scale range must satisfy 0 < min <= max <= 1, got {self.scale}")
        self.angle = _range(*self.angle, "angle")
        self.brightness = _range(*self.brightness, "brightness")
        self.contrast = _range(*self.contrast, "contrast")
        if self.contrast[0] <= 0:
            raise ValueError("contrast must stay positive")
        self.noise_sigma = _range(*self.noise_sigma, "noise_sigma")
        if self.noise_sigma[0] < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.mc_batch < 1:
            raise ValueError("mc_batch must be >= 1")


def blur_kernel_for(scale, base_kernel=3, max_kernel=9):
    """Nearest odd integer to base_kernel / scale, capped; never increases with scale."""
    target = base_kernel / scale
    k = 2 * int(np.floor((target - 1) / 2 + 0.5)) + 1
    return int(min(max(k, 1), max_kernel))


def tilt_homography(angle_deg, size, camera_distance=_CAMERA_DISTANCE):
    """Homography of a sign rotated about its vertical axis, seen by a pinhole camera."""
    t = np.deg2rad(angle_deg)
    c = (size - 1) / 2.0
    d = camera_distance * size
    center = np.array([[1.0, 0, c], [0, 1.0, c], [0, 0, 1.0]])
    uncenter = np.array([[1.0, 0, -c], [0, 1.0, -c], [0, 0, 1.0]])
    proj = np.array([[np.cos(t), 0, 0], [0, 1.0, 0], [np.sin(t) / d, 0, 1.0]])
    return center @ proj @ uncenter


def _as_tuple(m):
    return tuple(tuple(float(v) for v in row) for row in np.asarray(m))


def sample_transform(config, rng, n_scenes, sign_size, scene_hw):
    """Draw one TransformParams; fields are independent and uniform over their ranges."""
    if n_scenes < 1:
        raise ValueError("scene corpus is empty")
    scale = float(rng.uniform(*config.scale))
    angle = float(rng.uniform(*config.angle))
    brightness = float(rng.uniform(*config.brightness))
    contrast = float(rng.uniform(*config.contrast))
    sigma = float(rng.uniform(*config.noise_sigma))
    background_id = int(rng.integers(n_scenes))
    h = max(1, int(round(sign_size * scale)))
    H, W = scene_hw
    if h > H or h > W:
        raise ValueError(f"scaled sign {h}px does not fit scene {H}x{W}")
    position = (int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - h + 1)))
    noise_seed = int(rng.integers(2**31))
    return TransformParams(
        scale=scale,
        blur_kernel=blur_kernel_for(scale, config.base_kernel, config.max_kernel),
        homography=_as_tuple(tilt_homography(angle, h)),
        brightness=brightness,
        contrast=contrast,
        noise_sigma=sigma,
        background_id=background_id,
        position=position,
        angle=angle,
        noise_seed=noise_seed,
    )


# ------------------------------------------------------------- primitives


def gaussian_kernel(k):
    """Normalized 1-D Gaussian taps of odd width ``k`` with sigma = k / 3."""
    if k % 2 == 0 or k < 1:
        raise ValueError(f"kernel width must be odd and positive, got {k}")
    if k == 1:
        return np.ones(1)
    r = np.arange(k) - k // 2
    g = np.exp(-0.5 * (r / (k / 3.0)) ** 2)
    return g / g.sum()


def _blur(image, k):
    if k == 1:
        return image
    g = gaussian_kernel(k)
    taps = np.outer(g, g)
    c = image.shape[-1]
    kernel = np.zeros((k, k, c, c))
    for ch in range(c):
        kernel[:, :, ch, ch] = taps
    return ad.conv2d(ad.pad_edge(image, k // 2), Tensor(kernel))


def apply_distance(image, scale, blur_kernel):
    """Shrink by ``scale`` then blur with a normalized Gaussian of width ``blur_kernel``."""
    return _blur(resize(image, scale), int(blur_kernel))


def homography_coords(homography, hw):
    """Source coordinates pulled by each destination pixel: H^-1 applied to (x, y, 1)."""
    hinv = np.linalg.inv(np.asarray(homography, dtype=np.float64))
    h, w = hw
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pts = np.stack([xs, ys, np.ones_like(xs)], axis=-1) @ hinv.T
    return pts[..., :2] / pts[..., 2:3]


def apply_angle(image, homography):
    """Inverse-warp ``image`` by ``homography`` (same canvas size, zero fill)."""
    hm = np.asarray(homography, dtype=np.float64)
    if abs(np.linalg.det(hm)) <= 1e-8:
        raise ValueError("homography is near-singular (|det| <= 1e-8)")
    if np.array_equal(hm, np.eye(3)):
        return image
    return ad.bilinear_sample(image, homography_coords(hm, image.shape[:2]))


def apply_illumination(image, brightness, contrast):
    """clamp01(contrast * (x - 0.5) + 0.5 + brightness)."""
    if contrast <= 0:
        raise ValueError(f"contrast must be > 0, got {contrast}")
    if brightness == 0 and contrast == 1:
        return image
    return ad.clamp01(ad.add_scalar(ad.scale(image, contrast), 0.5 - 0.5 * contrast + brightness))


def photo_noise(shape, noise_sigma, rng):
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    return rng.normal(0.0, noise_sigma, shape)


def apply_photographing(image, noise_sigma, rng):
    """clamp01(x + n), n ~ N(0, sigma^2) per component; ``rng`` is a Generator or seed."""
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if noise_sigma == 0:
        return image
    return ad.clamp01(ad.add(image, Tensor(photo_noise(image.shape, noise_sigma, rng))))


# --------------------------------------------------------------- pipeline


def transform_alpha(alpha, params):
    """Geometric part of the chain applied to an (H, W, 1) alpha map."""
    a = apply_distance(Tensor(alpha), params.scale, params.blur_kernel)
    return np.clip(apply_angle(a, params.homography).data, 0.0, 1.0)


def alpha_box(alpha, position, scene_hw, thresh=0.5):
    """Bounding box (cx, cy, w, h) in scene fractions of the alpha region above ``thresh``."""
    rows, cols = np.nonzero(alpha[..., 0] > thresh)
    if rows.size == 0:
        rows, cols = np.nonzero(alpha[..., 0] > 0)
    H, W = scene_hw
    top, left = position
    y0, y1 = rows.min() + top, rows.max() + 1 + top
    x0, x1 = cols.min() + left, cols.max() + 1 + left
    return ((x0 + x1) / 2 / W, (y0 + y1) / 2 / H, (x1 - x0) / W, (y1 - y0) / H)


def apply_pipeline(sign, params, scene, alpha=None, return_box=False):
    """Render ``sign`` (Tensor or array) into ``scene`` under ``params``.

    Returns the composited scene Tensor, plus the sign's ground-truth box
    when ``return_box`` is set.
    """
    sign = sign if isinstance(sign, Tensor) else Tensor(sign)
    if alpha is None:
        alpha = octagon_support(sign.shape[0])
    x = apply_distance(sign, params.scale, params.blur_kernel)
    x = apply_angle(x, params.homography)
    x = apply_illumination(x, params.brightness, params.contrast)
    x = apply_photographing(x, params.noise_sigma, params.noise_seed)
    a = transform_alpha(alpha, params)
    out = compose(x, scene, params.position, 1.0, alpha=a)
    if return_box:
        return out, alpha_box(a, params.position, scene.shape[:2])
    return out
