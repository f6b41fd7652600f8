"""Real-world noise colours and the perturbation score built on them.

The score of a perturbation is the summed distance from each visibly modified
pixel's resulting colour to the nearest colour in the noise set. Distances are
taken on ``clamp01(I + M * delta)``; a pixel counts as modified when
``||M * delta||_2 > active_eps`` over its three channels.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .kernels import nn_query, nn_query_brute

GRID = 64
DEFAULT_TAU = 0.2
DEFAULT_ACTIVE_EPS = 2.0 / 255.0


class NoiseSetError(ValueError):
    pass


@dataclass
class NoiseSet:
    points: np.ndarray
    sources: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        if len(self.points) == 0:
            raise NoiseSetError("noise set is empty")
        if (self.points < 0).any() or (self.points > 1).any():
            raise NoiseSetError("noise colours must lie in [0, 1]")
        if not self.sources:
            self.sources = ["unknown"] * len(self.points)

    def __len__(self):
        return len(self.points)

    def save(self, path):
        with open(path, "w") as fh:
            for (r, g, b), src in zip(self.points, self.sources):
                fh.write(f"{r:.6f} {g:.6f} {b:.6f} # {src}\n")

    @classmethod
    def load(cls, path):
        pts, srcs = [], []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                body, _, comment = line.partition("#")
                if not body.strip():
                    continue
                vals = body.split()
                if len(vals) != 3:
                    raise NoiseSetError(f"{path}:{lineno}: expected 3 values, got {len(vals)}")
                pts.append([float(v) for v in vals])
                srcs.append(comment.strip() or "unknown")
        if not pts:
            raise NoiseSetError(f"{path}: no points")
        return cls(np.array(pts), srcs)


def extract_noise_set(images, region, red_ref, white_ref, tau=DEFAULT_TAU, sources=None):
    """Sign-region pixels far (> tau) from both canonical sign colours, one per 1/64 colour cell.

    Each occupied cell contributes its centre colour; the result does not
    depend on the order of ``images``.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    region = np.asarray(region).reshape(np.asarray(region).shape[:2]) > 0
    red_ref = np.asarray(red_ref, dtype=np.float64)
    white_ref = np.asarray(white_ref, dtype=np.float64)
    if sources is None:
        sources = [f"image{i:03d}" for i in range(len(images))]
    cells = {}
    for img, src in zip(images, sources):
        px = np.asarray(img, dtype=np.float64)[region]
        far = (np.linalg.norm(px - red_ref, axis=1) > tau) & (np.linalg.norm(px - white_ref, axis=1) > tau)
        idx = np.clip(np.floor(px[far] * GRID).astype(np.int64), 0, GRID - 1)
        for key in np.unique(idx[:, 0] * GRID * GRID + idx[:, 1] * GRID + idx[:, 2]):
            key = int(key)
            if key not in cells or src < cells[key]:
                cells[key] = src
    if not cells:
        raise NoiseSetError(f"no pixel is farther than tau={tau} from both sign colours; lower tau")
    keys = sorted(cells)
    arr = np.array(keys)
    pts = np.stack([arr // (GRID * GRID), (arr // GRID) % GRID, arr % GRID], axis=1)
    return NoiseSet((pts + 0.5) / GRID, [cells[k] for k in keys])


# ------------------------------------------------------------------ k-d tree


class NnIndex:
    """Balanced k-d tree over 3-D colour points (exact nearest neighbour).

    Nodes are stored in flat arrays so the query loop compiles under numba:
    ``lo/hi`` index into ``perm``; leaves have ``left == -1``.
    """

    def __init__(self, points, leaf_size=8):
        self.points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if len(self.points) == 0:
            raise NoiseSetError("cannot index an empty point set")
        self.perm = np.arange(len(self.points), dtype=np.int64)
        lo, hi, sd, sv, left, right = [], [], [], [], [], []

        def build(a, b):
            node = len(lo)
            lo.append(a)
            hi.append(b)
            sd.append(0)
            sv.append(0.0)
            left.append(-1)
            right.append(-1)
            if b - a <= leaf_size:
                return node
            pts = self.points[self.perm[a:b]]
            dim = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
            mid = (b - a) // 2
            order = np.argsort(pts[:, dim], kind="stable")
            self.perm[a:b] = self.perm[a:b][order]
            sd[node] = dim
            sv[node] = float(self.points[self.perm[a + mid], dim])
            left[node] = build(a, a + mid)
            right[node] = build(a + mid, b)
            return node

        build(0, len(self.points))
        self.lo = np.array(lo, dtype=np.int64)
        self.hi = np.array(hi, dtype=np.int64)
        self.split_dim = np.array(sd, dtype=np.int64)
        self.split_val = np.array(sv, dtype=np.float64)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)

    def query(self, queries):
        """(indices, squared distances) of the nearest point to each query row."""
        return nn_query(self, queries)


def _as_index(noise):
    if isinstance(noise, NnIndex):
        return noise
    if isinstance(noise, NoiseSet):
        return NnIndex(noise.points)
    return NnIndex(noise)


# --------------------------------------------------------------------- score


def _active(md, active_eps):
    return np.sqrt((md * md).sum(axis=-1)) > active_eps


def rps(delta, mask, original, noise, active_eps=DEFAULT_ACTIVE_EPS, brute=False):
    """Perturbation score; 0 when no pixel is active."""
    delta = np.asarray(delta, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64).reshape(delta.shape[:2] + (1,))
    md = delta * mask
    act = _active(md, active_eps)
    if not act.any():
        return 0.0
    color = np.clip(np.asarray(original, dtype=np.float64) + md, 0.0, 1.0)[act]
    if brute:
        pts = noise.points if isinstance(noise, (NoiseSet, NnIndex)) else np.asarray(noise)
        _, d2 = nn_query_brute(pts, color)
    else:
        _, d2 = _as_index(noise).query(color)
    return float(np.sqrt(d2).sum())


def _score_and_grad(delta, mask, original, noise, active_eps):
    delta = np.asarray(delta, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64).reshape(delta.shape[:2] + (1,))
    md = delta * mask
    raw = np.asarray(original, dtype=np.float64) + md
    act = _active(md, active_eps)
    g_md = np.zeros_like(delta)
    value = 0.0
    if act.any():
        index = _as_index(noise)
        color = np.clip(raw, 0.0, 1.0)[act]
        nn, d2 = index.query(color)
        dist = np.sqrt(d2)
        value = float(dist.sum())
        diff = color - index.points[nn]
        unit = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0)
        inside = (raw[act] >= 0.0) & (raw[act] <= 1.0)
        g_md[act] = unit * inside
    return value, g_md * mask, (g_md * delta).sum(axis=-1, keepdims=True)


def rps_subgradient(delta, mask, original, noise, active_eps=DEFAULT_ACTIVE_EPS):
    """(d/d delta [H,W,3], d/d mask [H,W,1]) with nearest neighbours held fixed.

    Chained through the clamp: channels saturated at 0 or 1 pass no gradient.
    """
    _, gd, gm = _score_and_grad(delta, mask, original, noise, active_eps)
    return gd, gm


def rps_op(delta, mask, original, index, active_eps=DEFAULT_ACTIVE_EPS):
    """Autodiff primitive: scalar score of Tensors ``delta`` [H,W,3], ``mask`` [H,W,1]."""
    value, gd, gm = _score_and_grad(delta.data, mask.data, original, index, active_eps)

    def bw(g):
        g = float(g)
        return gd * g, gm * g

    return ad.custom(np.asarray(value), (delta, mask), bw)


__all__ = [
    "NoiseSet",
    "NoiseSetError",
    "NnIndex",
    "extract_noise_set",
    "rps",
    "rps_subgradient",
    "rps_op",
]
