"""Adaptive-mask, noise-aware EOT attack and the signed-gradient baselines.

The minimized objective is::

    alpha * ||M . delta||_p + beta * ||M||_p + gamma * RPS(M . delta) - L_f

where ``L_f`` is the detection loss averaged over sampled physical
transforms of ``A = clamp01(I + delta . M)`` pasted on random scenes.
"""

import csv
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import STOP_SIGN
from .detector import detection_loss, detection_loss_batch
from .imaging import RED_BACKGROUND, init_mask, init_perturbation, quantize, save_pgm, save_ppm
from .optim import Adam
from .rps import DEFAULT_ACTIVE_EPS, NnIndex
from .transforms import TransformConfig, apply_pipeline, sample_transform

log = logging.getLogger(__name__)

ARRAY_MAGIC = b"NAED"
ARRAY_VERSION = 1


class AttackAborted(RuntimeError):
    pass


@dataclass
class AttackConfig:
    alpha: float = 0.3
    beta: float = 0.3
    gamma: float = 0.01
    p_norm: int = 2
    mc_batch: int = 8
    lr_delta: float = 0.01
    lr_mask: float = 0.01
    max_iters: int = 1500
    stop_threshold: float = -2.0
    seed: int = 0
    true_label: int = STOP_SIGN
    active_eps: float = DEFAULT_ACTIVE_EPS
    # hard-zero the mask on letters and stripes after every step
    project_white: bool = True

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("alpha, beta and gamma must be >= 0")
        if self.p_norm not in (1, 2):
            raise ValueError(f"p_norm must be 1 or 2, got {self.p_norm}")
        if self.mc_batch < 1:
            raise ValueError("mc_batch must be >= 1")
        if self.lr_delta < 0 or self.lr_mask < 0:
            raise ValueError("step sizes must be non-negative")


@dataclass
class BaselineConfig:
    epsilon: float = 8 / 255
    lam: float = 1 / 255
    iterations: int = 10

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


TERM_NAMES = ("masked_delta_norm", "mask_norm", "rps", "eot_loss")


@dataclass
class AttackResult:
    delta: np.ndarray
    mask: np.ndarray
    adversarial: np.ndarray
    trace: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    iterations: int = 0
    stop_reason: str = ""

    def save(self, outdir, prefix="attack"):
        """Write sign PPM, mask PGM, delta container and traces CSV; returns the paths."""
        import os

        os.makedirs(outdir, exist_ok=True)
        paths = {
            "sign": os.path.join(outdir, f"{prefix}_sign.ppm"),
            "mask": os.path.join(outdir, f"{prefix}_mask.pgm"),
            "delta": os.path.join(outdir, f"{prefix}_delta.naed"),
            "trace": os.path.join(outdir, f"{prefix}_trace.csv"),
        }
        save_ppm(self.adversarial, paths["sign"])
        save_pgm(quantize(self.mask[..., 0]), paths["mask"])
        save_array(self.delta, paths["delta"])
        with open(paths["trace"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("iteration", "objective") + TERM_NAMES)
            for i, (obj, t) in enumerate(zip(self.trace, self.terms), 1):
                w.writerow([i, repr(obj)] + [repr(t[k]) for k in TERM_NAMES])
        return paths


def save_array(arr, path):
    """Little-endian container: magic, version, ndim, dims, float64 payload."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(ARRAY_MAGIC + struct.pack("<II", ARRAY_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_array(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != ARRAY_MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != ARRAY_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    shape = struct.unpack_from(f"<{ndim}I", buf, 12)
    off = 12 + 4 * ndim
    n = int(np.prod(shape))
    if len(buf) != off + 8 * n:
        raise ValueError(f"{path}: payload is {len(buf) - off} bytes, expected {8 * n}")
    return np.frombuffer(buf, dtype="<f8", offset=off).reshape(shape).astype(np.float64)


# -------------------------------------------------------------- objective


def apply_masked_perturbation(original, delta, mask):
    """A = clamp01(I + delta * M), mask broadcast over channels.

    Tensors in, Tensor out; plain arrays in, array out.
    """
    if isinstance(delta, Tensor) or isinstance(mask, Tensor):
        delta = delta if isinstance(delta, Tensor) else Tensor(delta)
        mask = mask if isinstance(mask, Tensor) else Tensor(mask)
        if delta.shape[:2] != mask.shape[:2] or np.shape(original) != delta.shape:
            raise ad.ShapeError(f"shape mismatch: I {np.shape(original)}, delta {delta.shape}, mask {mask.shape}")
        md = ad.mul(delta, ad.repeat_last(mask, delta.shape[-1]))
        return ad.clamp01(ad.add(Tensor(original), md))
    original = np.asarray(original, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[..., None]
    if original.shape != delta.shape or mask.shape[:2] != delta.shape[:2]:
        raise ad.ShapeError(f"shape mismatch: I {original.shape}, delta {delta.shape}, mask {mask.shape}")
    return np.clip(original + delta * mask, 0.0, 1.0)


def render_batch(adv, samples, scenes, alpha):
    """Transform ``adv`` under each sample; returns (stacked scenes Tensor, sign boxes)."""
    images, boxes = [], []
    for p in samples:
        img, box = apply_pipeline(adv, p, scenes[p.background_id], alpha=alpha, return_box=True)
        images.append(img)
        boxes.append(box)
    return ad.stack(images), boxes


def eot_loss(model, original, delta, mask, samples, scenes, true_label=STOP_SIGN, alpha=None):
    """Mean detection loss of the masked sign over ``samples`` (index order)."""
    if not samples:
        raise ValueError("eot_loss needs at least one transform sample")
    adv = apply_masked_perturbation(original, delta, mask)
    adv = adv if isinstance(adv, Tensor) else Tensor(adv)
    batch, boxes = render_batch(adv, samples, scenes, _support(alpha, mask))
    per = detection_loss_batch(model, batch, true_label, boxes)
    return ad.scale(ad.sum_all(per), 1.0 / len(samples))


def _support(alpha, mask):
    if alpha is not None:
        return alpha
    from .imaging import octagon_support

    return octagon_support(np.shape(mask.data if isinstance(mask, Tensor) else mask)[0])


def objective(model, original, delta, mask, samples, scenes, cfg, noise=None, alpha=None):
    """Objective value Tensor and a dict of its four (unweighted) terms."""
    delta = delta if isinstance(delta, Tensor) else Tensor(delta)
    mask = mask if isinstance(mask, Tensor) else Tensor(mask)
    lf = eot_loss(model, original, delta, mask, samples, scenes, cfg.true_label, alpha)
    md = ad.mul(delta, ad.repeat_last(mask, delta.shape[-1]))
    t1 = ad.norm(md, cfg.p_norm)
    t2 = ad.norm(mask, cfg.p_norm)
    value = ad.sub(ad.add(ad.scale(t1, cfg.alpha), ad.scale(t2, cfg.beta)), lf)
    t3 = None
    if cfg.gamma > 0:
        if noise is None:
            raise ValueError("gamma > 0 requires a noise set")
        from .rps import rps_op

        t3 = rps_op(delta, mask, original, noise if isinstance(noise, NnIndex) else NnIndex(_points(noise)), cfg.active_eps)
        value = ad.add(value, ad.scale(t3, cfg.gamma))
    terms = {
        "masked_delta_norm": t1.item(),
        "mask_norm": t2.item(),
        "rps": 0.0 if t3 is None else t3.item(),
        "eot_loss": lf.item(),
    }
    return value, terms


def _points(noise):
    return noise.points if hasattr(noise, "points") else np.asarray(noise)


# -------------------------------------------------------------- optimizer


@dataclass
class AttackState:
    original: np.ndarray
    delta: np.ndarray
    mask: np.ndarray
    allowed: np.ndarray
    optimizer: Adam
    rng: np.random.Generator
    iteration: int = 0


def init_state(sign, regions, cfg):
    delta = init_perturbation(sign.shape[0])
    mask = init_mask(regions)
    if cfg.project_white:
        allowed = (regions.labels == RED_BACKGROUND).astype(np.float64)[..., None]
    else:
        allowed = regions.support
    opt = Adam([delta, mask], [cfg.lr_delta, cfg.lr_mask])
    return AttackState(np.asarray(sign, dtype=np.float64), delta, mask, allowed, opt, np.random.default_rng(cfg.seed))


def draw_samples(state, cfg, tcfg, scenes):
    size = state.original.shape[0]
    hw = scenes[0].shape[:2]
    return [sample_transform(tcfg, state.rng, len(scenes), size, hw) for _ in range(cfg.mc_batch)]


def evaluate_step(model, state, cfg, samples, scenes, noise, alpha):
    """Objective, terms and gradients at the current state (no update)."""
    d = Tensor(state.delta, requires_grad=True)
    m = Tensor(state.mask, requires_grad=True)
    with Tape() as tape:
        value, terms = objective(model, state.original, d, m, samples, scenes, cfg, noise, alpha)
    if not np.isfinite(value.item()):
        raise AttackAborted(f"objective is {value.item()} at iteration {state.iteration}: terms {terms}")
    ad.backward(tape, value)
    gd = d.grad if d.grad is not None else np.zeros_like(state.delta)
    gm = m.grad if m.grad is not None else np.zeros_like(state.mask)
    if not (np.isfinite(gd).all() and np.isfinite(gm).all()):
        raise AttackAborted(f"non-finite gradient at iteration {state.iteration}: terms {terms}")
    return value.item(), terms, gd, gm


def attack_step(state, cfg, grads):
    """Joint Adam update of delta and mask, then projection onto the feasible set."""
    state.optimizer.step(list(grads))
    np.clip(state.mask, 0.0, 1.0, out=state.mask)
    state.mask *= state.allowed
    np.clip(state.delta, -1.0, 1.0, out=state.delta)
    state.iteration += 1
    return state.delta, state.mask


def run_attack(model, sign, regions, cfg, scenes, noise=None, transform_config=None, callback=None):
    """Iterate until the objective drops below ``cfg.stop_threshold`` or the budget runs out."""
    tcfg = transform_config or TransformConfig(mc_batch=cfg.mc_batch)
    alpha = regions.support
    state = init_state(sign, regions, cfg)
    index = None
    if cfg.gamma > 0:
        if noise is None:
            raise ValueError("gamma > 0 requires a noise set")
        index = noise if isinstance(noise, NnIndex) else NnIndex(_points(noise))
    trace, terms = [], []
    reason = "iteration budget"
    for it in range(cfg.max_iters):
        samples = draw_samples(state, cfg, tcfg, scenes)
        value, t, gd, gm = evaluate_step(model, state, cfg, samples, scenes, index, alpha)
        trace.append(value)
        terms.append(t)
        if callback is not None:
            callback(it, value, t)
        if value < cfg.stop_threshold:
            reason = "objective below threshold"
            break
        attack_step(state, cfg, (gd, gm))
    adv = apply_masked_perturbation(state.original, state.delta, state.mask)
    return AttackResult(state.delta.copy(), state.mask.copy(), adv, trace, terms, len(trace), reason)


# -------------------------------------------------------------- baselines


def _input_gradient(model, x, y, sign_box):
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = detection_loss(model, xt, y, sign_box)
    ad.backward(tape, loss)
    return xt.grad


def baseline_fgsm(model, scene_image, y, eps, sign_box, clamp=True):
    """x + eps * sign(grad J_f); clamped to [0, 1] unless ``clamp`` is False."""
    x = np.asarray(scene_image, dtype=np.float64)
    if eps < 0:
        raise ValueError("eps must be >= 0")
    out = x + eps * np.sign(_input_gradient(model, x, y, sign_box))
    return np.clip(out, 0.0, 1.0) if clamp else out


def baseline_bim(model, scene_image, y, lam, m, sign_box):
    """``m`` signed-gradient steps of size ``lam``, clamped to [0, 1] after each."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    x = np.asarray(scene_image, dtype=np.float64)
    for _ in range(int(m)):
        x = np.clip(x + lam * np.sign(_input_gradient(model, x, y, sign_box)), 0.0, 1.0)
    return x
