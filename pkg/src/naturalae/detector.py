"""Micro one-stage grid detector: data, training, inference, detection loss, weight file.

Each grid cell predicts ``C`` class logits, one objectness logit and four box
offsets ``(tx, ty, tw, th)`` decoded as::

    cx = (col + sigmoid(tx)) / G    cy = (row + sigmoid(ty)) / G
    w  = sigmoid(tw)                h  = sigmoid(th)

all in image fractions.
"""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import CLASS_NAMES, STOP_SIGN, make_scenes, render_object
from .optim import Adam
from .transforms import TransformConfig, apply_pipeline, sample_transform

log = logging.getLogger(__name__)

# (kernel, stride, out_channels) per conv layer; a 1x1 head follows
ARCHITECTURES = {
    "wide": ((3, 2, 24), (3, 2, 48), (3, 2, 64), (3, 1, 96)),
    "narrow": ((5, 4, 16), (3, 2, 32), (3, 1, 48)),
}
THRESHOLDS = {"wide": 0.2, "narrow": 0.4}

LOSS_IOU_GATE = 0.3
NMS_IOU = 0.5
MATCH_IOU = 0.3

MAGIC = b"NAEW"
FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Architecture:
    name: str = "wide"
    input_size: int = 64
    grid: int = 8
    n_classes: int = len(CLASS_NAMES)
    layers: tuple = ARCHITECTURES["wide"]

    @classmethod
    def named(cls, name, input_size=64, grid=8, n_classes=len(CLASS_NAMES)):
        return cls(name, input_size, grid, n_classes, ARCHITECTURES[name])

    @property
    def head_channels(self):
        return self.n_classes + 5

    def layer_dims(self):
        """(k, stride, cin, cout) for every conv layer including the head."""
        dims = []
        cin = 3
        for k, s, cout in self.layers:
            dims.append((k, s, cin, cout))
            cin = cout
        dims.append((1, 1, cin, self.head_channels))
        return dims


@dataclass
class Detection:
    box: tuple
    class_id: int
    score: float


@dataclass
class SceneSample:
    image: np.ndarray
    boxes: list = field(default_factory=list)
    labels: list = field(default_factory=list)


class DetectorModel:
    def __init__(self, arch, weights, class_names=CLASS_NAMES, threshold=None):
        self.arch = arch
        self.weights = weights
        self.class_names = tuple(class_names)
        self.threshold = THRESHOLDS.get(arch.name, 0.2) if threshold is None else float(threshold)

    @classmethod
    def initialize(cls, arch, seed):
        rng = np.random.default_rng(seed)
        weights = []
        for k, _, cin, cout in arch.layer_dims():
            std = np.sqrt(2.0 / (k * k * cin))
            weights.append((rng.normal(0.0, std, (k, k, cin, cout)), np.zeros(cout)))
        return cls(arch, weights)

    def parameters(self):
        return [a for pair in self.weights for a in pair]

    def forward(self, images, params=None):
        """Raw head output [N,G,G,C+5] (or [G,G,C+5] for a single image)."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        if params is None:
            params = [Tensor(a) for a in self.parameters()]
        dims = self.arch.layer_dims()
        for i, (k, s, _, _) in enumerate(dims):
            x = ad.conv2d(x, params[2 * i], stride=s, padding=k // 2, bias=params[2 * i + 1])
            if i < len(dims) - 1:
                x = ad.relu(x)
        return x

    def quantize(self):
        """Round weights to float32 so the weight file round-trips exactly."""
        self.weights = [(k.astype(np.float32).astype(np.float64), b.astype(np.float32).astype(np.float64)) for k, b in self.weights]
        return self


# ------------------------------------------------------------------- boxes


def decode(head, n_classes):
    """Decode head output [..., G, G, C+5] to (boxes [...,G,G,4], class probs, objectness)."""
    G = head.shape[-2]
    C = n_classes
    sig = lambda z: np.exp(-np.logaddexp(0.0, -z))  # noqa: E731
    logits = head[..., :C]
    p = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    obj = sig(head[..., C])
    rows, cols = np.meshgrid(np.arange(G), np.arange(G), indexing="ij")
    cx = (cols + sig(head[..., C + 1])) / G
    cy = (rows + sig(head[..., C + 2])) / G
    w = sig(head[..., C + 3])
    h = sig(head[..., C + 4])
    return np.stack([cx, cy, w, h], axis=-1), p, obj


def iou(a, b):
    """IoU of (cx, cy, w, h) boxes; broadcasts over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax0, ay0 = a[..., 0] - a[..., 2] / 2, a[..., 1] - a[..., 3] / 2
    ax1, ay1 = a[..., 0] + a[..., 2] / 2, a[..., 1] + a[..., 3] / 2
    bx0, by0 = b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2
    bx1, by1 = b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0, None)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _clip_box(box):
    x0 = max(0.0, box[0] - box[2] / 2)
    y0 = max(0.0, box[1] - box[3] / 2)
    x1 = min(1.0, box[0] + box[2] / 2)
    y1 = min(1.0, box[1] + box[3] / 2)
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def detections_from_head(head, n_classes, conf_threshold, nms_iou=NMS_IOU):
    boxes, p, obj = decode(head, n_classes)
    cls = p.argmax(axis=-1)
    score = obj * p.max(axis=-1)
    flat = np.flatnonzero(score.reshape(-1) >= conf_threshold)
    sb = score.reshape(-1)[flat]
    # stable descending order, ties by cell index
    order = flat[np.lexsort((flat, -sb))]
    boxes = boxes.reshape(-1, 4)
    cls = cls.reshape(-1)
    score = score.reshape(-1)
    kept = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= nms_iou for j in kept):
            kept.append(i)
    return [Detection(_clip_box(tuple(float(v) for v in boxes[i])), int(cls[i]), float(score[i])) for i in kept]


def detect(model, image, conf_threshold=None):
    """Thresholded, class-agnostic NMS'd detections for one [H,W,3] image."""
    thr = model.threshold if conf_threshold is None else conf_threshold
    head = model.forward(np.asarray(image, dtype=np.float64)).data
    return detections_from_head(head, model.arch.n_classes, thr)


def detect_batch(model, images, conf_threshold=None):
    thr = model.threshold if conf_threshold is None else conf_threshold
    heads = model.forward(np.asarray(images, dtype=np.float64)).data
    return [detections_from_head(h, model.arch.n_classes, thr) for h in heads]


def region_prediction(detections, box, match_iou=MATCH_IOU):
    """Class of the highest-scoring detection overlapping ``box``; None if undetected."""
    best = None
    for d in detections:
        if iou(d.box, box) >= match_iou and (best is None or d.score > best.score):
            best = d
    return None if best is None else best.class_id


# ----------------------------------------------------------- detection loss


def loss_gate(head, n_classes, sign_boxes, iou_gate=LOSS_IOU_GATE):
    """Constant [N,G,G] weights selecting the cells whose boxes overlap each sign box."""
    boxes, _, _ = decode(head, n_classes)
    gates = np.zeros(boxes.shape[:-1])
    for n, sb in enumerate(sign_boxes):
        ov = iou(boxes[n], np.asarray(sb))
        if (ov >= iou_gate).any():
            gates[n] = ov >= iou_gate
        else:
            gates[n].flat[int(np.argmax(ov))] = 1.0
    return gates


def detection_loss_batch(model, images, true_label, sign_boxes, params=None):
    """Per-image objectness-weighted mean cross-entropy over sign-overlapping cells.

    ``images`` is a Tensor [N,H,W,3]; returns a Tensor of shape [N].
    """
    head = model.forward(images, params)
    C = model.arch.n_classes
    N, G = head.shape[0], head.shape[1]
    gate = loss_gate(head.data, C, sign_boxes)
    logp = ad.log_softmax(ad.getitem(head, (Ellipsis, slice(0, C))))
    ce = ad.neg(ad.getitem(logp, (Ellipsis, int(true_label))))
    obj = ad.mul(ad.sigmoid(ad.getitem(head, (Ellipsis, C))), Tensor(gate))
    num = ad.sum_last(ad.reshape(ad.mul(obj, ce), (N, G * G)))
    den = ad.sum_last(ad.reshape(obj, (N, G * G)))
    return ad.div(num, den)


def detection_loss(model, image, true_label, sign_box):
    """J_f for a single [H,W,3] image (Tensor or array); scalar Tensor."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    per = detection_loss_batch(model, ad.reshape(x, (1,) + x.shape), true_label, [sign_box])
    return ad.sum_all(per)


# ------------------------------------------------------------------- data


TRAIN_TRANSFORMS = TransformConfig()
CLASS_PROBS = (0.4, 0.15, 0.15, 0.15, 0.15)


def _render_scene(rng, scenes, size, config, max_objects=3):
    n_obj = int(rng.integers(0, max_objects + 1))
    scene = scenes[int(rng.integers(len(scenes)))].copy()
    boxes, labels = [], []
    for _ in range(n_obj):
        cls = int(rng.choice(len(CLASS_PROBS), p=CLASS_PROBS))
        img, alpha = render_object(cls, size, rng)
        for _attempt in range(10):
            params = sample_transform(config, rng, len(scenes), size, scene.shape[:2])
            out, box = apply_pipeline(img, params, scene, alpha=alpha, return_box=True)
            if all(iou(box, b) < 0.1 for b in boxes):
                scene = out.data
                boxes.append(box)
                labels.append(cls)
                break
    return SceneSample(scene, boxes, labels)


def generate_dataset(n, seed, size=64, config=TRAIN_TRANSFORMS):
    """``n`` synthetic scenes with 0-3 objects each; deterministic per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    scenes = make_scenes(size=size)
    rng = np.random.default_rng(seed)
    return [_render_scene(rng, scenes, size, config) for _ in range(n)]


# --------------------------------------------------------------- training


def _targets(samples, grid):
    N = len(samples)
    obj = np.zeros((N, grid, grid))
    cls = np.zeros((N, grid, grid), dtype=np.int64)
    box = np.zeros((N, grid, grid, 4))
    area = np.zeros((N, grid, grid))
    for n, s in enumerate(samples):
        for (cx, cy, w, h), label in zip(s.boxes, s.labels):
            col = min(int(cx * grid), grid - 1)
            row = min(int(cy * grid), grid - 1)
            if w * h <= area[n, row, col]:
                continue
            area[n, row, col] = w * h
            obj[n, row, col] = 1.0
            cls[n, row, col] = label
            box[n, row, col] = (cx * grid - col, cy * grid - row, w, h)
    return obj, cls, box


def _ignore_mask(z, n_classes, gt_boxes, thresh):
    boxes, _, _ = decode(z, n_classes)
    ignore = np.zeros(z.shape[:-1], dtype=bool)
    for n, gts in enumerate(gt_boxes):
        for b in gts:
            ignore[n] |= iou(boxes[n], np.asarray(b)) > thresh
    return ignore


def grid_loss(head, obj_t, cls_t, box_t, n_classes, gt_boxes=None, noobj=0.5, box_weight=5.0, ignore_iou=0.5):
    """Objectness BCE + class CE + box L2, as a recorded primitive on ``head``.

    Negative cells whose predicted box already overlaps a ground truth by more
    than ``ignore_iou`` are left out of the objectness penalty.
    """
    z = head.data
    C = n_classes
    N = z.shape[0]
    zo = z[..., C]
    so = np.exp(-np.logaddexp(0.0, -zo))
    pos = obj_t > 0
    neg = ~pos
    if gt_boxes is not None:
        neg &= ~_ignore_mask(z, C, gt_boxes, ignore_iou)
    l_obj = np.logaddexp(0.0, -zo)[pos].sum() + noobj * np.logaddexp(0.0, zo)[neg].sum()
    logits = z[..., :C]
    m = logits.max(axis=-1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    onehot = np.eye(C)[cls_t]
    l_cls = -(logp * onehot).sum(axis=-1)[pos].sum()
    sb = np.exp(-np.logaddexp(0.0, -z[..., C + 1 :]))
    diff = (sb - box_t) * pos[..., None]
    l_box = box_weight * (diff**2).sum()
    total = (l_obj + l_cls + l_box) / N

    def bw(g):
        d = np.zeros_like(z)
        d[..., C] = np.where(pos, so - 1.0, np.where(neg, noobj * so, 0.0))
        d[..., :C] = (np.exp(logp) - onehot) * pos[..., None]
        d[..., C + 1 :] = 2.0 * box_weight * diff * sb * (1.0 - sb)
        return (d * (float(g) / N),)

    return ad.custom(np.asarray(total), (head,), bw), (l_obj / N, l_cls / N, l_box / N)


def train_detector(dataset, arch, epochs, seed, batch_size=32, lr=3e-3, log_every=1):
    """Mini-batch Adam on the grid loss; returns a float32-exact DetectorModel."""
    if not dataset:
        raise ValueError("dataset is empty")
    if isinstance(arch, str):
        arch = Architecture.named(arch)
    model = DetectorModel.initialize(arch, seed)
    if epochs == 0:
        return model
    rng = np.random.default_rng(seed + 1)
    images = np.stack([s.image for s in dataset])
    obj_t, cls_t, box_t = _targets(dataset, arch.grid)
    raw = model.parameters()
    opt = Adam(raw, lr)
    n = len(dataset)
    steps_per_epoch = (n + batch_size - 1) // batch_size
    total_steps = epochs * steps_per_epoch
    step = 0
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * batch_size : (b + 1) * batch_size]
            # cosine decay keeps late epochs from bouncing
            for i in range(len(opt.lr)):
                opt.lr[i] = lr * 0.5 * (1 + np.cos(np.pi * step / total_steps))
            params = [Tensor(a, requires_grad=True) for a in raw]
            with Tape() as tape:
                head = model.forward(Tensor(images[idx]), params)
                loss, parts = grid_loss(
                    head, obj_t[idx], cls_t[idx], box_t[idx], arch.n_classes, gt_boxes=[dataset[i].boxes for i in idx]
                )
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} at epoch {epoch} step {b}: obj={parts[0]:.4g} cls={parts[1]:.4g} box={parts[2]:.4g}"
                )
            ad.backward(tape, loss)
            opt.step([p.grad for p in params])
            running += value
            step += 1
        history.append(running / steps_per_epoch)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d/%d loss %.4f", epoch + 1, epochs, history[-1])
    model.weights = [(raw[2 * i], raw[2 * i + 1]) for i in range(len(raw) // 2)]
    model.history = history
    return model.quantize()


def clean_accuracy(model, dataset, conf_threshold=None, label=STOP_SIGN):
    """Fraction of ``label`` instances whose overlapping top detection has that label."""
    hits = total = 0
    preds = detect_batch(model, np.stack([s.image for s in dataset]), conf_threshold)
    for s, dets in zip(dataset, preds):
        for box, lab in zip(s.boxes, s.labels):
            if lab != label:
                continue
            total += 1
            hits += region_prediction(dets, box) == label
    return hits / total if total else float("nan")


# ------------------------------------------------------------ weight file


def save_model(model, path):
    """Little-endian: magic, version, descriptor, class names, float32 payloads."""
    arch = model.arch
    dims = arch.layer_dims()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        name = arch.name.encode()
        fh.write(struct.pack("<I", len(name)) + name)
        fh.write(struct.pack("<IIId", arch.input_size, arch.grid, arch.n_classes, model.threshold))
        fh.write(struct.pack("<I", len(dims)))
        for d in dims:
            fh.write(struct.pack("<IIII", *d))
        fh.write(struct.pack("<I", len(model.class_names)))
        for cname in model.class_names:
            b = cname.encode()
            fh.write(struct.pack("<I", len(b)) + b)
        for k, bias in model.weights:
            fh.write(np.ascontiguousarray(k, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(bias, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ValueError(f"{self.path}: truncated at byte {self.pos}, needed {n} more bytes")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != MAGIC:
        raise ValueError(f"{path}: bad magic, not a NAEW weight file")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    (nlen,) = r.unpack("<I")
    name = r.take(nlen).decode()
    input_size, grid, n_classes, threshold = r.unpack("<IIId")
    (nlayers,) = r.unpack("<I")
    dims = [r.unpack("<IIII") for _ in range(nlayers)]
    (ncls,) = r.unpack("<I")
    names = []
    for _ in range(ncls):
        (ln,) = r.unpack("<I")
        names.append(r.take(ln).decode())
    layers = tuple((k, s, cout) for k, s, _, cout in dims[:-1])
    arch = Architecture(name, input_size, grid, n_classes, layers)
    if arch.layer_dims() != [tuple(d) for d in dims]:
        raise ValueError(f"{path}: inconsistent layer descriptor {dims}")
    weights = []
    for k, _, cin, cout in dims:
        kw = np.frombuffer(r.take(4 * k * k * cin * cout), dtype="<f4").reshape(k, k, cin, cout).astype(np.float64)
        b = np.frombuffer(r.take(4 * cout), dtype="<f4").astype(np.float64)
        weights.append((kw, b))
    if r.pos != len(r.buf):
        raise ValueError(f"{path}: {len(r.buf) - r.pos} trailing bytes after payload")
    return DetectorModel(arch, weights, names, threshold=threshold)


# ---------------------------------------------------------- dataset file

DATA_MAGIC = b"NAES"


def save_dataset(samples, path):
    """Little-endian: magic, version, count, image size, per-sample labelled boxes, 8-bit pixels."""
    h, w = samples[0].image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC + struct.pack("<IIII", FORMAT_VERSION, len(samples), h, w))
        for s in samples:
            fh.write(struct.pack("<I", len(s.labels)))
            for box, label in zip(s.boxes, s.labels):
                fh.write(struct.pack("<I4d", label, *box))
        for s in samples:
            fh.write(np.rint(np.clip(s.image, 0, 1) * 255).astype(np.uint8).tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != DATA_MAGIC:
        raise ValueError(f"{path}: bad magic, not a NAES dataset file")
    version, n, h, w = r.unpack("<IIII")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    annotations = []
    for _ in range(n):
        (k,) = r.unpack("<I")
        rows = [r.unpack("<I4d") for _ in range(k)]
        annotations.append(([tuple(row[1:]) for row in rows], [int(row[0]) for row in rows]))
    out = []
    for boxes, labels in annotations:
        img = np.frombuffer(r.take(h * w * 3), dtype=np.uint8).reshape(h, w, 3) / 255.0
        out.append(SceneSample(img, boxes, labels))
    if r.pos != len(r.buf):
        raise ValueError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return out
