"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Usage::

    x = Tensor(np.ones((4, 4)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(mul(x, x))
    backward(tape, loss)
    x.grad  # 2 * x

Operations only record when a tape is active and at least one operand
requires a gradient, so inference paths pay no bookkeeping cost. Shapes must
match exactly for binary operations; the only broadcast allowed is between a
tensor and a Python scalar.
"""

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "add_scalar",
    "relu",
    "sigmoid",
    "clamp01",
    "exp",
    "log",
    "absolute",
    "elementwise",
    "sum_all",
    "sum_last",
    "norm",
    "log_softmax",
    "reshape",
    "getitem",
    "stack",
    "concat",
    "repeat_last",
    "pad_edge",
    "paste",
    "conv2d",
    "bilinear_sample",
    "custom",
]


class ShapeError(ValueError):
    pass


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Ordered record of primitive applications.

    Each node is ``(output, inputs, backward_fn)``; nodes are appended in
    execution order, so every input precedes the node that consumes it.
    A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, inputs, backward_fn))
    return out


def custom(data, inputs, backward_fn):
    """Record a hand-written primitive: ``backward_fn(g)`` returns one gradient per input."""
    return _make(np.asarray(data, dtype=np.float64), tuple(inputs), backward_fn)


def backward(tape, loss):
    """Propagate d(loss)/d(.) through ``tape``; sets ``.grad`` on every leaf.

    Returns a dict mapping each leaf tensor to its gradient. The tape is
    emptied afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes or tape.nodes[-1][0] is not loss:
        raise ValueError("loss must be the last output recorded on the tape")
    produced = {id(node[0]) for node in tape.nodes}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out, inputs, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    result = {}
    for key, t in leaves.items():
        t.grad = np.asarray(grads[key], dtype=np.float64).reshape(t.shape)
        result[t] = t.grad
    tape.nodes.clear()
    return result


# ------------------------------------------------------------ elementwise


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(x):
    return _make(-x.data, (x,), lambda g: (-g,))


def scale(x, c):
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x, c):
    return _make(x.data + float(c), (x,), lambda g: (g,))


def relu(x):
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x):
    out = np.exp(-np.logaddexp(0.0, -x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def clamp01(x):
    inside = (x.data >= 0.0) & (x.data <= 1.0)
    return _make(np.clip(x.data, 0.0, 1.0), (x,), lambda g: (g * inside,))


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def absolute(x):
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "clamp01": clamp01, "exp": exp, "log": log, "abs": absolute}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind, *args):
    """Dispatch by name: add, sub, mul, div, relu, sigmoid, clamp01, exp, log, abs, scale."""
    if op_kind in _BINARY:
        return _BINARY[op_kind](*args)
    if op_kind in _UNARY:
        return _UNARY[op_kind](*args)
    if op_kind == "scale":
        return scale(*args)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -------------------------------------------------------------- reductions


def sum_last(x):
    """Sum over the last axis."""
    shape = x.shape
    return _make(x.data.sum(axis=-1), (x,), lambda g: (np.broadcast_to(g[..., None], shape).copy(),))


def sum_all(x):
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def norm(x, p=2):
    """Flat L1 or L2 norm; the L2 subgradient at zero is taken as zero."""
    xd = x.data
    if p == 2:
        n = float(np.sqrt(np.sum(xd * xd)))
        return _make(np.asarray(n), (x,), lambda g: (xd * (float(g) / n) if n > 0 else np.zeros_like(xd),))
    if p == 1:
        return _make(np.asarray(np.abs(xd).sum()), (x,), lambda g: (np.sign(xd) * float(g),))
    raise ValueError(f"unsupported norm order {p!r}")


def log_softmax(x):
    """Log-softmax over the last axis."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=-1, keepdims=True))
    out = xd - lse
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


# ----------------------------------------------------------------- shaping


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x, idx):
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bw)


def stack(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    n = len(tensors)
    return _make(np.stack([t.data for t in tensors]), tuple(tensors), lambda g: tuple(g[i] for i in range(n)))


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def repeat_last(x, n):
    """[..., 1] -> [..., n] (mask to RGB)."""
    if x.shape[-1] != 1:
        raise ShapeError(f"repeat_last expects a trailing singleton axis, got {x.shape}")
    return _make(np.repeat(x.data, n, axis=-1), (x,), lambda g: (g.sum(axis=-1, keepdims=True),))


def pad_edge(x, p):
    """Replicate-pad the two spatial axes of [H,W,C] or [N,H,W,C] by ``p``."""
    if p == 0:
        return x
    ax = x.ndim - 3
    widths = [(0, 0)] * x.ndim
    widths[ax] = widths[ax + 1] = (p, p)

    def bw(g):
        g = g.copy()
        for a in (ax, ax + 1):
            n = g.shape[a] - 2 * p
            lead = [slice(None)] * g.ndim
            head = list(lead)
            head[a] = slice(0, p)
            tail = list(lead)
            tail[a] = slice(n + p, n + 2 * p)
            first = list(lead)
            first[a] = slice(p, p + 1)
            last = list(lead)
            last[a] = slice(n + p - 1, n + p)
            g[tuple(first)] += g[tuple(head)].sum(axis=a, keepdims=True)
            g[tuple(last)] += g[tuple(tail)].sum(axis=a, keepdims=True)
            core = list(lead)
            core[a] = slice(p, n + p)
            g = g[tuple(core)]
        return (g,)

    return _make(np.pad(x.data, widths, mode="edge"), (x,), bw)


def paste(x, canvas_hw, top, left):
    """Place [h,w,C] into a zero canvas of ``canvas_hw`` at (top, left)."""
    h, w, c = x.shape
    H, W = canvas_hw
    if top < 0 or left < 0 or top + h > H or left + w > W:
        raise ShapeError(f"paste: {h}x{w} at ({top},{left}) exceeds canvas {H}x{W}")
    out = np.zeros((H, W, c))
    out[top : top + h, left : left + w] = x.data
    return _make(out, (x,), lambda g: (g[top : top + h, left : left + w],))


# ------------------------------------------------------------ convolution


def conv2d(x, kernel, stride=1, padding=0, bias=None):
    """2-D cross-correlation of [H,W,Cin] or [N,H,W,Cin] with [k,k,Cin,Cout]."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d: kernel must be [k,k,Cin,Cout], got {kernel.shape}")
    k, _, kc, cout = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or xd.shape[-1] != kc:
        raise ShapeError(f"conv2d: input {x.shape} has {xd.shape[-1]} channels, kernel expects Cin={kc}")
    N, H, W, cin = xd.shape
    p = int(padding)
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0))) if p else xd
    Hp, Wp = H + 2 * p, W + 2 * p
    if Hp < k or Wp < k:
        raise ShapeError(f"conv2d: padded input {Hp}x{Wp} smaller than kernel {k}")
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    Ho, Wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, k * k * cin)
    km = kernel.data.reshape(k * k * cin, cout)
    out = cols @ km
    inputs = (x, kernel)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out += bias.data
        inputs = (x, kernel, bias)
    out = out.reshape(N, Ho, Wo, cout)
    if not batched:
        out = out[0]

    def bw(g):
        g2 = g.reshape(-1, cout)
        dx = dk = None
        if x.requires_grad:
            dcols = (g2 @ km.T).reshape(N, Ho, Wo, k, k, cin)
            dxp = kernels.col2im(dcols, Hp, Wp, stride)
            dx = dxp[:, p : p + H, p : p + W] if p else dxp
            if not batched:
                dx = dx[0]
        if kernel.requires_grad:
            dk = (cols.T @ g2).reshape(kernel.shape)
        if bias is None:
            return dx, dk
        return dx, dk, (g2.sum(axis=0) if bias.requires_grad else None)

    return _make(out, inputs, bw)


def bilinear_sample(x, coords):
    """Sample [H,W,C] at pixel coordinates [H',W',2] ordered (x, y).

    Out-of-range neighbours read as zero. Coordinates are constants; the
    gradient flows to ``x`` only.
    """
    coords = coords.data if isinstance(coords, Tensor) else np.asarray(coords, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"bilinear_sample: input must be [H,W,C], got {x.shape}")
    if coords.ndim != 3 or coords.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample: coords must be [H',W',2], got {coords.shape}")
    H, W, _ = x.shape
    out = kernels.bilinear_gather(x.data, coords)
    return _make(out, (x,), lambda g: (kernels.bilinear_scatter(g, coords, H, W),))
