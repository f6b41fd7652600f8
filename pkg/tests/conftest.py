import numpy as np
import pytest

from naturalae import _accel
from naturalae.autodiff import Tape, Tensor, backward


def numeric_grad(f, x, h=1e-4):
    """Central differences of scalar ``f`` (array -> float) at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def analytic_grad(build, *arrays):
    """Gradients of the scalar Tensor returned by ``build(*tensors)``."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*ts)
    backward(tape, loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def rel_err(a, n):
    """Max absolute deviation relative to the largest numeric gradient entry."""
    a, n = np.asarray(a), np.asarray(n)
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-8))


def check_grad(build, arrays, h=1e-4):
    """Max relative error over every argument of ``build``."""
    grads = analytic_grad(build, *arrays)
    worst = 0.0
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [Tensor(b) for b in arrays]
            args[k] = Tensor(v)
            return build(*args).item()

        worst = max(worst, rel_err(grads[k], numeric_grad(f, a, h)))
    return worst


@pytest.fixture(params=["numba", "numpy"] if _accel.HAVE_NUMBA else ["numpy"])
def backend(request):
    prev = _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def check_grad_sampled(build, x, n, seed=0, h=1e-4, where=None):
    """Like check_grad for one argument, on ``n`` randomly chosen coordinates (within ``where``)."""
    (g,) = analytic_grad(build, x)
    pool = np.arange(x.size) if where is None else np.flatnonzero(np.broadcast_to(where, x.shape))
    idx = np.random.default_rng(seed).choice(pool, size=min(n, pool.size), replace=False)
    num = np.empty(len(idx))
    for j, i in enumerate(idx):
        v = x.copy().ravel()
        v[i] += h
        fp = build(Tensor(v.reshape(x.shape))).item()
        v[i] -= 2 * h
        fm = build(Tensor(v.reshape(x.shape))).item()
        num[j] = (fp - fm) / (2 * h)
    return rel_err(g.ravel()[idx], num)


# acceptance verdicts, echoed again at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
