"""Numba switch.

Set ``NATURALAE_DISABLE_NUMBA=1`` before import to run every kernel on the
pure-numpy path. ``set_backend`` flips the choice at runtime (tests and the
benchmark use it to compare both paths in one process).
"""

import os

_FLAG = os.environ.get("NATURALAE_DISABLE_NUMBA", "").strip().lower()

try:
    if _FLAG in {"1", "true", "yes", "on"}:
        raise ImportError("numba disabled by NATURALAE_DISABLE_NUMBA")
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:
    _numba = None
    HAVE_NUMBA = False

_use_numba = HAVE_NUMBA


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrapper(f):
        return f

    return wrapper


def use_numba():
    return _use_numba


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend name."""
    global _use_numba
    prev = backend()
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is unavailable")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}")
    return prev


def backend():
    return "numba" if _use_numba else "numpy"
