"""Hot numeric kernels with backend selection at import time.

The compiled Cython extension is preferred when importable; otherwise the
numpy reference implementation is used. Both expose the same four
functions and the same tie-breaking rules, so models behave identically
(up to float summation order) on either backend.

Selection can be forced with the environment variable
``CONCEPTSEQ_KERNELS`` set to ``compiled`` or ``numpy``, or swapped at
runtime with :func:`use` (used by tests and the benchmark).
"""

import os

import numpy as np

from . import _convref

BACKENDS = ("compiled", "numpy")


def get(name):
    """Return the backend module for `name`; ImportError if unavailable."""
    if name == "numpy":
        return _convref
    if name == "compiled":
        from . import _convcore

        return _convcore
    raise ValueError(f"unknown kernel backend {name!r}")


def _initial_backend():
    choice = os.environ.get("CONCEPTSEQ_KERNELS", "auto")
    if choice in BACKENDS:
        return get(choice), choice
    if choice != "auto":
        raise ValueError(f"CONCEPTSEQ_KERNELS={choice!r}: expected compiled/numpy/auto")
    try:
        return get("compiled"), "compiled"
    except ImportError:
        return _convref, "numpy"


_impl, active = _initial_backend()


def use(name):
    """Switch the active backend; returns the previously active name."""
    global _impl, active
    previous = active
    _impl, active = get(name), name
    return previous


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, k):
    return _impl.conv2d_forward(_c(x), _c(k))


def conv2d_backward(x, k, gy):
    return _impl.conv2d_backward(_c(x), _c(k), _c(gy))


def maxpool2_forward(x):
    return _impl.maxpool2_forward(_c(x))


def maxpool2_backward(idx, gy, H, W):
    return _impl.maxpool2_backward(np.ascontiguousarray(idx, dtype=np.int64), _c(gy), H, W)
