"""Convolution kernels with a numba fast path and a pure-numpy fallback.

Both backends expose the same four functions:

    conv2d_forward(x, w, b, stride, pad)            -> y
    conv2d_backward(x, w, dy, stride, pad, need_dx) -> (dx, dw, db)
    convt2d_forward(a, w, b, stride, pad, out_h, out_w) -> z
    convt2d_backward(a, w, dz, stride, pad)         -> (da, dw, db)

Shapes follow the channels-first convention: x is (M, Ci, H, W), conv
weights are (Co, Ci, kh, kw) and transposed-conv weights are
(Ci, Co, kh, kw). All arrays are float64 and C-contiguous.

Backend selection: the ``XRAYMTL_KERNELS`` environment variable may be
``numba``, ``numpy`` or ``auto`` (default). ``auto`` picks numba when it
imports cleanly and falls back to numpy otherwise. ``set_backend`` swaps
the implementation at runtime (used by tests and the benchmark).
"""

from __future__ import annotations

import os
import warnings

from . import numpy_backend

_ENV_VAR = "XRAYMTL_KERNELS"
_impl = numpy_backend
_name = "numpy"


def _load_numba_backend():
    from . import numba_backend

    return numba_backend


def set_backend(name: str) -> None:
    """Select the kernel implementation: 'numba', 'numpy' or 'auto'."""
    global _impl, _name
    if name == "numpy":
        _impl, _name = numpy_backend, "numpy"
    elif name == "numba":
        _impl, _name = _load_numba_backend(), "numba"
    elif name == "auto":
        try:
            _impl, _name = _load_numba_backend(), "numba"
        except Exception as exc:  # pragma: no cover - depends on env
            warnings.warn(f"numba kernels unavailable ({exc}); using numpy fallback")
            _impl, _name = numpy_backend, "numpy"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def active_backend() -> str:
    """Name of the backend behind the dispatch functions."""
    return _name


def available_backends() -> list[str]:
    backends = ["numpy"]
    try:
        _load_numba_backend()
        backends.append("numba")
    except Exception:  # pragma: no cover
        pass
    return backends


def conv2d_forward(x, w, b, stride, pad):
    return _impl.conv2d_forward(x, w, b, stride, pad)


def conv2d_backward(x, w, dy, stride, pad, need_dx=True):
    return _impl.conv2d_backward(x, w, dy, stride, pad, need_dx)


def convt2d_forward(a, w, b, stride, pad, out_h, out_w):
    return _impl.convt2d_forward(a, w, b, stride, pad, out_h, out_w)


def convt2d_backward(a, w, dz, stride, pad):
    return _impl.convt2d_backward(a, w, dz, stride, pad)


set_backend(os.environ.get(_ENV_VAR, "auto"))
