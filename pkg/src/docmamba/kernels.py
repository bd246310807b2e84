"""Backend selection for the scan kernels.

The compiled extension is used when it imports; set ``DOCMAMBA_PURE_PYTHON=1``
to force the NumPy fallback. Both backends expose ``scan_forward`` and
``scan_backward`` with identical semantics (see ``_fallback``).
"""
import os

import numpy as np

from docmamba import _fallback

try:
    from docmamba import _scan_kernels as _ext
except ImportError:  # extension not built
    _ext = None

if os.environ.get("DOCMAMBA_PURE_PYTHON", "") not in ("", "0"):
    _ext = None

BACKEND = "cython" if _ext is not None else "numpy"
AVAILABLE = ("cython", "numpy") if _ext is not None else ("numpy",)


def _resolve(backend):
    backend = backend or BACKEND
    if backend not in AVAILABLE:
        raise ValueError(f"scan backend {backend!r} unavailable (have {AVAILABLE})")
    return backend


def _prep(arrays, dtype):
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


def scan_forward(x, dt, A, Bm, Cm, backend=None):
    """Core recurrence without the skip term: ``y[b,t,c] = sum_n C[b,t,n] h[b,t,c,n]``."""
    dtype = np.result_type(x.dtype, np.float32)
    x, dt, A, Bm, Cm = _prep((x, dt, A, Bm, Cm), dtype)
    if _resolve(backend) == "numpy":
        return _fallback.scan_forward(x, dt, A, Bm, Cm)
    y = np.empty_like(x)
    _ext.scan_forward(x, dt, A, Bm, Cm, y)
    return y


def scan_backward(x, dt, A, Bm, Cm, dy, backend=None):
    """Return ``(dx, ddt, dA, dB, dC)`` for upstream gradient ``dy``."""
    dtype = np.result_type(x.dtype, np.float32)
    x, dt, A, Bm, Cm, dy = _prep((x, dt, A, Bm, Cm, dy), dtype)
    if _resolve(backend) == "numpy":
        return _fallback.scan_backward(x, dt, A, Bm, Cm, dy)
    dx = np.zeros_like(x)
    ddt = np.zeros_like(dt)
    dA = np.zeros_like(A)
    dB = np.zeros_like(Bm)
    dC = np.zeros_like(Cm)
    _ext.scan_backward(x, dt, A, Bm, Cm, dy, dx, ddt, dA, dB, dC)
    return dx, ddt, dA, dB, dC
