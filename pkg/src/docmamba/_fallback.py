"""NumPy implementations of the scan kernels.

Same contract as the compiled ``_scan_kernels`` module, but returning new
arrays instead of filling output buffers. Vectorised over batch, channel and
state; the time loop stays in Python.
"""
import numpy as np

ZOH_EPS = 1e-8


def _zoh_terms(d, a):
    """Return ``(abar, f)`` with ``bbar = f * B``; ``d`` is (..., D, 1), ``a`` is (D, N)."""
    da = d * a
    small = np.abs(da) < ZOH_EPS
    safe_a = np.where(small, 1.0, a)
    f = np.where(small, d, np.expm1(da) / safe_a)
    return np.exp(da), f, da, small, safe_a


def scan_forward(x, dt, A, Bm, Cm):
    nb, L, D = x.shape
    N = A.shape[1]
    h = np.zeros((nb, D, N), dtype=np.float64)
    y = np.empty((nb, L, D), dtype=np.float64)
    A64 = A.astype(np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(L):
            abar, f, *_ = _zoh_terms(dt[:, t, :, None].astype(np.float64), A64)
            h = abar * h + f * Bm[:, t, None, :] * x[:, t, :, None]
            y[:, t] = np.einsum("bdn,bn->bd", h, Cm[:, t])
    return y.astype(x.dtype, copy=False)


def scan_backward(x, dt, A, Bm, Cm, dy):
    nb, L, D = x.shape
    N = A.shape[1]
    A64 = A.astype(np.float64)
    x64 = x.astype(np.float64)
    dt64 = dt.astype(np.float64)
    B64 = Bm.astype(np.float64)
    C64 = Cm.astype(np.float64)
    dy64 = dy.astype(np.float64)

    H = np.empty((L, nb, D, N))
    h = np.zeros((nb, D, N))
    for t in range(L):
        abar, f, *_ = _zoh_terms(dt64[:, t, :, None], A64)
        h = abar * h + f * B64[:, t, None, :] * x64[:, t, :, None]
        H[t] = h

    dx = np.zeros((nb, L, D))
    ddt = np.zeros((nb, L, D))
    dA = np.zeros((D, N))
    dB = np.zeros((nb, L, N))
    dC = np.zeros((nb, L, N))
    g = np.zeros((nb, D, N))
    zero = np.zeros((nb, D, N))
    for t in range(L - 1, -1, -1):
        d = dt64[:, t, :, None]
        abar, f, da, small, safe_a = _zoh_terms(d, A64)
        dfdd = np.where(small, 1.0, abar)
        dfda = np.where(small, 0.5 * d * d, (da * abar - np.expm1(da)) / (safe_a * safe_a))
        bn = B64[:, t, None, :]
        hprev = H[t - 1] if t > 0 else zero
        gh = g + dy64[:, t, :, None] * C64[:, t, None, :]
        dC[:, t] = np.einsum("bd,bdn->bn", dy64[:, t], H[t])
        g_abar = gh * hprev
        g_bbar = gh * x64[:, t, :, None]
        dx[:, t] = np.sum(gh * f * bn, axis=-1)
        ddt[:, t] = np.sum(g_abar * A64 * abar + g_bbar * bn * dfdd, axis=-1)
        dA += np.sum(g_abar * d * abar + g_bbar * bn * dfda, axis=0)
        dB[:, t] = np.sum(g_bbar * f, axis=1)
        g = gh * abar
    dt_ = x.dtype
    return (dx.astype(dt_), ddt.astype(dt_), dA.astype(dt_),
            dB.astype(dt_), dC.astype(dt_))
