# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled selective-scan kernels.

Both kernels take already-projected per-token quantities (``dt``, ``B``, ``C``)
with shapes ``(batch, L, d_inner)`` / ``(batch, L, n_state)`` and work on one
(batch, channel) pair at a time. Arithmetic is carried out in double precision
regardless of the storage type.
"""
from cython cimport floating
from libc.math cimport expm1, fabs
from libc.stdlib cimport malloc, free

cdef double ZOH_EPS = 1e-8


def scan_forward(const floating[:, :, ::1] x,
                 const floating[:, :, ::1] dt,
                 const floating[:, ::1] A,
                 const floating[:, :, ::1] Bm,
                 const floating[:, :, ::1] Cm,
                 floating[:, :, ::1] y):
    cdef Py_ssize_t nb = x.shape[0], L = x.shape[1], D = x.shape[2]
    cdef Py_ssize_t N = A.shape[1]
    cdef Py_ssize_t b, t, c, n
    cdef double d, xv, a, da, em, f, acc
    cdef double *h = <double *> malloc(N * sizeof(double))
    if h == NULL:
        raise MemoryError()
    try:
        with nogil:
            for b in range(nb):
                for c in range(D):
                    for n in range(N):
                        h[n] = 0.0
                    for t in range(L):
                        d = dt[b, t, c]
                        xv = x[b, t, c]
                        acc = 0.0
                        for n in range(N):
                            a = A[c, n]
                            da = d * a
                            em = expm1(da)
                            if fabs(da) < ZOH_EPS:
                                f = d
                            else:
                                f = em / a
                            h[n] = (1.0 + em) * h[n] + f * Bm[b, t, n] * xv
                            acc = acc + Cm[b, t, n] * h[n]
                        y[b, t, c] = acc
    finally:
        free(h)


def scan_backward(const floating[:, :, ::1] x,
                  const floating[:, :, ::1] dt,
                  const floating[:, ::1] A,
                  const floating[:, :, ::1] Bm,
                  const floating[:, :, ::1] Cm,
                  const floating[:, :, ::1] dy,
                  floating[:, :, ::1] dx,
                  floating[:, :, ::1] ddt,
                  floating[:, ::1] dA,
                  floating[:, :, ::1] dB,
                  floating[:, :, ::1] dC):
    """Adjoint of ``scan_forward``; output buffers must be zero-initialised.

    States are recomputed per channel into an ``L x N`` scratch buffer, so the
    extra memory is independent of ``d_inner``.
    """
    cdef Py_ssize_t nb = x.shape[0], L = x.shape[1], D = x.shape[2]
    cdef Py_ssize_t N = A.shape[1]
    cdef Py_ssize_t b, t, c, n
    cdef double d, xv, gy, a, da, abar, em, f, dfdd, dfda, bn
    cdef double hprev, gh, g_abar, g_bbar, dx_acc, ddt_acc
    cdef double *H = <double *> malloc(L * N * sizeof(double))
    cdef double *g = <double *> malloc(N * sizeof(double))
    cdef double *h = <double *> malloc(N * sizeof(double))
    cdef double *dA_loc = <double *> malloc(N * sizeof(double))
    if H == NULL or g == NULL or h == NULL or dA_loc == NULL:
        free(H); free(g); free(h); free(dA_loc)
        raise MemoryError()
    try:
        with nogil:
            for c in range(D):
                for n in range(N):
                    dA_loc[n] = 0.0
                for b in range(nb):
                    for n in range(N):
                        h[n] = 0.0
                    for t in range(L):
                        d = dt[b, t, c]
                        xv = x[b, t, c]
                        for n in range(N):
                            a = A[c, n]
                            da = d * a
                            em = expm1(da)
                            if fabs(da) < ZOH_EPS:
                                f = d
                            else:
                                f = em / a
                            h[n] = (1.0 + em) * h[n] + f * Bm[b, t, n] * xv
                            H[t * N + n] = h[n]
                    for n in range(N):
                        g[n] = 0.0
                    for t in range(L - 1, -1, -1):
                        d = dt[b, t, c]
                        xv = x[b, t, c]
                        gy = dy[b, t, c]
                        dx_acc = 0.0
                        ddt_acc = 0.0
                        for n in range(N):
                            a = A[c, n]
                            da = d * a
                            em = expm1(da)
                            abar = 1.0 + em
                            if fabs(da) < ZOH_EPS:
                                f = d
                                dfdd = 1.0
                                dfda = 0.5 * d * d
                            else:
                                f = em / a
                                dfdd = abar
                                dfda = (da * abar - em) / (a * a)
                            bn = Bm[b, t, n]
                            if t > 0:
                                hprev = H[(t - 1) * N + n]
                            else:
                                hprev = 0.0
                            gh = g[n] + gy * Cm[b, t, n]
                            dC[b, t, n] += gy * H[t * N + n]
                            g_abar = gh * hprev
                            g_bbar = gh * xv
                            dx_acc = dx_acc + gh * f * bn
                            ddt_acc = ddt_acc + g_abar * a * abar + g_bbar * bn * dfdd
                            dA_loc[n] += g_abar * d * abar + g_bbar * bn * dfda
                            dB[b, t, n] += g_bbar * f
                            g[n] = gh * abar
                        dx[b, t, c] += dx_acc
                        ddt[b, t, c] += ddt_acc
                for n in range(N):
                    dA[c, n] += dA_loc[n]
    finally:
        free(H); free(g); free(h); free(dA_loc)
