"""Selective state-space scan with zero-order-hold discretisation.

Three evaluation paths share one parameter bundle:

* ``selective_scan_naive`` -- scalar Python loops, used as the correctness oracle;
* ``selective_scan`` -- batched kernels from :mod:`docmamba.kernels`;
* ``RecurrentScan`` -- token-at-a-time inference holding only the current state.

Gradients come from ``selective_scan_backward``, a hand-derived adjoint that
recomputes hidden states instead of storing them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from docmamba import kernels
from docmamba.errors import ContractError, DomainError, NumericError

ZOH_EPS = 1e-8


@dataclass(frozen=True)
class SsmDims:
    d_inner: int
    n_state: int = 16
    dt_rank: int | None = None

    def __post_init__(self):
        if self.dt_rank is None:
            object.__setattr__(self, "dt_rank", math.ceil(self.d_inner / 16))
        for name in ("d_inner", "n_state", "dt_rank"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ContractError(f"{name} must be a positive integer, got {value!r}")


@dataclass
class ScanParams:
    """Per-direction selective-SSM parameters.

    Shapes: ``a_log`` (D, N), ``d_skip`` (D,), ``b_proj``/``c_proj`` (D, N),
    ``dt_down`` (D, R), ``dt_up`` (R, D), ``dt_bias`` (D,). The state matrix is
    ``A = -exp(a_log)``; ``dt = softplus(x @ dt_down @ dt_up + dt_bias)``.
    """

    a_log: np.ndarray
    d_skip: np.ndarray
    b_proj: np.ndarray
    c_proj: np.ndarray
    dt_down: np.ndarray
    dt_up: np.ndarray
    dt_bias: np.ndarray

    @classmethod
    def init(cls, dims: SsmDims, rng: np.random.Generator, dtype=np.float32,
             dt_min=1e-3, dt_max=0.1) -> "ScanParams":
        D, N, R = dims.d_inner, dims.n_state, dims.dt_rank
        a_log = np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (D, 1)))
        dt0 = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=D))
        dt_bias = dt0 + np.log(-np.expm1(-dt0))  # inverse softplus
        return cls(
            a_log=a_log.astype(dtype),
            d_skip=np.ones(D, dtype=dtype),
            b_proj=xavier_uniform(rng, (D, N), dtype),
            c_proj=xavier_uniform(rng, (D, N), dtype),
            dt_down=xavier_uniform(rng, (D, R), dtype),
            dt_up=xavier_uniform(rng, (R, D), dtype),
            dt_bias=dt_bias.astype(dtype),
        )

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.a_log)

    @property
    def dims(self) -> SsmDims:
        D, N = self.a_log.shape
        return SsmDims(D, N, self.dt_down.shape[1])

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def zeros_like(self) -> "ScanParams":
        return ScanParams(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def astype(self, dtype) -> "ScanParams":
        return ScanParams(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def validate(self):
        D, N = self.a_log.shape
        R = self.dt_down.shape[1]
        expected = {
            "d_skip": (D,), "b_proj": (D, N), "c_proj": (D, N),
            "dt_down": (D, R), "dt_up": (R, D), "dt_bias": (D,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ContractError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name, value in self.arrays().items():
            if not np.all(np.isfinite(value)):
                raise NumericError(f"scan parameter {name} contains non-finite values")


def xavier_uniform(rng, shape, dtype=np.float32):
    limit = math.sqrt(6.0 / (shape[0] + shape[-1]))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def softplus(u):
    return np.logaddexp(0.0, u).astype(np.asarray(u).dtype, copy=False)


def sigmoid(u):
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def zoh_discretize(delta: float, a: float, b: float) -> tuple[float, float]:
    """Zero-order hold for one scalar mode: ``(exp(delta*a), (exp(delta*a)-1)/a * b)``.

    Below ``|delta*a| < 1e-8`` the removable singularity at ``a = 0`` is taken
    by its limit ``delta * b``.
    """
    if not (math.isfinite(delta) and math.isfinite(a) and math.isfinite(b)):
        raise DomainError(f"non-finite ZOH input (delta={delta}, a={a}, b={b})")
    if delta < 0:
        raise DomainError(f"delta must be non-negative, got {delta}")
    da = delta * a
    a_bar = math.exp(da)
    if abs(da) < ZOH_EPS:
        return a_bar, delta * b
    return a_bar, math.expm1(da) / a * b


def selective_scan_naive(x, params: ScanParams) -> np.ndarray:
    """Reference recurrence over an ``(L, D)`` input using plain Python arithmetic."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractError(f"expected (L, d_inner) input with L >= 1, got shape {x.shape}")
    L, D = x.shape
    a_log = params.a_log.astype(np.float64).tolist()
    d_skip = params.d_skip.astype(np.float64).tolist()
    Wb = params.b_proj.astype(np.float64).tolist()
    Wc = params.c_proj.astype(np.float64).tolist()
    Wd = params.dt_down.astype(np.float64).tolist()
    Wu = params.dt_up.astype(np.float64).tolist()
    bias = params.dt_bias.astype(np.float64).tolist()
    N = len(a_log[0])
    R = len(Wu)
    xs = x.tolist()

    h = [[0.0] * N for _ in range(D)]
    y = [[0.0] * D for _ in range(L)]
    for t in range(L):
        xt = xs[t]
        Bt = [sum(xt[i] * Wb[i][n] for i in range(D)) for n in range(N)]
        Ct = [sum(xt[i] * Wc[i][n] for i in range(D)) for n in range(N)]
        low = [sum(xt[i] * Wd[i][r] for i in range(D)) for r in range(R)]
        for c in range(D):
            u = sum(low[r] * Wu[r][c] for r in range(R)) + bias[c]
            delta = u + math.log1p(math.exp(-u)) if u > 0 else math.log1p(math.exp(u))
            acc = 0.0
            for n in range(N):
                a_bar, b_bar = zoh_discretize(delta, -math.exp(a_log[c][n]), Bt[n])
                h[c][n] = a_bar * h[c][n] + b_bar * xt[c]
                acc += Ct[n] * h[c][n]
            value = acc + d_skip[c] * xt[c]
            if not math.isfinite(value):
                raise NumericError(f"selective scan overflowed at step {t}", step=t)
            y[t][c] = value
    return np.array(y)


@dataclass
class ScanCache:
    x: np.ndarray
    low: np.ndarray
    u: np.ndarray
    dt: np.ndarray
    Bm: np.ndarray
    Cm: np.ndarray


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ContractError(f"expected (L, D) or (batch, L, D) input, got shape {x.shape}")
    return x, False


def _check_finite(y):
    bad = ~np.isfinite(y)
    if bad.any():
        step = int(np.argmax(bad.any(axis=(0, 2))))
        raise NumericError(f"selective scan overflowed at step {step}", step=step)


def selective_scan_forward(x, params: ScanParams, backend=None):
    """Batched forward pass returning ``(y, cache)`` for the backward sweep."""
    xb, squeeze = _as_batch(x)
    if xb.shape[1] < 1:
        raise ContractError("sequence length must be at least 1")
    if xb.shape[2] != params.a_log.shape[0]:
        raise ContractError(f"input width {xb.shape[2]} != d_inner {params.a_log.shape[0]}")
    low = xb @ params.dt_down
    u = low @ params.dt_up + params.dt_bias
    dt = softplus(u)
    Bm = xb @ params.b_proj
    Cm = xb @ params.c_proj
    y = kernels.scan_forward(xb, dt, params.A, Bm, Cm, backend=backend)
    y += xb * params.d_skip
    _check_finite(y)
    cache = ScanCache(xb, low, u, dt, Bm, Cm)
    return (y[0] if squeeze else y), cache


def selective_scan(x, params: ScanParams, backend=None) -> np.ndarray:
    """Optimised scan; accepts ``(L, D)`` or ``(batch, L, D)``."""
    return selective_scan_forward(x, params, backend=backend)[0]


def selective_scan_backward(x, params: ScanParams, upstream_grad, cache: ScanCache | None = None,
                            backend=None):
    """Gradients of ``sum(selective_scan(x) * upstream_grad)``.

    Returns ``(dx, grads)`` where ``grads`` is a :class:`ScanParams` holding the
    parameter gradients.
    """
    xb, squeeze = _as_batch(x)
    dy = np.asarray(upstream_grad)
    if dy.shape != np.shape(x):
        raise ContractError(f"upstream gradient shape {dy.shape} != output shape {np.shape(x)}")
    if squeeze:
        dy = dy[None]
    if cache is None:
        _, cache = selective_scan_forward(xb, params, backend=backend)
    A = params.A
    dx, ddt, dA, dB, dC = kernels.scan_backward(xb, cache.dt, A, cache.Bm, cache.Cm, dy,
                                                backend=backend)
    dx = dx + dy * params.d_skip
    d_skip = np.einsum("btd,btd->d", dy, xb)

    du = ddt * sigmoid(cache.u)
    dt_bias = du.sum(axis=(0, 1))
    flat_x = xb.reshape(-1, xb.shape[-1])
    dt_up = cache.low.reshape(-1, cache.low.shape[-1]).T @ du.reshape(-1, du.shape[-1])
    dlow = du @ params.dt_up.T
    dt_down = flat_x.T @ dlow.reshape(-1, dlow.shape[-1])
    b_proj = flat_x.T @ dB.reshape(-1, dB.shape[-1])
    c_proj = flat_x.T @ dC.reshape(-1, dC.shape[-1])
    dx = dx + dlow @ params.dt_down.T + dB @ params.b_proj.T + dC @ params.c_proj.T

    grads = ScanParams(a_log=dA * A, d_skip=d_skip, b_proj=b_proj, c_proj=c_proj,
                       dt_down=dt_down, dt_up=dt_up, dt_bias=dt_bias)
    dtype = xb.dtype
    grads = grads.astype(dtype)
    dx = dx.astype(dtype, copy=False)
    return (dx[0] if squeeze else dx), grads


class RecurrentScan:
    """Token-at-a-time scan. Memory held between steps is one ``(D, N)`` state."""

    def __init__(self, params: ScanParams):
        self.params = params
        self._A = params.A.astype(np.float64)
        self.reset()

    def reset(self):
        D, N = self.params.a_log.shape
        self.h = np.zeros((D, N))
        self.steps = 0

    def step(self, x_t) -> np.ndarray:
        p = self.params
        x_t = np.asarray(x_t, dtype=np.float64)
        dt = np.logaddexp(0.0, (x_t @ p.dt_down) @ p.dt_up + p.dt_bias)[:, None]
        da = dt * self._A
        small = np.abs(da) < ZOH_EPS
        f = np.where(small, dt, np.expm1(da) / np.where(small, 1.0, self._A))
        self.h *= np.exp(da)
        self.h += f * (x_t @ p.b_proj)[None, :] * x_t[:, None]
        y = self.h @ (x_t @ p.c_proj) + p.d_skip * x_t
        if not np.all(np.isfinite(y)):
            raise NumericError(f"selective scan overflowed at step {self.steps}", step=self.steps)
        self.steps += 1
        return y
