"""Bidirectional Mamba encoder block.

    norm -> in_proj -> (X, Z)
    forward:  X  -> causal conv -> SiLU -> selective scan            -> Y_f
    backward: X[::-1] -> causal conv -> SiLU -> selective scan -> [::-1] -> Y_b
    out = out_proj((Y_f + Y_b) * SiLU(Z)) + S_prev

The two directions own separate conv kernels and scan parameters. All arrays
are ``(batch, L, features)``; ``(L, features)`` inputs are accepted too.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from docmamba.errors import ContractError
from docmamba.ssm_core import (
    RecurrentScan,
    ScanParams,
    SsmDims,
    selective_scan_backward,
    selective_scan_forward,
    sigmoid,
    xavier_uniform,
)

NORM_EPS = 1e-5


@dataclass
class BlockParams:
    norm_weight: np.ndarray
    in_proj: np.ndarray
    conv_fwd: np.ndarray
    conv_bwd: np.ndarray
    scan_fwd: ScanParams
    scan_bwd: ScanParams
    out_proj: np.ndarray

    @classmethod
    def init(cls, hidden: int, rng: np.random.Generator, d_inner: int | None = None,
             n_state: int = 16, conv_width: int = 4, dt_rank: int | None = None,
             dtype=np.float32) -> "BlockParams":
        d_inner = d_inner or 2 * hidden
        dims = SsmDims(d_inner, n_state, dt_rank)
        conv_limit = 1.0 / np.sqrt(conv_width)
        return cls(
            norm_weight=np.ones(hidden, dtype=dtype),
            in_proj=xavier_uniform(rng, (hidden, 2 * d_inner), dtype),
            conv_fwd=rng.uniform(-conv_limit, conv_limit, (d_inner, conv_width)).astype(dtype),
            conv_bwd=rng.uniform(-conv_limit, conv_limit, (d_inner, conv_width)).astype(dtype),
            scan_fwd=ScanParams.init(dims, rng, dtype),
            scan_bwd=ScanParams.init(dims, rng, dtype),
            out_proj=xavier_uniform(rng, (d_inner, hidden), dtype),
        )

    @property
    def d_inner(self) -> int:
        return self.out_proj.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` view; scan parameters get a ``scan_fwd.``/``scan_bwd.`` prefix."""
        out = {
            "norm_weight": self.norm_weight,
            "in_proj": self.in_proj,
            "conv_fwd": self.conv_fwd,
            "conv_bwd": self.conv_bwd,
            "out_proj": self.out_proj,
        }
        for direction in ("scan_fwd", "scan_bwd"):
            for name, value in getattr(self, direction).arrays().items():
                out[f"{direction}.{name}"] = value
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "BlockParams":
        scans = {}
        for direction in ("scan_fwd", "scan_bwd"):
            prefix = direction + "."
            scans[direction] = ScanParams(**{k[len(prefix):]: v for k, v in arrays.items()
                                             if k.startswith(prefix)})
        return cls(norm_weight=arrays["norm_weight"], in_proj=arrays["in_proj"],
                   conv_fwd=arrays["conv_fwd"], conv_bwd=arrays["conv_bwd"],
                   out_proj=arrays["out_proj"], **scans)

    def swapped(self) -> "BlockParams":
        """Same block with forward and backward direction parameters exchanged."""
        return BlockParams(self.norm_weight, self.in_proj, self.conv_bwd, self.conv_fwd,
                           self.scan_bwd, self.scan_fwd, self.out_proj)


# -- elementwise pieces --------------------------------------------------------

def silu(x):
    return x * sigmoid(x)


def silu_backward(x, dout):
    s = sigmoid(x)
    return dout * s * (1 + x * (1 - s))


def rms_normalize(s, weight, eps=NORM_EPS):
    r = 1.0 / np.sqrt(np.mean(s * s, axis=-1, keepdims=True) + eps)
    return weight * s * r


def rms_normalize_backward(dout, s, weight, eps=NORM_EPS):
    r = 1.0 / np.sqrt(np.mean(s * s, axis=-1, keepdims=True) + eps)
    g = dout * weight
    ds = r * g - s * r**3 * np.mean(g * s, axis=-1, keepdims=True)
    dweight = np.sum((dout * s * r).reshape(-1, s.shape[-1]), axis=0)
    return ds, dweight


def layer_normalize(s, weight, eps=NORM_EPS):
    mu = np.mean(s, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(np.var(s, axis=-1, keepdims=True) + eps)
    return weight * (s - mu) * r


def layer_normalize_backward(dout, s, weight, eps=NORM_EPS):
    mu = np.mean(s, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(np.var(s, axis=-1, keepdims=True) + eps)
    xhat = (s - mu) * r
    g = dout * weight
    ds = r * (g - np.mean(g, axis=-1, keepdims=True)
              - xhat * np.mean(g * xhat, axis=-1, keepdims=True))
    dweight = np.sum((dout * xhat).reshape(-1, s.shape[-1]), axis=0)
    return ds, dweight


NORMS = {
    "rms": (rms_normalize, rms_normalize_backward),
    "layer": (layer_normalize, layer_normalize_backward),
}


def _norm(kind):
    try:
        return NORMS[kind]
    except KeyError:
        raise ContractError(f"unknown normalization {kind!r}; expected one of {sorted(NORMS)}")


# -- depthwise causal convolution ---------------------------------------------

def causal_conv(x, kernel):
    """``out[t, c] = sum_j kernel[c, j] * x[t - w + 1 + j, c]`` with zero left padding."""
    x = np.asarray(x)
    w = kernel.shape[1]
    if w < 1:
        raise ContractError("kernel width must be >= 1")
    L = x.shape[-2]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (w - 1, 0)
    xp = np.pad(x, pad)
    out = np.zeros_like(x)
    for j in range(w):
        out += kernel[:, j] * xp[..., j:j + L, :]
    return out


def causal_conv_backward(x, kernel, dout):
    w = kernel.shape[1]
    L = x.shape[-2]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (w - 1, 0)
    xp = np.pad(x, pad)
    dxp = np.zeros_like(xp)
    dkernel = np.zeros_like(kernel)
    flat_dout = dout.reshape(-1, L, dout.shape[-1])
    flat_xp = xp.reshape(-1, L + w - 1, x.shape[-1])
    for j in range(w):
        dxp[..., j:j + L, :] += kernel[:, j] * dout
        dkernel[:, j] = np.einsum("btc,btc->c", flat_dout, flat_xp[:, j:j + L])
    return dxp[..., w - 1:, :], dkernel


# -- the block -----------------------------------------------------------------

@dataclass
class BlockCache:
    S_prev: np.ndarray
    normed: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    conv_f: np.ndarray
    X_f: np.ndarray
    conv_b: np.ndarray
    X_b: np.ndarray
    scan_f: Any
    scan_b: Any
    Y_f: np.ndarray
    Y_b: np.ndarray
    gate: np.ndarray
    mixed: np.ndarray
    norm: str


def bimamba_block_forward(S_prev, params: BlockParams, norm="rms", backend=None):
    S = np.asarray(S_prev)
    squeeze = S.ndim == 2
    if squeeze:
        S = S[None]
    if S.ndim != 3 or S.shape[1] < 1:
        raise ContractError(f"expected (batch, L, hidden) with L >= 1, got {np.shape(S_prev)}")
    norm_fn, _ = _norm(norm)
    D = params.d_inner
    normed = norm_fn(S, params.norm_weight)
    xz = normed @ params.in_proj
    X, Z = xz[..., :D], xz[..., D:]

    conv_f = causal_conv(X, params.conv_fwd)
    X_f = silu(conv_f)
    Y_f, scan_f = selective_scan_forward(X_f, params.scan_fwd, backend=backend)

    conv_b = causal_conv(X[:, ::-1], params.conv_bwd)
    X_b = silu(conv_b)
    Y_b_rev, scan_b = selective_scan_forward(X_b, params.scan_bwd, backend=backend)
    Y_b = Y_b_rev[:, ::-1]

    gate = silu(Z)
    mixed = (Y_f + Y_b) * gate
    out = mixed @ params.out_proj + S
    cache = BlockCache(S, normed, X, Z, conv_f, X_f, conv_b, X_b, scan_f, scan_b,
                       Y_f, Y_b, gate, mixed, norm)
    return (out[0] if squeeze else out), cache


def bimamba_block(S_prev, params: BlockParams, norm="rms", backend=None):
    """One residual block; output has the shape of ``S_prev``."""
    return bimamba_block_forward(S_prev, params, norm=norm, backend=backend)[0]


def bimamba_block_backward(dout, cache: BlockCache, params: BlockParams, backend=None):
    """Return ``(dS_prev, grads)`` with ``grads`` shaped like ``params``."""
    squeeze = np.ndim(dout) == 2
    if squeeze:
        dout = dout[None]
    _, norm_bwd = _norm(cache.norm)
    H = cache.S_prev.shape[-1]

    d_out_proj = cache.mixed.reshape(-1, params.d_inner).T @ dout.reshape(-1, H)
    dmixed = dout @ params.out_proj.T
    dY = dmixed * cache.gate
    dZ = silu_backward(cache.Z, dmixed * (cache.Y_f + cache.Y_b))

    dX_f, g_scan_f = selective_scan_backward(cache.X_f, params.scan_fwd, dY, cache.scan_f,
                                             backend=backend)
    dX, d_conv_f = causal_conv_backward(cache.X, params.conv_fwd,
                                        silu_backward(cache.conv_f, dX_f))

    dX_b, g_scan_b = selective_scan_backward(cache.X_b, params.scan_bwd,
                                             np.ascontiguousarray(dY[:, ::-1]), cache.scan_b,
                                             backend=backend)
    dX_rev, d_conv_b = causal_conv_backward(cache.X[:, ::-1], params.conv_bwd,
                                            silu_backward(cache.conv_b, dX_b))
    dX = dX + dX_rev[:, ::-1]

    dxz = np.concatenate([dX, dZ], axis=-1)
    d_in_proj = cache.normed.reshape(-1, H).T @ dxz.reshape(-1, dxz.shape[-1])
    dnormed = dxz @ params.in_proj.T
    dS, d_norm = norm_bwd(dnormed, cache.S_prev, params.norm_weight)
    dS = dS + dout

    grads = BlockParams(norm_weight=d_norm, in_proj=d_in_proj, conv_fwd=d_conv_f,
                        conv_bwd=d_conv_b, scan_fwd=g_scan_f, scan_bwd=g_scan_b,
                        out_proj=d_out_proj)
    return (dS[0] if squeeze else dS), grads


class StreamingForwardBranch:
    """Causal half of a block evaluated one token at a time.

    Holds the last ``w - 1`` conv inputs and one scan state; nothing grows with
    the number of tokens seen.
    """

    def __init__(self, params: BlockParams, norm="rms"):
        self.params = params
        self.norm_fn, _ = _norm(norm)
        self.scan = RecurrentScan(params.scan_fwd)
        self.window = np.zeros((params.conv_fwd.shape[1], params.d_inner))

    def step(self, s_t) -> np.ndarray:
        p = self.params
        x = (self.norm_fn(np.asarray(s_t, dtype=np.float64), p.norm_weight) @ p.in_proj)[:p.d_inner]
        self.window[:-1] = self.window[1:]
        self.window[-1] = x
        conv = np.einsum("cj,jc->c", p.conv_fwd, self.window)
        return self.scan.step(silu(conv))
