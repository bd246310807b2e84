"""Time and memory scaling of the encoder against a softmax-attention baseline.

Peak memory is measured with ``tracemalloc``, which sees NumPy buffers; the
model parameters exist before measurement starts, so a sample counts only
what a forward pass allocates.
"""
from __future__ import annotations

import contextlib
import gc
import json
import math
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from docmamba import kernels
from docmamba.doc_model import DocMamba, ModelConfig
from docmamba.doc_model.embeddings import embed_tokens
from docmamba.errors import ContractError, DomainError
from docmamba.mamba_block import NORMS, StreamingForwardBranch, silu
from docmamba.ssm_core import xavier_uniform


def fit_power_law(points) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    points = list(points)
    if len(points) < 2:
        raise ContractError("need at least two points")
    xs, ys = np.array(points, dtype=float).T
    if (xs <= 0).any() or (ys <= 0).any():
        raise DomainError("power-law fit needs positive values")
    if np.ptp(xs) == 0:
        raise ContractError("x values must not all be equal")
    slope, _ = np.polyfit(np.log(xs), np.log(ys), 1)
    return float(slope)


# -- attention baseline ------------------------------------------------------------

@dataclass
class AttentionLayer:
    norm1: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    norm2: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    heads: int

    @classmethod
    def init(cls, hidden, heads, rng, dtype=np.float32, ffn_mult=4):
        if hidden % heads:
            raise ContractError(f"hidden={hidden} is not divisible by heads={heads}")
        x = lambda shape: xavier_uniform(rng, shape, dtype)
        return cls(np.ones(hidden, dtype), x((hidden, hidden)), x((hidden, hidden)), x((hidden, hidden)),
                   x((hidden, hidden)), np.ones(hidden, dtype), x((hidden, ffn_mult * hidden)),
                   x((ffn_mult * hidden, hidden)), heads)


def self_attention(X, layer: AttentionLayer):
    """Multi-head softmax attention; returns ``(output, weights)``.

    ``X`` is ``(L, H)`` or ``(B, L, H)``; weights are ``(B, heads, L, L)``.
    """
    X = np.asarray(X)
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    B, L, H = X.shape
    h, dh = layer.heads, H // layer.heads
    split = lambda M: (X @ M).reshape(B, L, h, dh).transpose(0, 2, 1, 3)
    q, k, v = split(layer.wq), split(layer.wk), split(layer.wv)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    ctx = (scores @ v).transpose(0, 2, 1, 3).reshape(B, L, H)
    out = ctx @ layer.wo
    return (out[0], scores[0]) if squeeze else (out, scores)


def attention_baseline_forward(S, layer: AttentionLayer, norm="rms"):
    """Pre-norm transformer layer: attention, then a ReLU feed-forward."""
    norm_fn, _ = NORMS[norm]
    attn, _ = self_attention(norm_fn(S, layer.norm1), layer)
    S = S + attn
    return S + np.maximum(norm_fn(S, layer.norm2) @ layer.w1, 0) @ layer.w2


class AttentionBaseline:
    """Same embedding front-end as the encoder, attention layers instead of blocks."""

    def __init__(self, config: ModelConfig, heads: int = 4, seed: int = 0, embed_from: DocMamba | None = None):
        rng = np.random.default_rng(seed)
        self.config = config
        src = embed_from or DocMamba.init(ModelConfig.from_dict({**config.to_dict(), "layers": 0}), seed)
        self.tables = {k: src.params[k] for k in ("embed.tokens", "embed.coord_values", "embed.coord_types")}
        self.layers = [AttentionLayer.init(config.hidden, heads, rng, config.np_dtype)
                       for _ in range(config.layers)]

    def encode(self, token_ids, polys):
        S = embed_tokens(token_ids, polys, self.tables["embed.tokens"], self.tables["embed.coord_values"],
                         self.tables["embed.coord_types"]).astype(self.config.np_dtype, copy=False)
        for layer in self.layers:
            S = attention_baseline_forward(S, layer, self.config.norm)
        return S


# -- streaming (causal, token-at-a-time) inference ------------------------------------

class StreamingEncoder:
    """Causal half of every layer, one token at a time; state size is independent of L.

    Only the forward scan direction can run incrementally: the reverse scan
    needs the whole sequence. Each layer applies the same gate, projection and
    residual as the full block, with the reverse branch absent.
    """

    def __init__(self, model: DocMamba):
        self.model = model
        self.branches = [StreamingForwardBranch(b, model.config.norm) for b in model.blocks]
        self.norm_fn, _ = NORMS[model.config.norm]

    def step(self, token_id, poly) -> np.ndarray:
        p = self.model.params
        s = embed_tokens(np.array([token_id]), np.asarray(poly)[None], p["embed.tokens"],
                         p["embed.coord_values"], p["embed.coord_types"])[0].astype(np.float64)
        for block, branch in zip(self.model.blocks, self.branches):
            y = branch.step(s)
            z = (self.norm_fn(s, block.norm_weight) @ block.in_proj)[block.d_inner:]
            s = (y * silu(z)) @ block.out_proj + s
        return self.norm_fn(s, p["final_norm"])


def _token_stream(length, vocab, seed):
    # arrays, not tuples: CPython keeps up to 2000 freed tuples per size on a
    # free list, which tracemalloc reports as live memory growing with length
    rng = np.random.default_rng(seed)
    yield 1, np.zeros(8, dtype=np.int64)
    for _ in range(length - 1):
        yield int(rng.integers(4, vocab)), rng.integers(0, 1001, 8)


def streaming_peak_bytes(model: DocMamba, length: int, seed: int = 0, warmup: int = 1024) -> int:
    """Peak traced allocation while streaming ``length`` tokens (inputs generated lazily).

    A traced warm-up of ``warmup`` tokens first fills interpreter and NumPy
    free lists; otherwise they add a one-off few kilobytes to whichever
    measurement runs first in the process.
    """
    warm = StreamingEncoder(model)
    tracemalloc.start()
    try:
        for tok, poly in _token_stream(warmup, model.config.vocab_size, seed + 1):
            warm.step(tok, poly)
    finally:
        tracemalloc.stop()
    del warm
    enc = StreamingEncoder(model)
    gc.collect()
    tracemalloc.start()
    try:
        for tok, poly in _token_stream(length, model.config.vocab_size, seed):
            enc.step(tok, poly)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return peak


# -- scaling measurement ----------------------------------------------------------------

@dataclass
class ScalingReport:
    model_tag: str
    samples: list = field(default_factory=list)
    fitted_time_exponent: float | None = None
    fitted_mem_exponent: float | None = None
    truncated_at: int | None = None
    memory_method: str = "tracemalloc"
    threads: str = "single"
    reps: int = 1
    backend: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _random_inputs(length, config, seed, batch=1):
    rng = np.random.default_rng(seed)
    ids = rng.integers(4, config.vocab_size, (batch, length))
    ids[:, 0] = 1
    polys = rng.integers(0, config.coord_bins, (batch, length, 8))
    polys[:, 0] = 0
    return ids, polys


def make_model(model_tag: str, config: ModelConfig | None = None, seed: int = 0):
    config = config or ModelConfig.tiny()
    if model_tag == "docmamba":
        return DocMamba.init(config, seed)
    if model_tag == "attention_baseline":
        return AttentionBaseline(config, seed=seed)
    raise ContractError(f"unknown model {model_tag!r}; expected docmamba or attention_baseline")


def bench_scaling(model_tag: str, lengths, reps: int = 3, config: ModelConfig | None = None,
                  seed: int = 0, batch: int = 1, parallel: bool = False) -> ScalingReport:
    """Median forward time and traced peak memory per length.

    One warm-up pass per length is discarded. A ``MemoryError`` stops the
    sweep and is recorded as ``truncated_at``.
    """
    lengths = [int(n) for n in lengths]
    if len(lengths) < 4 or lengths != sorted(set(lengths)) or lengths[0] < 64:
        raise ContractError("need at least 4 strictly increasing lengths, each >= 64")
    if reps < 1:
        raise ContractError("reps must be >= 1")
    model = make_model(model_tag, config, seed)
    report = ScalingReport(model_tag, reps=reps, threads="parallel" if parallel else "single",
                           backend=kernels.BACKEND)
    from docmamba.training import single_threaded  # avoid an import cycle at module load
    ctx = contextlib.nullcontext() if parallel else single_threaded()
    with ctx:
        for n in lengths:
            ids, polys = _random_inputs(n, model.config, seed, batch)
            try:
                model.encode(ids, polys)  # warm-up
                times = []
                for _ in range(reps):
                    t0 = time.perf_counter()
                    model.encode(ids, polys)
                    times.append(time.perf_counter() - t0)
                gc.collect()
                tracemalloc.start()
                try:
                    model.encode(ids, polys)
                    _, peak = tracemalloc.get_traced_memory()
                finally:
                    tracemalloc.stop()
            except MemoryError:
                report.truncated_at = n
                break
            report.samples.append({"length": n, "wall_time_s": statistics.median(times), "peak_bytes": peak})
    if len(report.samples) >= 2:
        report.fitted_time_exponent = fit_power_law((s["length"], s["wall_time_s"]) for s in report.samples)
        report.fitted_mem_exponent = fit_power_law((s["length"], s["peak_bytes"]) for s in report.samples)
    return report


def compare_backends(batch=8, length=128, d_inner=64, n_state=16, reps=5, seed=0) -> dict:
    """Median scan forward/backward seconds for each available kernel backend."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, length, d_inner)).astype(np.float32)
    dt = rng.uniform(1e-3, 0.1, (batch, length, d_inner)).astype(np.float32)
    A = -np.tile(np.arange(1, n_state + 1, dtype=np.float32), (d_inner, 1))
    Bm = rng.standard_normal((batch, length, n_state)).astype(np.float32)
    Cm = rng.standard_normal((batch, length, n_state)).astype(np.float32)
    dy = rng.standard_normal((batch, length, d_inner)).astype(np.float32)
    out = {}
    backends = sorted(kernels.AVAILABLE, reverse=True)
    for name in backends:
        fwd, bwd = [], []
        kernels.scan_forward(x, dt, A, Bm, Cm, backend=name)
        for _ in range(reps):
            t0 = time.perf_counter()
            kernels.scan_forward(x, dt, A, Bm, Cm, backend=name)
            t1 = time.perf_counter()
            kernels.scan_backward(x, dt, A, Bm, Cm, dy, backend=name)
            t2 = time.perf_counter()
            fwd.append(t1 - t0)
            bwd.append(t2 - t1)
        out[name] = {"forward_s": statistics.median(fwd), "backward_s": statistics.median(bwd)}
    if "cython" in out:
        out["speedup"] = {k: out["numpy"][k] / out["cython"][k] for k in ("forward_s", "backward_s")}
    out["shape"] = {"batch": batch, "length": length, "d_inner": d_inner, "n_state": n_state}
    return out


# -- plotting -------------------------------------------------------------------------

_COLORS = ["#08306b", "#cb181d", "#238b45", "#6a51a3"]


def render_loglog_svg(reports, metric="wall_time_s", width=480, height=360) -> str:
    """Log-log line plot of ``metric`` against length, one series per report."""
    pts = [(s["length"], s[metric]) for r in reports for s in r.samples if s[metric] > 0]
    if not pts:
        raise ContractError("no samples to plot")
    lx = [math.log10(x) for x, _ in pts]
    ly = [math.log10(y) for _, y in pts]
    pad = 50
    x0, x1 = min(lx), max(lx) if max(lx) > min(lx) else min(lx) + 1
    y0, y1 = min(ly), max(ly) if max(ly) > min(ly) else min(ly) + 1
    sx = lambda v: pad + (math.log10(v) - x0) / (x1 - x0) * (width - 2 * pad)
    sy = lambda v: height - pad - (math.log10(v) - y0) / (y1 - y0) * (height - 2 * pad)
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="12">length (log)</text>',
        f'<text x="14" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 14 {height / 2:.0f})" '
        f'text-anchor="middle">{metric} (log)</text>',
    ]
    for i, r in enumerate(reports):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{sx(s['length']):.1f},{sy(s[metric]):.1f}" for s in r.samples if s[metric] > 0)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        exp = r.fitted_time_exponent if metric == "wall_time_s" else r.fitted_mem_exponent
        label = f"{r.model_tag} (slope {exp:.2f})" if exp is not None else r.model_tag
        out.append(f'<text x="{pad + 10}" y="{pad + 16 * (i + 1)}" fill="{color}" font-size="12">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_reports(reports, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in reports:
        p = out_dir / f"scaling_{r.model_tag}.json"
        p.write_text(r.to_json() + "\n")
        paths.append(p)
    for metric, name in (("wall_time_s", "scaling_time.svg"), ("peak_bytes", "scaling_memory.svg")):
        p = out_dir / name
        p.write_text(render_loglog_svg(reports, metric))
        paths.append(p)
    return paths
