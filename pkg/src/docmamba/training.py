"""Adam with warmup/decay, the MLM and tagging loops, and the gradient checker."""
from __future__ import annotations

import contextlib
import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from docmamba.datapipe import (
    Document, MaskingPolicy, TagSet, TokenizedSequence, apply_mlm_mask, bucket_batches,
    chunk_sequence, tokenize_document, word_predictions,
)
from docmamba.doc_model import DocMamba, ModelConfig, entity_f1, parameter_family, save_checkpoint
from docmamba.doc_model.tokenizer import ByteTokenizer
from docmamba.errors import ContractError, NumericError

log = logging.getLogger(__name__)


@contextlib.contextmanager
def single_threaded():
    """Pin BLAS/OpenMP pools to one thread so reductions run in a fixed order."""
    with threadpool_limits(limits=1):
        yield


# -- configuration -------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    total_steps: int = 1000
    warmup_fraction: float = 0.1
    schedule: str = "linear"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip_norm: float | None = 1.0
    seed: int = 0
    batch_tokens: int = 2048
    bucket_width: int = 64
    max_length: int = 2048
    order: str = "sfbs"
    p_mask: float = 0.15
    checkpoint_every: int = 500
    freeze_backbone: bool = False
    head_init: str = "keep"
    eval_every: int = 100
    target_f1: float | None = None
    max_rejected: int = 20

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.lr < 0 or self.total_steps < 0:
            raise ContractError("lr and total_steps must be non-negative")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ContractError(f"warmup_fraction must lie in [0, 1], got {self.warmup_fraction}")
        if self.schedule not in ("linear", "constant"):
            raise ContractError(f"schedule must be 'linear' or 'constant', got {self.schedule!r}")
        if self.head_init not in ("keep", "zero"):
            raise ContractError(f"head_init must be 'keep' or 'zero', got {self.head_init!r}")
        if self.batch_tokens < self.bucket_width:
            raise ContractError("batch_tokens must be at least bucket_width")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["adam_betas"] = list(self.adam_betas)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def lr_multiplier(step: int, total_steps: int, warmup_fraction: float = 0.1,
                  schedule: str = "linear") -> float:
    """Piecewise-linear: 0 -> 1 over the warmup, then 1 -> 0 at ``total_steps``."""
    if schedule == "constant":
        return 1.0
    warm = warmup_fraction * total_steps
    if step < warm:
        return step / warm
    if total_steps <= warm:
        return 1.0
    return max(0.0, (total_steps - step) / (total_steps - warm))


# -- optimizer -------------------------------------------------------------------

def decays(name: str) -> bool:
    """Weight decay applies to matrices and tables, not norms, biases or SSM vectors."""
    return not name.endswith("bias") and parameter_family(name) not in ("norms", "a_log", "ssm_vectors")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: int = 0
    rejected: int = 0


def clip_by_global_norm(grads: dict, max_norm: float | None) -> float:
    """Scale ``grads`` in place; returns the norm before clipping."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for _, g in sorted(grads.items())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig, step: int) -> bool:
    """One Adam update with bias correction and decoupled weight decay.

    Parameters without a gradient entry are left alone. Non-finite gradients
    reject the whole step (returns False and counts it).
    """
    if step < 1:
        raise ContractError(f"step must be >= 1, got {step}")
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ContractError(f"gradient {name!r} does not match a parameter")
    if not all(np.isfinite(g).all() for g in grads.values()):
        state.rejected += 1
        log.warning("step %d rejected: non-finite gradient", step)
        return False
    grads = {k: g.copy() for k, g in grads.items()}
    clip_by_global_norm(grads, config.grad_clip_norm)
    b1, b2 = config.adam_betas
    lr = config.lr * lr_multiplier(step, config.total_steps, config.warmup_fraction, config.schedule)
    state.steps += 1
    t = state.steps
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name in sorted(grads):
        p, g = params[name], grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr == 0.0:
            continue
        if config.weight_decay and decays(name):
            p -= (lr * config.weight_decay) * p
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)).astype(p.dtype)
    return True


# -- data helpers ----------------------------------------------------------------

def _as_sequences(corpus, order: str, max_length: int, tokenizer=None, tagset=None):
    seqs = []
    for item in corpus:
        seq = item if isinstance(item, TokenizedSequence) else tokenize_document(
            item, tokenizer, tagset, order=order)
        seqs.extend(chunk_sequence(seq, max_length))
    return seqs


class TrainingAborted(RuntimeError):
    """Training stopped on a numeric failure; ``last_checkpoint`` is the last good file."""

    def __init__(self, message, last_checkpoint=None, step=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.step = step


@dataclass
class TrainResult:
    model: DocMamba
    losses: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    rejected: int = 0
    f1_curve: list = field(default_factory=list)
    skipped: int = 0

    @property
    def steps(self) -> int:
        return len(self.losses)


class _Run:
    """Bookkeeping shared by both loops: metrics file, checkpoints, abort handling."""

    def __init__(self, model, config, out_dir, metrics_path, kind):
        self.model, self.config, self.kind = model, config, kind
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if metrics_path is None and self.out_dir is not None:
            metrics_path = self.out_dir / f"{kind}_metrics.jsonl"
        self.metrics = None
        if metrics_path is not None:
            Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
            self.metrics = open(metrics_path, "w", encoding="utf-8")
        self.start = time.perf_counter()
        self.state = AdamState()
        self.result = TrainResult(model)
        self.last_good = None

    def record(self, step, loss, **extra):
        lr = self.config.lr * lr_multiplier(step, self.config.total_steps,
                                            self.config.warmup_fraction, self.config.schedule)
        self.result.losses.append(loss)
        if self.metrics is not None:
            rec = {"step": step, "loss": loss, "lr": lr,
                   "wall_time": round(time.perf_counter() - self.start, 6), **extra}
            self.metrics.write(json.dumps(rec) + "\n")
            self.metrics.flush()

    def checkpoint(self, step, final=False):
        if self.out_dir is None:
            return
        name = f"{self.kind}_final.ckpt" if final else f"{self.kind}_step{step:06d}.ckpt"
        meta = {"kind": self.kind, "step": step, "train_config": self.config.to_dict()}
        path = save_checkpoint(self.out_dir / name, self.model, meta)
        self.result.checkpoints.append(str(path))
        self.last_good = str(path)

    def update(self, step, grads):
        if not adam_step(self.model.params, grads, self.state, self.config, step):
            self.result.rejected = self.state.rejected
            if self.state.rejected > self.config.max_rejected:
                raise TrainingAborted(f"{self.state.rejected} steps rejected for non-finite gradients",
                                      self.last_good, step)

    def abort(self, exc, step):
        raise TrainingAborted(f"step {step}: {exc}", self.last_good, step) from exc

    def close(self):
        if self.metrics is not None:
            self.metrics.close()
        self.result.rejected = self.state.rejected


def _batch_stream(seqs, config, counter, salt, width=None):
    width = config.bucket_width if width is None else width
    epoch = 0
    while True:
        seed = int(np.random.default_rng([config.seed, salt, epoch]).integers(2 ** 31))
        empty = True
        for batch in bucket_batches(seqs, config.batch_tokens, width, seed,
                                    config.max_length, counter):
            empty = False
            yield batch
        if empty:
            raise ContractError("no usable sequences (all shorter than 2 tokens)")
        epoch += 1


# -- MLM pre-training --------------------------------------------------------------

def train_mlm(corpus, model_config: ModelConfig | None = None, config: TrainConfig | None = None,
              model: DocMamba | None = None, out_dir=None, metrics_path=None,
              backend=None) -> TrainResult:
    """Masked-token pre-training over bucketed, scan-ordered batches."""
    config = config or TrainConfig()
    corpus = list(corpus)
    if not corpus:
        raise ContractError("corpus is empty")
    model = model or DocMamba.init(model_config or ModelConfig.tiny(), config.seed)
    tok = ByteTokenizer()
    seqs = _as_sequences(corpus, config.order, config.max_length, tok)
    policy = MaskingPolicy(p_mask=config.p_mask)
    mask_rng = np.random.default_rng([config.seed, 1])
    counter = Counter()
    run = _Run(model, config, out_dir, metrics_path, "mlm")
    try:
        with single_threaded():
            stream = _batch_stream(seqs, config, counter, 0)
            for step in range(1, config.total_steps + 1):
                batch = next(stream)
                masked, labels = apply_mlm_mask(batch.token_ids, policy, mask_rng, tok.specials,
                                                model.config.vocab_size, tok.first_regular_id)
                try:
                    loss, count, grads = model.mlm_loss_and_grads(masked, batch.polys, labels, backend)
                except NumericError as exc:
                    run.abort(exc, step)
                run.update(step, grads)
                run.record(step, float(loss), masked=count, batch=list(batch.shape))
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    run.checkpoint(step)
            run.checkpoint(config.total_steps, final=True)
    finally:
        run.close()
    run.result.skipped = counter["skipped"]
    return run.result


def mlm_eval_loss(model: DocMamba, seqs, seed: int = 0, p_mask: float = 0.15, backend=None) -> float:
    """Mean masked-token loss over ``seqs`` (one sequence at a time, fixed masks)."""
    rng = np.random.default_rng(seed)
    tok = ByteTokenizer()
    total, count = 0.0, 0
    with single_threaded():
        for seq in seqs:
            masked, labels = apply_mlm_mask(seq.token_ids, MaskingPolicy(p_mask=p_mask), rng,
                                            tok.specials, model.config.vocab_size, tok.first_regular_id)
            loss, n = model.mlm_loss(masked, seq.polys, labels, backend)
            total += loss * n
            count += n
    return total / count if count else float("nan")


# -- BIO fine-tuning ---------------------------------------------------------------

def evaluate_tagging(model: DocMamba, seqs, tagset: TagSet, backend=None) -> dict:
    """Word-level entity precision/recall/F1 (first sub-token decides a word's tag)."""
    preds, golds = [], []
    with single_threaded():
        for seq in seqs:
            tags = model.predict_tags(seq.token_ids, seq.polys, backend)
            preds.append(word_predictions(seq, tags, tagset))
            golds.append(list(seq.word_tags))
    p, r, f1 = entity_f1(preds, golds)
    return {"precision": p, "recall": r, "f1": f1}


def finetune_tagging(docs, model: DocMamba, config: TrainConfig | None = None, eval_docs=None,
                     tagset: TagSet | None = None, out_dir=None, metrics_path=None,
                     backend=None) -> TrainResult:
    """Train the tag head (and the backbone unless frozen) on BIO-tagged documents.

    Entity F1 is evaluated every ``eval_every`` steps on the training set and,
    when given, on ``eval_docs``; ``target_f1`` stops early once the eval split
    (or the training set, without one) reaches it.
    """
    config = config or TrainConfig()
    docs = list(docs)
    if not docs:
        raise ContractError("no training documents")
    for d in docs:
        if isinstance(d, Document) and not d.has_tags:
            raise ContractError(f"document {d.doc_id} has no BIO tags")
    tagset = tagset or TagSet()
    if tagset.num_tags != model.config.num_tags:
        raise ContractError(f"tag set has {tagset.num_tags} labels, model head has {model.config.num_tags}")
    train_ids = {d.doc_id for d in docs}
    if eval_docs is not None:
        overlap = train_ids & {d.doc_id for d in eval_docs}
        if overlap:
            raise ContractError(f"train and eval splits share documents: {sorted(overlap)[:5]}")
    if config.head_init == "zero":
        model.params["tag_head.weight"][...] = 0
        model.params["tag_head.bias"][...] = 0
    tok = ByteTokenizer()
    # exact-length grouping (width 1): truncating to a bucket floor would drop labelled words
    max_len = min(config.max_length, config.batch_tokens)
    train_seqs = _as_sequences(docs, config.order, max_len, tok, tagset)
    eval_seqs = _as_sequences(eval_docs, config.order, config.max_length, tok, tagset) if eval_docs else None
    drop_rng = np.random.default_rng([config.seed, 2])
    counter = Counter()
    run = _Run(model, config, out_dir, metrics_path, "tag")

    def evaluate(step):
        point = {"step": step, "train_f1": evaluate_tagging(model, train_seqs, tagset, backend)["f1"]}
        if eval_seqs:
            point["eval_f1"] = evaluate_tagging(model, eval_seqs, tagset, backend)["f1"]
        run.result.f1_curve.append(point)
        return point.get("eval_f1", point["train_f1"])

    try:
        with single_threaded():
            f1 = evaluate(0)
            stream = _batch_stream(train_seqs, config, counter, 3, width=1)
            for step in range(1, config.total_steps + 1):
                if config.target_f1 is not None and f1 >= config.target_f1:
                    break
                batch = next(stream)
                try:
                    loss, count, grads = model.tag_loss_and_grads(
                        batch.token_ids, batch.polys, batch.bio_labels, drop_rng, True,
                        config.freeze_backbone, backend)
                except NumericError as exc:
                    run.abort(exc, step)
                run.update(step, grads)
                run.record(step, float(loss), tagged=count, batch=list(batch.shape))
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    run.checkpoint(step)
                if config.eval_every and step % config.eval_every == 0:
                    f1 = evaluate(step)
            if not run.result.f1_curve or run.result.f1_curve[-1]["step"] != len(run.result.losses):
                evaluate(len(run.result.losses))
            run.checkpoint(len(run.result.losses), final=True)
    finally:
        run.close()
    run.result.skipped = counter["skipped"]
    return run.result


# -- gradient check ------------------------------------------------------------------

GRADCHECK_CONFIG = ModelConfig.tiny(hidden=16, d_inner=32, n_state=4, vocab_size=37, dtype="float64")
FAMILIES = ("tables", "heads", "norms", "conv", "a_log", "ssm_vectors", "projections")


def _rel_err(a: float, n: float, atol: float = 1e-8) -> float:
    diff = abs(a - n)
    if diff <= atol:
        return 0.0
    return diff / max(abs(a), abs(n))


def gradcheck(config: ModelConfig | None = None, seed: int = 11, n_samples: int = 240,
              batch: int = 2, length: int = 12, step: float = 1e-5, backend=None) -> dict:
    """Analytic MLM gradients against central differences on sampled parameters.

    Runs in double precision. Samples are spread evenly over every parameter
    family the MLM loss touches; embedding rows are drawn from rows the
    inputs actually use. A per-entry absolute gap below 1e-8 counts as exact:
    that is about a hundred times the rounding noise of the difference quotient,
    which otherwise dominates on near-zero gradients. ``n_informative`` counts
    samples whose gradient exceeds 1e-6; ``max_rel_err_informative`` is the
    unfloored relative error over those samples alone.
    """
    config = ModelConfig.from_dict({**(config or GRADCHECK_CONFIG).to_dict(), "dtype": "float64"})
    rng = np.random.default_rng(seed)
    model = DocMamba.init(config, seed)
    # move norms and biases off their trivial initial values
    for name, p in model.params.items():
        if parameter_family(name) in ("norms",) or name.endswith("bias"):
            p += rng.normal(0, 0.1, p.shape)
    ids = rng.integers(4, config.vocab_size, (batch, length))
    ids[:, 0] = 1
    polys = rng.integers(0, config.coord_bins, (batch, length, 8))
    polys[:, 0] = 0
    labels = np.where(rng.random((batch, length)) < 0.4, rng.integers(4, config.vocab_size, (batch, length)), -100)
    labels[:, 0] = -100
    labels[0, 1] = ids[0, 1]

    with single_threaded():
        _, _, grads = model.mlm_loss_and_grads(ids, polys, labels, backend)

        used_rows = {"embed.tokens": np.unique(np.concatenate([ids.ravel(), labels[labels >= 0]])),
                     "embed.coord_values": np.unique(polys)}
        by_family: dict[str, list[str]] = {}
        for name in sorted(grads):
            by_family.setdefault(parameter_family(name), []).append(name)
        per_family = max(1, -(-n_samples // len(by_family)))
        picks = []
        for fam in sorted(by_family):
            names = by_family[fam]
            sizes = np.array([model.params[n].size for n in names], dtype=float)
            for _ in range(per_family):
                name = names[rng.choice(len(names), p=sizes / sizes.sum())]
                shape = model.params[name].shape
                if name in used_rows:
                    row = int(rng.choice(used_rows[name]))
                    idx = (row, int(rng.integers(shape[1])))
                else:
                    idx = tuple(int(rng.integers(s)) for s in shape)
                picks.append((fam, name, idx))

        families = {}
        worst = (-1.0, None, None)
        max_abs, informative, raw_worst = 0.0, 0, 0.0
        for fam, name, idx in picks:
            p = model.params[name]
            orig = p[idx]
            p[idx] = orig + step
            up, _ = model.mlm_loss(ids, polys, labels, backend)
            p[idx] = orig - step
            down, _ = model.mlm_loss(ids, polys, labels, backend)
            p[idx] = orig
            numeric = (up - down) / (2 * step)
            analytic = float(grads[name][idx])
            err = _rel_err(analytic, numeric)
            max_abs = max(max_abs, abs(analytic - numeric))
            scale = max(abs(analytic), abs(numeric))
            if scale > 1e-6:
                informative += 1
                raw_worst = max(raw_worst, abs(analytic - numeric) / scale)
            f = families.setdefault(fam, {"n": 0, "max_rel_err": 0.0})
            f["n"] += 1
            f["max_rel_err"] = max(f["max_rel_err"], err)
            if err > worst[0]:
                worst = (err, name, list(idx))
    return {
        "max_rel_err": worst[0],
        "worst_param": worst[1],
        "worst_index": worst[2],
        "n_checked": len(picks),
        "n_informative": int(informative),
        "max_abs_err": max_abs,
        "max_rel_err_informative": raw_worst,
        "families": families,
        "num_parameters": model.num_parameters(),
        "seed": seed,
        "step": step,
    }
