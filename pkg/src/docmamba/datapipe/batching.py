"""Length-bucketed batches under a fixed token budget ``k``.

A sequence of length ``n`` goes to bucket ``n // width`` and is truncated to
the bucket's lower bound ``L = width * (n // width)``; a batch holds
``k // L`` sequences, so ``B * L <= k`` always. Sequences shorter than one
bucket width (bucket 0 has no positive lower bound) are grouped by exact
length instead. Nothing is padded.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from docmamba.datapipe.encoding import MAX_LENGTH, TokenizedSequence

log = logging.getLogger(__name__)


@dataclass
class Batch:
    token_ids: np.ndarray        # B x L
    polys: np.ndarray            # B x L x 8
    word_ids: np.ndarray         # B x L
    bio_labels: np.ndarray       # B x L
    doc_ids: tuple[str, ...]
    source: tuple[TokenizedSequence, ...]
    mlm_labels: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape


def bucket_length(n: int, width: int = 64) -> int:
    """Target length for a sequence of ``n`` tokens (before the max-length cap)."""
    return n if n < width else width * (n // width)


def max_bucket_length(k: int, width: int = 64, max_length: int = MAX_LENGTH) -> int:
    return width * (min(k, max_length) // width)


def _stack(seqs, L):
    return Batch(
        np.stack([s.token_ids[:L] for s in seqs]),
        np.stack([s.polys[:L] for s in seqs]),
        np.stack([s.word_ids[:L] for s in seqs]),
        np.stack([s.tags[:L] for s in seqs]),
        tuple(s.doc_id for s in seqs),
        tuple(seqs),
    )


def bucket_batches(seqs, k: int, bucket_width: int = 64, shuffle_seed: int | None = None,
                   max_length: int = MAX_LENGTH, counter: Counter | None = None):
    """Yield batches; skipped sequences (fewer than 2 tokens) are counted under ``"skipped"``.

    Without a seed, buckets come shortest first and keep input order. With a
    seed, members are shuffled inside each bucket and the batch order is
    shuffled as well; the stream is a pure function of the inputs and seed.
    """
    if bucket_width < 1 or k < bucket_width:
        raise ValueError(f"need k >= bucket_width >= 1, got k={k}, width={bucket_width}")
    cap = max_bucket_length(k, bucket_width, max_length)
    if cap < 1:
        raise ValueError(f"max_length {max_length} is below one bucket width")
    counter = counter if counter is not None else Counter()
    buckets: dict[int, list[TokenizedSequence]] = {}
    for seq in seqs:
        n = len(seq)
        if n < 2:
            counter["skipped"] += 1
            log.warning("skipping %s: only %d token(s)", seq.doc_id, n)
            continue
        buckets.setdefault(min(bucket_length(n, bucket_width), cap), []).append(seq)

    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    plan = []
    for L in sorted(buckets):
        members = buckets[L]
        if rng is not None:
            members = [members[i] for i in rng.permutation(len(members))]
        b = k // L
        plan.extend((L, members[i:i + b]) for i in range(0, len(members), b))
    if rng is not None:
        plan = [plan[i] for i in rng.permutation(len(plan))]
    for L, members in plan:
        counter["batches"] += 1
        counter["sequences"] += len(members)
        yield _stack(members, L)
