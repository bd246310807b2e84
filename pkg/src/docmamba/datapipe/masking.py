"""MLM corruption of token id arrays. Layout arrays are never touched."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from docmamba.doc_model.heads import IGNORE_INDEX
from docmamba.doc_model.tokenizer import ByteTokenizer, SpecialTokens


@dataclass(frozen=True)
class MaskingPolicy:
    p_mask: float = 0.15
    p_replace_mask: float = 0.8
    p_replace_random: float = 0.1
    p_keep: float = 0.1

    def __post_init__(self):
        parts = (self.p_replace_mask, self.p_replace_random, self.p_keep)
        if not 0.0 <= self.p_mask <= 1.0 or any(p < 0 for p in parts):
            raise ValueError("probabilities must lie in [0, 1]")
        if not math.isclose(sum(parts), 1.0, abs_tol=1e-9):
            raise ValueError(f"replacement probabilities sum to {sum(parts)}, expected 1")


def apply_mlm_mask(token_ids, policy: MaskingPolicy, rng: np.random.Generator,
                   specials: SpecialTokens | None = None, vocab_size: int | None = None,
                   first_regular_id: int | None = None):
    """Return ``(masked_ids, labels)``; works on any shape.

    Special ids (including [CLS]) are never selected. Random replacements are
    drawn uniformly from ``[first_regular_id, vocab_size)``.
    """
    tok = ByteTokenizer()
    specials = specials or tok.specials
    vocab_size = tok.vocab_size if vocab_size is None else vocab_size
    first_regular_id = tok.first_regular_id if first_regular_id is None else first_regular_id

    ids = np.asarray(token_ids)
    maskable = ~np.isin(ids, specials.ids)
    selected = maskable & (rng.random(ids.shape) < policy.p_mask)
    action = rng.random(ids.shape)
    to_mask = selected & (action < policy.p_replace_mask)
    to_random = selected & ~to_mask & (action < policy.p_replace_mask + policy.p_replace_random)
    random_ids = rng.integers(first_regular_id, vocab_size, size=ids.shape)

    masked = ids.copy()
    masked[to_mask] = specials.mask_id
    masked[to_random] = random_ids[to_random]
    labels = np.where(selected, ids, IGNORE_INDEX).astype(np.int64)
    return masked, labels
