"""Output heads and their losses."""
from __future__ import annotations

import numpy as np

IGNORE_INDEX = -100


def mlm_logits(hidden, word_table, bias=None):
    """Vocabulary logits with the output projection tied to the word table."""
    logits = hidden @ word_table.T
    return logits if bias is None else logits + bias


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean cross-entropy over rows whose label is not ``IGNORE_INDEX``.

    Returns ``(loss, count, dlogits)``. With no labelled rows the loss is 0.0,
    the count 0 and the gradient zero.
    """
    labels = np.asarray(labels)
    keep = labels != IGNORE_INDEX
    count = int(keep.sum())
    dlogits = np.zeros_like(logits)
    if count == 0:
        return 0.0, 0, dlogits
    sel = logits[keep]
    logp = log_softmax(sel.astype(np.float64))
    target = labels[keep]
    loss = -logp[np.arange(count), target].mean()
    grad = np.exp(logp)
    grad[np.arange(count), target] -= 1.0
    dlogits[keep] = grad / count
    return float(loss), count, dlogits


def dropout(x, rate, rng=None, train=False):
    """Inverted dropout; identity (and a ``None`` mask) outside training or at rate 0."""
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit random generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def tag_logits(hidden, weight, bias, rate=0.0, rng=None, train=False):
    dropped, _ = dropout(hidden, rate, rng, train)
    return dropped @ weight + bias
