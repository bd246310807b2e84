"""Entity-level precision / recall / F1 over BIO tag sequences."""
from __future__ import annotations

from docmamba.errors import ContractError


def get_entities(tags) -> list[tuple[str, int, int]]:
    """Maximal ``(type, start, end)`` spans (inclusive end).

    An ``I-X`` that does not continue an ``X`` span opens a new one.
    """
    spans = []
    current = None
    for i, tag in enumerate(tags):
        if tag.startswith("B-") or (tag.startswith("I-") and (current is None or current[0] != tag[2:])):
            if current is not None:
                spans.append(tuple(current))
            current = [tag[2:], i, i]
        elif tag.startswith("I-"):
            current[2] = i
        else:
            if current is not None:
                spans.append(tuple(current))
            current = None
    if current is not None:
        spans.append(tuple(current))
    return spans


def entity_f1(pred_tags, gold_tags) -> tuple[float, float, float]:
    """Exact-match span scores; accepts one tag sequence or a list of them."""
    if pred_tags and isinstance(pred_tags[0], str) or gold_tags and isinstance(gold_tags[0], str):
        pred_tags, gold_tags = [pred_tags], [gold_tags]
    if len(pred_tags) != len(gold_tags):
        raise ContractError(f"{len(pred_tags)} predicted vs {len(gold_tags)} gold sequences")
    n_pred = n_gold = n_hit = 0
    for pred, gold in zip(pred_tags, gold_tags):
        if len(pred) != len(gold):
            raise ContractError(f"tag sequences differ in length: {len(pred)} vs {len(gold)}")
        p, g = set(get_entities(pred)), set(get_entities(gold))
        n_pred += len(p)
        n_gold += len(g)
        n_hit += len(p & g)
    precision = n_hit / n_pred if n_pred else 0.0
    recall = n_hit / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1
