"""Serialising 2-D layouts into 1-D token orders.

``sfbs_order`` keeps every segment contiguous: tokens are sorted top-to-bottom
then left-to-right inside their segment, and segments are sorted by their
first token under the same key. ``wfbs_order`` applies the key to all tokens
at once, ignoring segments. The reverse scan is the reversed permutation and is
never materialised here; the encoder block reverses internally.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import groupby
from xml.sax.saxutils import escape


@dataclass(frozen=True)
class LayoutToken:
    index: int
    x_min: float
    y_min: float
    segment_id: int = 0
    x_max: float | None = None
    y_max: float | None = None

    @classmethod
    def from_poly(cls, index, poly, segment_id=0) -> "LayoutToken":
        """Anchor at the polygon's first (upper-left) vertex."""
        xs, ys = poly[0::2], poly[1::2]
        return cls(index, poly[0], poly[1], segment_id, max(xs), max(ys))

    @property
    def key(self):
        return (self.y_min, self.x_min, self.index)


@dataclass(frozen=True)
class OrderedSequence:
    order: tuple[int, ...]
    inverse: tuple[int, ...]

    @classmethod
    def from_order(cls, order) -> "OrderedSequence":
        order = tuple(int(i) for i in order)
        inverse = [0] * len(order)
        for pos, idx in enumerate(order):
            inverse[idx] = pos
        return cls(order, tuple(inverse))

    def reversed(self) -> "OrderedSequence":
        return OrderedSequence.from_order(self.order[::-1])

    def __len__(self):
        return len(self.order)


def _check_indices(tokens):
    if sorted(t.index for t in tokens) != list(range(len(tokens))):
        raise ValueError("token indices must be exactly 0..n-1")


def sfbs_order(tokens) -> OrderedSequence:
    _check_indices(tokens)
    by_segment = sorted(tokens, key=lambda t: t.segment_id)
    segments = [sorted(group, key=lambda t: t.key)
                for _, group in groupby(by_segment, key=lambda t: t.segment_id)]
    segments.sort(key=lambda seg: seg[0].key)
    return OrderedSequence.from_order(t.index for seg in segments for t in seg)


def wfbs_order(tokens) -> OrderedSequence:
    _check_indices(tokens)
    return OrderedSequence.from_order(t.index for t in sorted(tokens, key=lambda t: t.key))


ORDERINGS = {"sfbs": sfbs_order, "wfbs": wfbs_order}

_LIGHT = (222, 235, 247)
_DARK = (8, 48, 107)


def _ramp(frac):
    return "#" + "".join(f"{round(lo + (hi - lo) * frac):02x}" for lo, hi in zip(_LIGHT, _DARK))


def render_scan_svg(tokens, ordering: OrderedSequence, width=1000, height=1000) -> str:
    """One rectangle per token, shaded light (scan start) to dark (scan end)."""
    if len(ordering) != len(tokens):
        raise ValueError("ordering does not match the token list")
    by_index = {t.index: t for t in tokens}
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white" stroke="#999999"/>',
    ]
    n = len(ordering)
    for rank, idx in enumerate(ordering.order):
        t = by_index[idx]
        x1 = t.x_max if t.x_max is not None else t.x_min + 10
        y1 = t.y_max if t.y_max is not None else t.y_min + 10
        frac = rank / (n - 1) if n > 1 else 0.0
        lines.append(
            f'<rect x="{t.x_min:g}" y="{t.y_min:g}" width="{max(x1 - t.x_min, 1):g}" '
            f'height="{max(y1 - t.y_min, 1):g}" fill="{_ramp(frac)}" '
            f'data-rank="{rank}" data-segment="{escape(str(t.segment_id))}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
