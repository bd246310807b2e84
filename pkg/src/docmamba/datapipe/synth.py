"""Synthetic business documents with segment structure and entity tags.

Each document is laid out in one or two columns of stacked segments. Segment
templates:

* ``title``     -- a short upper-case heading;
* ``paragraph`` -- sentences from a small template grammar;
* ``field``     -- ``Key: value``; for entity fields the value words carry
  BIO tags of one of the entity types, other keys are plain text.

Token length (under the supplied tokenizer, counting the leading [CLS]) is
drawn uniformly from ``[min_tokens, max_tokens]`` and enforced exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from docmamba.datapipe.document import Document, Word
from docmamba.doc_model.tokenizer import ByteTokenizer

ENTITY_TYPES = ("COMPANY", "DATE", "ADDRESS", "TOTAL")

TITLES = ["INVOICE", "RECEIPT", "PURCHASE ORDER", "STATEMENT", "DELIVERY NOTE", "QUOTATION"]
DETERMINERS = ["the", "a", "this", "each"]
NOUNS = ["invoice", "payment", "order", "item", "customer", "supplier", "account", "service",
         "delivery", "balance", "document", "form", "receipt"]
VERBS = ["includes", "requires", "covers", "lists", "confirms", "shows", "reflects", "contains"]
ADJECTIVES = ["total", "final", "monthly", "current", "signed", "pending", "previous", "standard"]
ENTITY_KEYS = {
    "COMPANY": ["Company:", "Vendor:"],
    "DATE": ["Date:", "Issued:"],
    "ADDRESS": ["Address:", "Ship to:"],
    "TOTAL": ["Total:", "Amount due:"],
}
PLAIN_KEYS = ["Ref:", "Phone:", "Page:", "Desk:"]
COMPANY_A = ["Acme", "Globex", "Initech", "Umbrella", "Stark", "Wayne", "Hooli", "Vandelay"]
COMPANY_B = ["Corp", "Ltd", "Inc", "Holdings", "Group"]
STREETS = ["Elm", "Oak", "Main", "Park", "Lake", "Hill"]
STREET_TYPES = ["Street", "Road", "Avenue"]


@dataclass(frozen=True)
class GrammarConfig:
    n_segments: tuple[int, int] = (2, 8)
    templates: tuple[str, ...] = ("title", "paragraph", "field", "field")
    two_column_prob: float = 0.5
    entity_fraction: float = 0.7
    min_tokens: int = 32
    max_tokens: int = 256
    entity_types: tuple[str, ...] = ENTITY_TYPES
    page_w: float = 612.0
    page_h: float = 792.0

    def __post_init__(self):
        lo, hi = self.n_segments
        if not 1 <= lo <= hi:
            raise ValueError(f"bad segment range {self.n_segments}")
        if not 2 <= self.min_tokens <= self.max_tokens:
            raise ValueError(f"bad token range [{self.min_tokens}, {self.max_tokens}]")
        unknown = set(self.templates) - {"title", "paragraph", "field"}
        if unknown or not self.templates:
            raise ValueError(f"unknown templates {sorted(unknown)}")


def _choice(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _sentence(rng):
    words = [_choice(rng, DETERMINERS), _choice(rng, NOUNS), _choice(rng, VERBS),
             _choice(rng, DETERMINERS[:2]), _choice(rng, ADJECTIVES), _choice(rng, NOUNS) + "."]
    words[0] = words[0].capitalize()
    return words


def _entity_value(rng, kind):
    if kind == "COMPANY":
        return [_choice(rng, COMPANY_A), _choice(rng, COMPANY_B)]
    if kind == "DATE":
        return [f"{rng.integers(1, 29):02d}/{rng.integers(1, 13):02d}/{rng.integers(2015, 2025)}"]
    if kind == "ADDRESS":
        return [str(rng.integers(1, 999)), _choice(rng, STREETS), _choice(rng, STREET_TYPES)]
    return [f"${rng.integers(1, 999)}.{rng.integers(0, 100):02d}"]


def _segment_words(rng, template, grammar):
    """Initial content as ``[(text, tag)]``; title words get tag None until finalised."""
    if template == "title":
        return [(w, None) for w in _choice(rng, TITLES).split()]
    if template == "paragraph":
        n = int(rng.integers(1, 3))
        return [(w, "O") for _ in range(n) for w in _sentence(rng)]
    if rng.random() < grammar.entity_fraction and grammar.entity_types:
        kind = _choice(rng, grammar.entity_types)
        key = [(w, "O") for w in _choice(rng, ENTITY_KEYS.get(kind, [kind.title() + ":"])).split()]
        value = _entity_value(rng, kind) if kind in ENTITY_TYPES else [_choice(rng, NOUNS)]
        return key + [(w, ("B-" if i == 0 else "I-") + kind) for i, w in enumerate(value)]
    return [(_choice(rng, PLAIN_KEYS), "O"), (str(rng.integers(100, 99999)), "O")]


def _fit_length(rng, segments, templates, budget, count):
    """Grow or trim ``segments`` in place until ``count`` of all words equals ``budget``."""
    total = sum(count(t) for seg in segments for t, _ in seg)
    grow = [i for i, t in enumerate(templates) if t == "paragraph"] or [len(segments) - 1]
    while total < budget:
        seg = segments[_choice(rng, grow)]
        for w in _sentence(rng):
            seg.append((w, "O"))
            total += count(w)
    # trim from the back, keeping one word per segment
    i = len(segments) - 1
    while total > budget and i >= 0:
        seg = segments[i]
        while total > budget and len(seg) > 1:
            total -= count(seg.pop()[0])
        i -= 1
    if total > budget:
        # every segment is down to one word: shorten texts
        for seg in reversed(segments):
            text, tag = seg[0]
            excess = total - budget
            keep = max(1, len(text) - excess)
            while count(text[:keep]) > max(1, count(text) - excess) and keep > 1:
                keep -= 1
            total -= count(text) - count(text[:keep])
            seg[0] = (text[:keep], tag)
            if total <= budget:
                break
    if total < budget:
        # shortening overshot on multi-byte characters; pad the last segment
        segments[-1].append(("x" * (budget - total), "O"))
    return segments


def _layout(rng, segments, grammar, two_columns):
    W, Hp = grammar.page_w, grammar.page_h
    margin, gutter = 40.0, 20.0
    cols = [(margin, W - margin)]
    if two_columns:
        mid = W / 2
        cols = [(margin, mid - gutter / 2), (mid + gutter / 2, W - margin)]
    split = (len(segments) + 1) // 2 if two_columns else len(segments)
    char_w, line_h, seg_gap = 5.5, 12.0, 10.0
    placed = []  # (segment index, text, tag, x0, y0, x1, y1)
    for col, members in enumerate([range(split), range(split, len(segments))][:len(cols)]):
        x_lo, x_hi = cols[col]
        y = margin + float(rng.uniform(0, 20))
        start = len(placed)
        for s in members:
            x = x_lo
            for text, tag in segments[s]:
                w = char_w * max(len(text), 1)
                if x > x_lo and x + w > x_hi:
                    x, y = x_lo, y + line_h
                placed.append([s, text, tag, x, y, min(x + w, x_hi), y + line_h * 0.8])
                x += w + char_w
            y += line_h + seg_gap
        bottom = Hp - margin
        if y > bottom and len(placed) > start:
            scale = (bottom - margin) / (y - margin)
            for p in placed[start:]:
                p[4] = margin + (p[4] - margin) * scale
                p[6] = margin + (p[6] - margin) * scale
    return placed


def synth_document(rng, doc_id, grammar: GrammarConfig, tokenizer=None) -> Document:
    tokenizer = tokenizer or ByteTokenizer()
    count = lambda text: max(1, len(tokenizer.encode(text)))
    target = int(rng.integers(grammar.min_tokens, grammar.max_tokens + 1))
    budget = target - 1  # [CLS]
    lo, hi = grammar.n_segments
    n_seg = int(rng.integers(lo, hi + 1))
    n_seg = max(1, min(n_seg, budget // 6))
    templates = [_choice(rng, grammar.templates) for _ in range(n_seg)]
    segments = [_segment_words(rng, t, grammar) for t in templates]
    _fit_length(rng, segments, templates, budget, count)
    # titles carry no tag; everything else defaults to O
    segments = [[(t, tag if tag is not None else "O") for t, tag in seg] for seg in segments]

    placed = _layout(rng, segments, grammar, rng.random() < grammar.two_column_prob)
    seg_ids = rng.permutation(n_seg)
    words = []
    for s, text, tag, x0, y0, x1, y1 in placed:
        quad = tuple(round(v, 2) for v in (x0, y0, x1, y0, x1, y1, x0, y1))
        words.append(Word(text, quad, int(seg_ids[s]), tag))
    # present words in a scrambled order, as OCR output would not be pre-sorted
    words = [words[i] for i in rng.permutation(len(words))]
    return Document(doc_id, grammar.page_w, grammar.page_h, words)


def synth_corpus(seed: int, n_docs: int, grammar: GrammarConfig | None = None,
                 tokenizer=None) -> list[Document]:
    """Deterministic corpus: document ``i`` depends only on ``(seed, i)``."""
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    grammar = grammar or GrammarConfig()
    return [synth_document(np.random.default_rng([seed, i]), f"synth-{seed}-{i:05d}", grammar, tokenizer)
            for i in range(n_docs)]
