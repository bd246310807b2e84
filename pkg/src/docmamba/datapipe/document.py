"""Document JSON codec and the FUNSD adapter.

Schema::

    {"doc_id": str, "page_w": num, "page_h": num,
     "words": [{"text": str, "quad": [8 nums], "segment_id": int, "entity_tag": str?}]}
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from docmamba.errors import ParseError


@dataclass
class Word:
    text: str
    quad: tuple[float, ...]
    segment_id: int
    entity_tag: str | None = None

    def to_dict(self) -> dict:
        out = {"text": self.text, "quad": list(self.quad), "segment_id": self.segment_id}
        if self.entity_tag is not None:
            out["entity_tag"] = self.entity_tag
        return out


@dataclass
class Document:
    doc_id: str
    page_w: float
    page_h: float
    words: list[Word] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "page_w": self.page_w, "page_h": self.page_h,
                "words": [w.to_dict() for w in self.words]}

    @property
    def has_tags(self) -> bool:
        return any(w.entity_tag is not None for w in self.words)


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _number(obj, key, path):
    if key not in obj:
        raise ParseError(f"{path}{key}", "missing field")
    v = obj[key]
    if not _is_number(v) or not math.isfinite(v):
        raise ParseError(f"{path}{key}", f"expected a finite number, got {v!r}")
    return v


def _parse_word(obj, path) -> Word:
    if not isinstance(obj, dict):
        raise ParseError(path, "expected an object")
    for key in ("text", "quad", "segment_id"):
        if key not in obj:
            raise ParseError(f"{path}.{key}", "missing field")
    if not isinstance(obj["text"], str):
        raise ParseError(f"{path}.text", "expected a string")
    quad = obj["quad"]
    if not isinstance(quad, list) or len(quad) != 8:
        raise ParseError(f"{path}.quad", "expected a list of 8 numbers")
    for i, v in enumerate(quad):
        if not _is_number(v) or not math.isfinite(v):
            raise ParseError(f"{path}.quad[{i}]", f"expected a finite number, got {v!r}")
    seg = obj["segment_id"]
    if not isinstance(seg, int) or isinstance(seg, bool) or seg < 0:
        raise ParseError(f"{path}.segment_id", f"expected a non-negative integer, got {seg!r}")
    tag = obj.get("entity_tag")
    if tag is not None and not isinstance(tag, str):
        raise ParseError(f"{path}.entity_tag", "expected a string")
    return Word(obj["text"], tuple(quad), seg, tag)


def document_from_dict(obj) -> Document:
    if not isinstance(obj, dict):
        raise ParseError("<root>", "expected a JSON object")
    if not isinstance(obj.get("doc_id"), str):
        raise ParseError("doc_id", "missing field" if "doc_id" not in obj else "expected a string")
    page_w = _number(obj, "page_w", "")
    page_h = _number(obj, "page_h", "")
    if page_w <= 0 or page_h <= 0:
        raise ParseError("page_w" if page_w <= 0 else "page_h", "page dimensions must be positive")
    words = obj.get("words")
    if not isinstance(words, list):
        raise ParseError("words", "missing field" if words is None else "expected a list")
    return Document(obj["doc_id"], page_w, page_h,
                    [_parse_word(w, f"words[{i}]") for i, w in enumerate(words)])


def load_document(data) -> Document:
    """Parse JSON text or bytes; errors name the offending path."""
    try:
        obj = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError("<root>", f"invalid JSON: {exc}") from None
    return document_from_dict(obj)


def dump_document(doc: Document) -> str:
    return json.dumps(doc.to_dict(), ensure_ascii=False, sort_keys=True)


def read_document(path) -> Document:
    return load_document(Path(path).read_bytes())


def write_document(path, doc: Document):
    Path(path).write_text(dump_document(doc) + "\n", encoding="utf-8")


def funsd_to_document(data, doc_id: str, page_w: float | None = None,
                      page_h: float | None = None) -> Document:
    """Convert a FUNSD annotation (``{"form": [...]}``).

    Each form block becomes a segment; its label becomes BIO tags over the
    block's words (``other`` maps to ``O``). Page size defaults to the extent
    of the boxes.
    """
    if isinstance(data, (str, bytes)):
        data = json.loads(data)
    blocks = data.get("form")
    if not isinstance(blocks, list):
        raise ParseError("form", "expected a list of blocks")
    words = []
    max_x = max_y = 1.0
    for b_i, block in enumerate(blocks):
        label = str(block.get("label", "other")).lower()
        for w_i, w in enumerate(block.get("words", [])):
            try:
                x0, y0, x1, y1 = (float(v) for v in w["box"])
            except (KeyError, TypeError, ValueError):
                raise ParseError(f"form[{b_i}].words[{w_i}].box", "expected 4 numbers") from None
            if label == "other":
                tag = "O"
            else:
                tag = ("B-" if w_i == 0 else "I-") + label.upper()
            words.append(Word(str(w.get("text", "")), (x0, y0, x1, y0, x1, y1, x0, y1), b_i, tag))
            max_x, max_y = max(max_x, x1), max(max_y, y1)
    return Document(doc_id, float(page_w or max_x), float(page_h or max_y), words)
