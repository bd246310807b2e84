"""Turn documents into ordered token sequences with layout and tags."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from docmamba.datapipe.document import Document
from docmamba.doc_model.embeddings import normalize_box
from docmamba.doc_model.heads import IGNORE_INDEX
from docmamba.doc_model.tokenizer import ByteTokenizer
from docmamba.sfbs import ORDERINGS, LayoutToken

MAX_LENGTH = 2048


@dataclass(frozen=True)
class TagSet:
    """BIO label ids: ``O`` is 0, then ``B-X``/``I-X`` per entity type."""

    entity_types: tuple[str, ...] = ("COMPANY", "DATE", "ADDRESS", "TOTAL")

    @property
    def labels(self) -> tuple[str, ...]:
        return ("O",) + tuple(f"{p}-{t}" for t in self.entity_types for p in ("B", "I"))

    @property
    def num_tags(self) -> int:
        return 2 * len(self.entity_types) + 1

    def encode(self, tag: str | None) -> int:
        if tag is None or tag == "O":
            return 0
        try:
            return self.labels.index(tag)
        except ValueError:
            raise ValueError(f"unknown tag {tag!r}") from None

    def decode(self, ids) -> list[str]:
        labels = self.labels
        return [labels[int(i)] if 0 <= int(i) < len(labels) else "O" for i in ids]

    def continuation(self, tag_id: int) -> int:
        """Id used for the second and later sub-tokens of a word."""
        label = self.labels[tag_id]
        return self.labels.index("I-" + label[2:]) if label.startswith("B-") else tag_id

    @classmethod
    def from_documents(cls, docs) -> "TagSet":
        kinds = sorted({w.entity_tag[2:] for d in docs for w in d.words
                        if w.entity_tag and w.entity_tag[:2] in ("B-", "I-")})
        return cls(tuple(kinds))


@dataclass
class TokenizedSequence:
    """Position 0 is always [CLS] (zero polygon, word id -1, ignored tag)."""

    doc_id: str
    token_ids: np.ndarray
    polys: np.ndarray
    segment_ids: np.ndarray
    word_ids: np.ndarray
    tags: np.ndarray
    n_words: int = 0
    word_tags: list = field(default_factory=list)

    def __len__(self):
        return len(self.token_ids)


def tokenize_document(doc: Document, tokenizer=None, tagset: TagSet | None = None,
                      order: str = "sfbs") -> TokenizedSequence:
    """Order words by the chosen scan, split them into sub-tokens, prepend [CLS].

    Sub-tokens share their word's polygon and stay adjacent. Empty words map to
    one ``unk`` token so that every word is visible to the model.
    """
    tokenizer = tokenizer or ByteTokenizer()
    tagset = tagset or TagSet()
    specials = tokenizer.specials
    layout = [LayoutToken.from_poly(i, w.quad, w.segment_id) for i, w in enumerate(doc.words)]
    word_order = ORDERINGS[order](layout).order

    ids, polys, segs, wids, tags = [specials.cls_id], [(0,) * 8], [-1], [-1], [IGNORE_INDEX]
    word_tags = []
    for w_i in word_order:
        word = doc.words[w_i]
        pieces = tokenizer.encode(word.text) or [specials.unk_id]
        poly = normalize_box(word.quad, doc.page_w, doc.page_h)
        tag = tagset.encode(word.entity_tag) if word.entity_tag is not None else IGNORE_INDEX
        for j, piece in enumerate(pieces):
            ids.append(piece)
            polys.append(poly)
            segs.append(word.segment_id)
            wids.append(w_i)
            if tag == IGNORE_INDEX or j == 0:
                tags.append(tag)
            else:
                tags.append(tagset.continuation(tag))
        word_tags.append(word.entity_tag or "O")
    return TokenizedSequence(
        doc.doc_id,
        np.array(ids, dtype=np.int64),
        np.array(polys, dtype=np.int64).reshape(-1, 8),
        np.array(segs, dtype=np.int64),
        np.array(wids, dtype=np.int64),
        np.array(tags, dtype=np.int64),
        len(word_order),
        word_tags,
    )


def _slice(seq: TokenizedSequence, lo: int, hi: int, part: int) -> TokenizedSequence:
    """Tokens ``[lo, hi)`` (1-based body indices) behind a fresh [CLS]."""
    idx = np.concatenate([[0], np.arange(lo, hi)])
    words = [w for w in dict.fromkeys(seq.word_ids[lo:hi].tolist())]
    first = {w: k for k, w in enumerate(dict.fromkeys(seq.word_ids[1:].tolist()))}
    return TokenizedSequence(
        f"{seq.doc_id}#{part}", seq.token_ids[idx], seq.polys[idx], seq.segment_ids[idx],
        seq.word_ids[idx], seq.tags[idx], len(words), [seq.word_tags[first[w]] for w in words])


def chunk_sequence(seq: TokenizedSequence, max_len: int = MAX_LENGTH) -> list[TokenizedSequence]:
    """Split sequences longer than ``max_len`` into non-overlapping chunks.

    Each chunk gets its own [CLS]. Cuts fall on the last segment boundary that
    fits, else on a word boundary, else anywhere.
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    if len(seq) <= max_len:
        return [seq]
    body = max_len - 1
    chunks, start, n = [], 1, len(seq)
    while start < n:
        end = min(start + body, n)
        if end < n:
            cut = _best_cut(seq, start, end)
            end = cut if cut > start else end
        chunks.append(_slice(seq, start, end, len(chunks)))
        start = end
    return chunks


def _best_cut(seq, start, end):
    # a cut at position p means token p starts the next chunk
    for ids in (seq.segment_ids, seq.word_ids):
        boundary = np.nonzero(ids[start + 1:end + 1] != ids[start:end])[0]
        if boundary.size:
            return start + 1 + int(boundary[-1])
    return end


def word_predictions(seq: TokenizedSequence, token_tags, tagset: TagSet) -> list[str]:
    """Word-level tags read from each word's first sub-token."""
    token_tags = np.asarray(token_tags)
    seen, out = set(), []
    for pos in range(1, len(seq)):
        w = int(seq.word_ids[pos])
        if w not in seen:
            seen.add(w)
            out.append(tagset.decode([token_tags[pos]])[0])
    return out
