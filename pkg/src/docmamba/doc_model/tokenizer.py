"""Tokenizer interface and the default byte-level implementation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol


@dataclass(frozen=True)
class SpecialTokens:
    pad_id: int = 0
    cls_id: int = 1
    mask_id: int = 2
    unk_id: int = 3

    @property
    def ids(self) -> tuple[int, ...]:
        return (self.pad_id, self.cls_id, self.mask_id, self.unk_id)


class Tokenizer(Protocol):
    vocab_size: int
    specials: SpecialTokens
    first_regular_id: int

    def encode(self, text: str) -> list[int]: ...

    def decode(self, ids) -> str: ...


class ByteTokenizer:
    """UTF-8 bytes shifted past four reserved ids; vocabulary size 260."""

    specials = SpecialTokens()
    first_regular_id = 4
    vocab_size = 256 + 4

    def encode(self, text: str) -> list[int]:
        return [b + self.first_regular_id for b in text.encode("utf-8")]

    def decode(self, ids) -> str:
        data = bytes(int(i) - self.first_regular_id for i in ids
                     if int(i) >= self.first_regular_id)
        return data.decode("utf-8", errors="replace")
