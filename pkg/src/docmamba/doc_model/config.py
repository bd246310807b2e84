from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from docmamba.errors import ContractError


@dataclass
class ModelConfig:
    hidden: int = 768
    layers: int = 24
    d_inner: int = 1536
    n_state: int = 16
    vocab_size: int = 260
    coord_bins: int = 1001
    num_coord_types: int = 8
    dropout_rate: float = 0.1
    conv_width: int = 4
    dt_rank: int | None = None
    norm: str = "rms"
    num_tags: int = 9
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden <= 0 or self.hidden % self.num_coord_types:
            raise ContractError(
                f"hidden={self.hidden} must be a positive multiple of {self.num_coord_types}")
        if self.layers < 0 or self.d_inner < 1 or self.n_state < 1:
            raise ContractError("layers must be >= 0, d_inner and n_state >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def coord_dim(self) -> int:
        return self.hidden // self.num_coord_types

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(hidden=32, layers=2, d_inner=64, n_state=8)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)
