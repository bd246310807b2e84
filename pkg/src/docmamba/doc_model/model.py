"""The full encoder: embeddings, stacked bidirectional blocks, final norm, heads.

Parameters live in one flat ``name -> ndarray`` dict; block parameter objects
are views into it, so in-place optimizer updates are seen everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from docmamba.doc_model.config import ModelConfig
from docmamba.doc_model.embeddings import embed_2d_position_backward, embed_tokens
from docmamba.doc_model.heads import IGNORE_INDEX, cross_entropy, dropout
from docmamba.errors import ContractError
from docmamba.mamba_block import NORMS, BlockParams, bimamba_block_backward, bimamba_block_forward
from docmamba.ssm_core import xavier_uniform


@dataclass
class TokenRecord:
    token_id: int
    poly: tuple[int, ...]
    segment_id: int = 0


def records_to_arrays(records):
    ids = np.array([r.token_id for r in records], dtype=np.int64)
    polys = np.array([r.poly for r in records], dtype=np.int64).reshape(-1, 8)
    return ids, polys


def parameter_family(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if name.startswith("embed."):
        return "tables"
    if name.startswith(("mlm_head", "tag_head")):
        return "heads"
    if leaf in ("norm_weight", "final_norm"):
        return "norms"
    if leaf.startswith("conv_"):
        return "conv"
    if leaf == "a_log":
        return "a_log"
    if leaf in ("d_skip", "dt_bias"):
        return "ssm_vectors"
    return "projections"


class DocMamba:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.blocks = []
        for i in range(config.layers):
            prefix = f"layers.{i}."
            self.blocks.append(BlockParams.from_arrays(
                {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}))

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "DocMamba":
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        H, V = config.hidden, config.vocab_size
        params = {
            "embed.tokens": rng.normal(0, 0.02, (V, H)).astype(dt),
            "embed.coord_values": rng.normal(0, 0.02, (config.coord_bins, config.coord_dim)).astype(dt),
            "embed.coord_types": rng.normal(0, 0.02, (config.num_coord_types, config.coord_dim)).astype(dt),
        }
        for i in range(config.layers):
            block = BlockParams.init(H, rng, d_inner=config.d_inner, n_state=config.n_state,
                                     conv_width=config.conv_width, dt_rank=config.dt_rank, dtype=dt)
            params.update({f"layers.{i}.{k}": v for k, v in block.arrays().items()})
        params["final_norm"] = np.ones(H, dtype=dt)
        params["mlm_head.bias"] = np.zeros(V, dtype=dt)
        params["tag_head.weight"] = xavier_uniform(rng, (H, config.num_tags), dt)
        params["tag_head.bias"] = np.zeros(config.num_tags, dtype=dt)
        return cls(config, params)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "DocMamba":
        return DocMamba(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- encoder -------------------------------------------------------------

    def _inputs(self, token_ids, polys):
        ids = np.asarray(token_ids, dtype=np.int64)
        polys = np.asarray(polys, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids, polys = ids[None], polys[None]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ContractError(f"expected a non-empty (batch, L) id array, got shape {np.shape(token_ids)}")
        if polys.shape != ids.shape + (8,):
            raise ContractError(f"polys shape {polys.shape} does not match ids {ids.shape}")
        return ids, polys, squeeze

    def _forward(self, ids, polys, backend=None):
        p = self.params
        S = embed_tokens(ids, polys, p["embed.tokens"], p["embed.coord_values"],
                         p["embed.coord_types"]).astype(self.config.np_dtype, copy=False)
        caches = []
        for block in self.blocks:
            S, cache = bimamba_block_forward(S, block, norm=self.config.norm, backend=backend)
            caches.append(cache)
        norm_fn, _ = NORMS[self.config.norm]
        return norm_fn(S, p["final_norm"]), (ids, polys, S, caches)

    def _backward(self, dH, state, grads, backend=None):
        ids, polys, S, caches = state
        p = self.params
        _, norm_bwd = NORMS[self.config.norm]
        dS, grads["final_norm"] = norm_bwd(dH, S, p["final_norm"])
        for i in reversed(range(len(self.blocks))):
            dS, g = bimamba_block_backward(dS, caches[i], self.blocks[i], backend=backend)
            for k, v in g.arrays().items():
                grads[f"layers.{i}.{k}"] = v
        d_tokens = grads.get("embed.tokens")
        if d_tokens is None:
            d_tokens = np.zeros_like(p["embed.tokens"])
        np.add.at(d_tokens, ids.reshape(-1), dS.reshape(-1, dS.shape[-1]))
        grads["embed.tokens"] = d_tokens
        grads["embed.coord_values"], grads["embed.coord_types"] = embed_2d_position_backward(
            dS, polys, p["embed.coord_values"], p["embed.coord_types"])
        dtype = self.config.np_dtype
        for k in grads:
            grads[k] = np.asarray(grads[k], dtype=dtype)
        return grads

    def encode(self, token_ids, polys, backend=None) -> np.ndarray:
        """Final-normalised hidden states, ``(L, hidden)`` or ``(batch, L, hidden)``."""
        ids, polys, squeeze = self._inputs(token_ids, polys)
        H, _ = self._forward(ids, polys, backend)
        return H[0] if squeeze else H

    def encode_records(self, records) -> np.ndarray:
        if not records:
            raise ContractError("cannot encode an empty sequence")
        return self.encode(*records_to_arrays(records))

    # -- masked language modelling ------------------------------------------------

    def mlm_logits(self, hidden) -> np.ndarray:
        return hidden @ self.params["embed.tokens"].T + self.params["mlm_head.bias"]

    def mlm_loss(self, token_ids, polys, labels, backend=None) -> tuple[float, int]:
        ids, polys, _ = self._inputs(token_ids, polys)
        labels = np.asarray(labels).reshape(ids.shape)
        keep = labels != IGNORE_INDEX
        if not keep.any():
            return 0.0, 0
        H, _ = self._forward(ids, polys, backend)
        loss, count, _ = cross_entropy(self.mlm_logits(H[keep]), labels[keep])
        return loss, count

    def mlm_loss_and_grads(self, token_ids, polys, labels, backend=None):
        """Mean masked-token cross-entropy, its count, and gradients for every parameter."""
        ids, polys, _ = self._inputs(token_ids, polys)
        labels = np.asarray(labels).reshape(ids.shape)
        H, state = self._forward(ids, polys, backend)
        keep = labels != IGNORE_INDEX
        Hsel = H[keep]
        table = self.params["embed.tokens"]
        loss, count, dlogits = cross_entropy(self.mlm_logits(Hsel), labels[keep])
        grads = {
            "embed.tokens": dlogits.T @ Hsel,
            "mlm_head.bias": dlogits.sum(axis=0),
        }
        dH = np.zeros_like(H)
        dH[keep] = dlogits @ table
        self._backward(dH, state, grads, backend)
        return loss, count, grads

    # -- BIO tagging -----------------------------------------------------------

    def tag_logits(self, token_ids, polys, rng=None, train=False, backend=None):
        ids, polys, squeeze = self._inputs(token_ids, polys)
        H, _ = self._forward(ids, polys, backend)
        dropped, _ = dropout(H, self.config.dropout_rate, rng, train)
        logits = dropped @ self.params["tag_head.weight"] + self.params["tag_head.bias"]
        return logits[0] if squeeze else logits

    def predict_tags(self, token_ids, polys, backend=None) -> np.ndarray:
        return np.argmax(self.tag_logits(token_ids, polys, backend=backend), axis=-1)

    def tag_loss_and_grads(self, token_ids, polys, tags, rng=None, train=True,
                           freeze_backbone=False, backend=None):
        ids, polys, _ = self._inputs(token_ids, polys)
        tags = np.asarray(tags).reshape(ids.shape)
        H, state = self._forward(ids, polys, backend)
        dropped, mask = dropout(H, self.config.dropout_rate, rng, train)
        W = self.params["tag_head.weight"]
        logits = dropped @ W + self.params["tag_head.bias"]
        loss, count, dlogits = cross_entropy(logits, tags)
        flat = dlogits.reshape(-1, dlogits.shape[-1])
        grads = {
            "tag_head.weight": dropped.reshape(-1, H.shape[-1]).T @ flat,
            "tag_head.bias": flat.sum(axis=0),
        }
        if not freeze_backbone:
            dH = dlogits @ W.T
            if mask is not None:
                dH = dH * mask
            self._backward(dH, state, grads, backend)
        else:
            dtype = self.config.np_dtype
            grads = {k: v.astype(dtype) for k, v in grads.items()}
        return loss, count, grads
