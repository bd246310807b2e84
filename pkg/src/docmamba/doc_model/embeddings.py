"""Word and 2-D layout embeddings.

A token's layout embedding concatenates eight sub-vectors, one per polygon
coordinate ``(x1, y1, ..., x4, y4)``. Each sub-vector is a row of a value table
shared by x and y lookups plus a row of an 8-entry coordinate-type table.
There is no table indexed by sequence position.
"""
from __future__ import annotations

import math

import numpy as np

from docmamba.errors import ContractError, DomainError

COORD_MAX = 1000


def normalize_box(quad, page_w: float, page_h: float) -> tuple[int, ...]:
    """Scale a page-unit quadrilateral to integers in [0, 1000] (round half up, clamp)."""
    if not (page_w > 0 and page_h > 0) or not (math.isfinite(page_w) and math.isfinite(page_h)):
        raise DomainError(f"page dimensions must be positive, got {page_w} x {page_h}")
    if len(quad) != 8:
        raise ContractError(f"quad needs 8 coordinates, got {len(quad)}")
    out = []
    for i, v in enumerate(quad):
        scale = COORD_MAX / (page_w if i % 2 == 0 else page_h)
        q = math.floor(float(v) * scale + 0.5)
        out.append(min(COORD_MAX, max(0, q)))
    return tuple(out)


def _check_polys(polys, bins):
    polys = np.asarray(polys)
    if polys.shape[-1:] != (8,):
        raise ContractError(f"polys must end with a dimension of 8, got shape {polys.shape}")
    if polys.size and (polys.min() < 0 or polys.max() >= bins):
        raise ContractError(f"coordinates must lie in [0, {bins - 1}]")
    return polys


def embed_2d_position(polys, value_table, type_table):
    """``(..., 8)`` integer polygons -> ``(..., 8 * sub_dim)`` layout embeddings."""
    polys = _check_polys(polys, value_table.shape[0])
    e = value_table[polys] + type_table[:8]
    return e.reshape(*polys.shape[:-1], 8 * value_table.shape[1])


def embed_2d_position_backward(dl, polys, value_table, type_table):
    sub = value_table.shape[1]
    de = dl.reshape(-1, 8, sub)
    d_values = np.zeros_like(value_table)
    np.add.at(d_values, np.asarray(polys).reshape(-1, 8), de)
    d_types = np.zeros_like(type_table)
    d_types[:8] = de.sum(axis=0)
    return d_values, d_types


def embed_tokens(token_ids, polys, word_table, value_table, type_table):
    """Word-table row plus layout embedding for each token."""
    token_ids = np.asarray(token_ids)
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= word_table.shape[0]):
        raise ContractError(f"token id out of range [0, {word_table.shape[0]})")
    return word_table[token_ids] + embed_2d_position(polys, value_table, type_table)
