"""Self-describing checkpoint container.

Layout::

    b"docmamba-ckpt-v1\n"
    uint64 little-endian header length
    UTF-8 JSON header {"format", "config", "meta", "tensors": [{name, dtype, shape, offset, nbytes}]}
    raw little-endian tensor bytes, in header order

Byte output depends only on config, metadata and tensor values, so identical
training runs produce identical files.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from docmamba.doc_model.config import ModelConfig
from docmamba.doc_model.model import DocMamba

MAGIC = b"docmamba-ckpt-v1\n"
FORMAT = "docmamba-ckpt-v1"


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: DocMamba, meta: dict | None = None) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name])
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"format": FORMAT, "config": model.config.to_dict(),
                         "meta": meta or {}, "tensors": tensors}, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def save_checkpoint(path, model: DocMamba, meta: dict | None = None) -> Path:
    """Write atomically: a crash mid-write leaves any previous file intact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(checkpoint_bytes(model, meta))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> tuple[DocMamba, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(blob[start:start + hlen])
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')!r}")
    base = start + hlen
    params = {}
    for t in header["tensors"]:
        buf = blob[base + t["offset"]: base + t["offset"] + t["nbytes"]]
        dtype = np.dtype(t["dtype"]).newbyteorder("<")
        params[t["name"]] = np.frombuffer(buf, dtype=dtype).astype(t["dtype"]).reshape(t["shape"])
    config = ModelConfig.from_dict(header["config"])
    return DocMamba(config, params), header["meta"]
