"""Named-tensor archive.

Layout::

    b"SDTENSOR1\\n"
    8-byte little-endian header length
    UTF-8 JSON header: {"meta": {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    raw little-endian tensor data, concatenated in header order

Model weights are stored as float32; other dtypes (int64 counters, uint8 RNG state)
are kept as-is. Writing is deterministic: identical inputs give identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SDTENSOR1\n"
DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64, "uint8": np.uint8}


class CheckpointError(IOError):
    pass


def save_tensors(path, tensors, meta=None, weights_dtype="float32"):
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        if arr.dtype.kind == "f":
            arr = arr.astype(weights_dtype)
        dtype = arr.dtype.name
        if dtype not in DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {dtype}")
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def load_tensors(path):
    """Return ``(tensors, meta)`` with tensors as torch tensors keyed by name."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a tensor archive")
    start = len(MAGIC) + 8
    try:
        (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
        header = json.loads(data[start:start + hlen])
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    base = start + hlen
    tensors = {}
    for e in header["tensors"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(data):
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arr = np.frombuffer(data, dtype=np.dtype(DTYPES[e["dtype"]]).newbyteorder("<"),
                            count=int(np.prod(e["shape"], dtype=np.int64)), offset=lo)
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(DTYPES[e["dtype"]]))
    return tensors, header["meta"]


def save_model(path, model, meta=None):
    save_tensors(path, {f"model.{k}": v for k, v in model.state_dict().items()}, meta)


def load_model_state(model, tensors, prefix="model."):
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} model tensors, e.g. {sorted(missing)[0]}")
    model.load_state_dict(state)
