"""Binary checkpoint container.

Layout (all integers little-endian)::

    bytes 0-7    magic  b"AMDIMCKP"
    bytes 8-11   uint32 format version (currently 1)
    bytes 12-19  uint64 header length N
    bytes 20..   N bytes of UTF-8 JSON header:
                   {"config": {...}, "meta": {...},
                    "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    then         raw tensor payload; each tensor is C-ordered little-endian data
                 starting at ``offset`` bytes past the end of the header.

Round trips are bit-exact: arrays are written and read as raw bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AMDIMCKP"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "|u1"}


class CheckpointError(IOError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict | None = None, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"cannot store dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config or {}, "meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Return (tensors, config, meta)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", buf[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(buf[20:20 + hlen])
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {e['name']} at offset {start}")
        arr = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]], count=e["nbytes"] // np.dtype(_DTYPES[e["dtype"]]).itemsize,
                            offset=start)
        tensors[e["name"]] = arr.astype(e["dtype"]).reshape(e["shape"])
    return tensors, header["config"], header["meta"]


def state_hash(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name]).tobytes())
    return h.hexdigest()


def save_encoder(path, encoder, extra_meta: dict | None = None) -> None:
    from .encoder import encoder_config_dict

    tensors = {f"encoder.{n}": a for n, a in encoder.state_dict().items()}
    save_checkpoint(path, tensors, {"encoder": encoder_config_dict(encoder.config)}, extra_meta)


def load_encoder(path):
    from . import tensor as T
    from .encoder import Encoder, EncoderConfig

    tensors, config, meta = load_checkpoint(path)
    if "encoder" not in config:
        raise CheckpointError(f"{path}: no encoder configuration stored")
    state = {n[len("encoder."):]: a for n, a in tensors.items() if n.startswith("encoder.")}
    dtype = next(iter(state.values())).dtype
    with T.default_dtype(dtype):
        encoder = Encoder(EncoderConfig(**config["encoder"]))
    encoder.load_state_dict(state)
    return encoder, config, meta
