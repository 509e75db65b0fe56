"""Named-tensor archive used for model checkpoints.

Layout (little-endian)::

    b"SRAFTARC"            8-byte magic
    uint32 version         currently 1
    uint64 manifest_len
    manifest               UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
    payload                concatenated float32 data; offsets are relative to payload start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SRAFTARC"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")


class ArchiveError(ValueError):
    pass


def save_archive(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, len(manifest)))
        f.write(manifest)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def load_archive(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise ArchiveError(f"{path}: truncated header")
    magic, version, mlen = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise ArchiveError(f"{path}: not a tensor archive (magic {magic!r})")
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    start = _HEAD.size + mlen
    manifest = json.loads(raw[_HEAD.size : start].decode())
    payload = memoryview(raw)[start:]
    tensors = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + 4 * count
        if end > len(payload):
            raise ArchiveError(f"{path}: tensor {e['name']} runs past end of payload")
        arr = np.frombuffer(payload[e["offset"] : end], dtype="<f4").astype(np.float32)
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return tensors, manifest["meta"]
