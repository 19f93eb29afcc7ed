"""``.ckpt`` files: one JSON manifest line, then a flat little-endian f32 blob."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import Tensor


def save_checkpoint(path, params: Mapping[str, Tensor]) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(params):
        t = params[name]
        a = np.ascontiguousarray(t.data, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape),
                        "requires_grad": t.requires_grad, "offset": offset})
        blobs.append(a.tobytes())
        offset += a.size
    with open(path, "wb") as f:
        f.write(json.dumps({"format": "ckpt-f32", "tensors": entries}).encode() + b"\n")
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> dict[str, Tensor]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    manifest = json.loads(raw[:nl])
    blob = np.frombuffer(raw[nl + 1:], dtype="<f4")
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float32)
        out[e["name"]] = Tensor(a, requires_grad=e["requires_grad"], name=e["name"])
    return out


def checksum(tensors) -> str:
    """SHA-256 over the raw bytes of the given tensors, in order."""
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
