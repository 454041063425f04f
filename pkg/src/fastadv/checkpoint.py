"""Binary checkpoint format with a named-tensor manifest.

Layout: 4-byte magic, u32 format version, u32 header length, JSON header
(architecture descriptor, tensor manifest, training-state echo), then the
raw little-endian float32 payload. Parameters round-trip bit-exactly in
32-bit mode; 64-bit parameters are rounded to float32 on save.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"FADV"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, model, training_state=None):
    manifest = []
    payload = bytearray()
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        manifest.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": arr.nbytes,
        })
        payload.extend(arr.tobytes())
    header = json.dumps({
        "architecture": model.architecture,
        "manifest": manifest,
        "training_state": training_state or {},
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        f.write(bytes(payload))


def read_checkpoint(path):
    """Return (header dict, {name: float32 array})."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic")
    if len(blob) < 12:
        raise CheckpointError("truncated header")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(blob) < 12 + hlen:
        raise CheckpointError("truncated header")
    header = json.loads(blob[12 : 12 + hlen])
    payload = blob[12 + hlen :]
    tensors = {}
    seen = []
    for entry in header["manifest"]:
        off, nb = entry["offset"], entry["nbytes"]
        if off < 0 or off + nb > len(payload):
            raise CheckpointError(f"manifest entry {entry['name']} outside payload")
        for o2, n2 in seen:
            if off < o2 + n2 and o2 < off + nb:
                raise CheckpointError("overlapping manifest offsets")
        seen.append((off, nb))
        arr = np.frombuffer(payload, dtype="<f4", count=nb // 4, offset=off)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, tensors


def load_checkpoint(path, model):
    """Load parameters into a compatible model instance (in place)."""
    header, tensors = read_checkpoint(path)
    if header["architecture"] != model.architecture:
        raise CheckpointError(
            f"architecture mismatch: checkpoint is "
            f"{header['architecture'].get('kind')}, model is "
            f"{model.architecture.get('kind')}"
        )
    if set(tensors) != set(model.params):
        raise CheckpointError("parameter name mismatch")
    model.set_param_data(tensors)
    return header
