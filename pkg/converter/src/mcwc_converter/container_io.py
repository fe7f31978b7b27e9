"""Self-contained reader/writer for the portable tensor container format.

The format is the external interface between this converter and the codec:
magic "MCTC", u32 manifest length, JSON manifest (sorted keys, compact
separators), then a contiguous little-endian f32 data region. Keeping an
independent implementation here exercises the format as the actual boundary.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ShapeMismatch

MAGIC = b"MCTC"


def write_container(layers: list[dict[str, np.ndarray]], arch_id: int, path) -> None:
    """layers[i] maps tensor name -> float32 array for 1-based layer i+1."""
    manifest_layers = []
    offset = 0
    blobs = []
    for i, tensors in enumerate(layers, start=1):
        entries = []
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            entries.append({"name": name, "shape": list(arr.shape),
                            "dtype": "f32", "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        manifest_layers.append({"index": i, "tensors": entries})
    manifest = json.dumps({"arch_id": int(arch_id), "layers": manifest_layers},
                          sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def read_container(path) -> tuple[int, list[dict[str, np.ndarray]]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ShapeMismatch(f"{path}: not a container file")
    (mlen,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8:8 + mlen].decode())
    data = raw[8 + mlen:]
    layers = []
    for entry in manifest["layers"]:
        tensors = {}
        for t in entry["tensors"]:
            shape = tuple(t["shape"])
            n = int(np.prod(shape))
            start = t["offset"]
            arr = np.frombuffer(data[start:start + 4 * n], dtype="<f4")
            if arr.size != n:
                raise ShapeMismatch(f"{t['name']}: truncated data region")
            tensors[t["name"]] = arr.reshape(shape).copy()
        layers.append(tensors)
    return int(manifest["arch_id"]), layers
