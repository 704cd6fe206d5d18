"""Array-plus-header file format.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then the
payload as little-endian float64.  Used for model checkpoints, dataset
dumps and persisted triggers.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nncore import Architecture, ModelParams, flatten, unflatten

MAGIC = "flipfed-array-v1"
ORDERING = "layer-major; weight then bias; C order within each array"


def write_array(path, flat: np.ndarray, header: dict) -> None:
    flat = np.ascontiguousarray(flat, dtype="<f8").ravel()
    head = dict(header)
    head["magic"] = MAGIC
    head["length"] = int(flat.size)
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())


def read_array(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    if header.get("magic") != MAGIC:
        raise ValueError(f"{path}: not a {MAGIC} file")
    flat = np.frombuffer(raw[8 + n:], dtype="<f8").astype(np.float64)
    if flat.size != header["length"]:
        raise ValueError(f"{path}: payload has {flat.size} values, header says {header['length']}")
    return flat, header


def save_model(path, params: ModelParams, arch: Architecture, **meta) -> None:
    header = {"kind": "model", "architecture": arch.to_dict(), "ordering": ORDERING,
              "shapes": [[list(w), list(b)] for w, b in arch.param_shapes()], "meta": meta}
    write_array(path, flatten(params), header)


def load_model(path) -> tuple[ModelParams, Architecture, dict]:
    flat, header = read_array(path)
    arch = Architecture.from_dict(header["architecture"])
    return unflatten(flat, arch), arch, header.get("meta", {})
