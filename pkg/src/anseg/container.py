"""Tiny binary container: magic, version, JSON metadata, named raw arrays.

Layout: magic (4 bytes) | version (u32 LE) | meta length (u64 LE) | meta JSON
| array table length (u64 LE) | array table JSON | concatenated array bytes.
Used for the memory repository (magic ANRP) and checkpoints (magic ANCK).
"""

import json
import os
import struct

import numpy as np


class ContainerError(ValueError):
    pass


def write_container(path, magic: bytes, version: int, meta: dict, arrays: dict):
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    table = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        table.append({"name": name, "dtype": str(arr.dtype),
                      "shape": list(arr.shape), "offset": offset, "size": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    meta_b = json.dumps(meta, sort_keys=True).encode()
    table_b = json.dumps(table).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", version))
        f.write(struct.pack("<Q", len(meta_b)))
        f.write(meta_b)
        f.write(struct.pack("<Q", len(table_b)))
        f.write(table_b)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def read_container(path, magic: bytes):
    with open(path, "rb") as f:
        got = f.read(4)
        if got != magic:
            raise ContainerError(f"{path}: bad magic {got!r}, expected {magic!r}")
        version = struct.unpack("<I", f.read(4))[0]
        meta_len = struct.unpack("<Q", f.read(8))[0]
        meta = json.loads(f.read(meta_len))
        table_len = struct.unpack("<Q", f.read(8))[0]
        table = json.loads(f.read(table_len))
        payload = f.read()
    arrays = {}
    for ent in table:
        raw = payload[ent["offset"]: ent["offset"] + ent["size"]]
        if len(raw) != ent["size"]:
            raise ContainerError(f"{path}: truncated array {ent['name']!r}")
        arrays[ent["name"]] = np.frombuffer(raw, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"]).copy()
    return version, meta, arrays
