"""Versioned binary tensor container.

Used for weight checkpoints, inference traces, and predictor parameters.
Layout: magic, version, a JSON metadata header describing every tensor
(name, dtype, shape, storage layout), then the raw payloads in header
order. Row-major storage is the default; tensors listed with layout
"col" are stored column-major and come back as Fortran-ordered arrays.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNSC"
VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


class ContainerError(ValueError):
    """Malformed or unsupported container file."""


def save_tensors(path, tensors: dict[str, np.ndarray], column_major: set[str] | frozenset = frozenset()) -> None:
    unknown = set(column_major) - set(tensors)
    if unknown:
        raise ContainerError(f"column_major names not present: {sorted(unknown)}")
    meta = []
    payloads = []
    for name, arr in tensors.items():
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ContainerError(f"unsupported dtype {dtype} for tensor {name!r}")
        layout = "col" if name in column_major else "row"
        order = "F" if layout == "col" else "C"
        payload = np.asarray(arr, order=order).tobytes(order=order)
        meta.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "layout": layout})
        payloads.append(payload)
    header = json.dumps({"tensors": meta}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for payload in payloads:
            f.write(payload)


def load_tensors(path) -> tuple[dict[str, np.ndarray], set[str]]:
    """Load a container; returns (tensors, names stored column-major)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    col_major: set[str] = set()
    offset = 12 + header_len
    for rec in header["tensors"]:
        dtype = _DTYPES[rec["dtype"]]
        shape = tuple(rec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        raw = data[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise ContainerError(f"{path}: truncated payload for {rec['name']!r}")
        offset += nbytes
        order = "F" if rec["layout"] == "col" else "C"
        arr = np.frombuffer(raw, dtype=dtype).copy()
        tensors[rec["name"]] = arr.reshape(shape, order=order)
        if rec["layout"] == "col":
            col_major.add(rec["name"])
            tensors[rec["name"]] = np.asfortranarray(tensors[rec["name"]])
    return tensors, col_major
