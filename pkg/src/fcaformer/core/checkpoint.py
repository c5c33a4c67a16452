"""Checkpoint container.

Byte layout::

    FCACKPT 1 <count>\n
    <name> <dtype> <dim0> <dim1> ...\n        (count lines, header order)
    <raw payload 0><raw payload 1>...         (little-endian, C order)

``dtype`` is one of f32, f64, i64, u8. Names may not contain whitespace.
A 0-d array has no dims on its line.
"""

from __future__ import annotations

import os
from typing import Mapping

import numpy as np

MAGIC = "FCACKPT"
VERSION = 1
_CODES = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "u8": "u1"}


def _code(arr: np.ndarray) -> str:
    for code, spec in _CODES.items():
        if arr.dtype == np.dtype(spec).newbyteorder("="):
            return code
    raise TypeError(f"cannot store dtype {arr.dtype}")


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    lines = [f"{MAGIC} {VERSION} {len(tensors)}"]
    payloads = []
    for name, arr in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr)
        code = _code(arr)
        lines.append(" ".join([name, code, *map(str, arr.shape)]))
        payloads.append(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for blob in payloads:
            fh.write(blob)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii").split()
        if len(first) != 3 or first[0] != MAGIC:
            raise ValueError(f"{path}: not a checkpoint container")
        if int(first[1]) != VERSION:
            raise ValueError(f"{path}: unsupported version {first[1]}")
        entries = []
        for _ in range(int(first[2])):
            parts = fh.readline().decode("ascii").split()
            if len(parts) < 2 or parts[1] not in _CODES:
                raise ValueError(f"{path}: malformed header line {parts}")
            entries.append((parts[0], parts[1], tuple(int(v) for v in parts[2:])))
        out = {}
        for name, code, shape in entries:
            dt = np.dtype(_CODES[code])
            count = int(np.prod(shape, dtype=np.int64))
            blob = fh.read(count * dt.itemsize)
            if len(blob) != count * dt.itemsize:
                raise ValueError(f"{path}: truncated payload for {name}")
            out[name] = np.frombuffer(blob, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        return out
