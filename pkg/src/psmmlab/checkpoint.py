"""Checkpoint directory format.

``index.txt`` holds optional ``# key=value`` metadata lines followed by one
line per tensor: ``name dtype shape byte_offset byte_length`` with the shape
written as comma-separated extents.  ``weights.bin`` is the concatenation of
little-endian float32 payloads in index order.
"""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import numpy as np

INDEX = "index.txt"
WEIGHTS = "weights.bin"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save(directory, state: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# {k}={v}" for k, v in (meta or {}).items()]
    offset = 0
    with open(directory / WEIGHTS, "wb") as fh:
        for name, value in state.items():
            if any(c.isspace() for c in name):
                raise CheckpointError(f"tensor name {name!r} contains whitespace")
            payload = np.ascontiguousarray(value, dtype=_LE_F32).tobytes()
            shape = ",".join(str(d) for d in np.shape(value)) or "-"
            lines.append(f"{name} float32 {shape} {offset} {len(payload)}")
            fh.write(payload)
            offset += len(payload)
    (directory / INDEX).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return directory


def read_meta(directory) -> dict[str, str]:
    meta = {}
    for line in (Path(directory) / INDEX).read_text(encoding="utf-8").splitlines():
        if line.startswith("#") and "=" in line:
            k, v = line[1:].strip().split("=", 1)
            meta[k] = v
    return meta


def load(directory) -> tuple[OrderedDict[str, np.ndarray], dict[str, str]]:
    directory = Path(directory)
    index, weights = directory / INDEX, directory / WEIGHTS
    if not index.is_file() or not weights.is_file():
        raise CheckpointError(f"{directory} is not a checkpoint directory")
    blob = weights.read_bytes()
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise CheckpointError(f"{index}:{lineno}: expected 5 fields, got {len(parts)}")
        name, dtype, shape_s, off_s, len_s = parts
        if dtype != "float32":
            raise CheckpointError(f"{index}:{lineno}: unsupported dtype {dtype}")
        shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
        off, length = int(off_s), int(len_s)
        if off + length > len(blob) or length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{index}:{lineno}: byte range inconsistent with shape {shape}")
        state[name] = np.frombuffer(blob, dtype=_LE_F32, count=length // 4, offset=off).reshape(shape).copy()
    return state, read_meta(directory)
