"""Named-tensor blobs: a manifest table plus one little-endian float64 file.

Each table entry is ``{"name", "shape", "offset", "count"}`` where ``offset``
and ``count`` are measured in elements (8 bytes each).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

LE_F64 = np.dtype("<f8")


class FormatError(ValueError):
    pass


def write_blob(path: Path, tensors: dict[str, np.ndarray]) -> list[dict]:
    table = []
    offset = 0
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=LE_F64)
            fh.write(arr.tobytes())
            table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            offset += arr.size
    return table


def read_blob(path: Path, table: list[dict]) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) % LE_F64.itemsize:
        raise FormatError(f"{path}: size {len(raw)} bytes is not a multiple of 8")
    flat = np.frombuffer(raw, dtype=LE_F64)
    out: dict[str, np.ndarray] = {}
    for entry in table:
        name, shape = entry["name"], tuple(entry["shape"])
        off, count = int(entry["offset"]), int(entry["count"])
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise FormatError(f"tensor {name!r}: shape {list(shape)} disagrees with count {count}")
        if off + count > flat.size:
            raise FormatError(
                f"tensor {name!r}: needs elements [{off}, {off + count}) (byte offset {8 * off}) "
                f"but {path} holds only {flat.size} elements"
            )
        if name in out:
            raise FormatError(f"tensor {name!r} listed twice")
        out[name] = flat[off : off + count].astype(np.float64).reshape(shape)
    expected = sum(int(e["count"]) for e in table)
    if expected != flat.size:
        raise FormatError(f"{path}: holds {flat.size} elements but manifest accounts for {expected}")
    return out
