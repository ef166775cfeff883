"""Binary float32 feature matrices ("FMAT1") with a JSON row-index sidecar.

Layout: ``b"FMAT1"``, rows (u32 LE), cols (u32 LE), then rows*cols float32 LE
in row-major order. The sidecar ``<name>.index.json`` maps an id to a row (or
to a list of rows when an entity owns several vectors, e.g. images).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FMAT1"
_HEADER = struct.Struct("<II")


class FmatError(ValueError):
    pass


def index_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    stem = path.name[: -len(".fmat")] if path.name.endswith(".fmat") else path.name
    return path.with_name(stem + ".index.json")


def write_feature_matrix(matrix, row_index: dict | None, path: str | os.PathLike) -> None:
    arr = np.asarray(matrix)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise FmatError(f"expected a 2-D matrix, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise FmatError(f"non-finite entry in matrix for {path}")
    rows, cols = arr.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(rows, cols))
        fh.write(arr.tobytes(order="C"))
    if row_index is not None:
        clean = {str(k): v for k, v in row_index.items()}
        with open(index_path(path), "w", encoding="utf-8") as fh:
            json.dump(clean, fh, sort_keys=True)
            fh.write("\n")


def read_feature_matrix(path: str | os.PathLike, with_index: bool = True):
    """Return ``(matrix, row_index)``; ``row_index`` is None if no sidecar exists."""
    path = Path(path)
    data = path.read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise FmatError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    off = len(MAGIC)
    if len(data) < off + _HEADER.size:
        raise FmatError(f"{path}: truncated header")
    rows, cols = _HEADER.unpack_from(data, off)
    off += _HEADER.size
    need = rows * cols * 4
    if len(data) - off < need:
        raise FmatError(f"{path}: truncated payload ({len(data) - off} of {need} bytes)")
    if len(data) - off > need:
        raise FmatError(f"{path}: {len(data) - off - need} trailing bytes after payload")
    matrix = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off)
    matrix = matrix.reshape(rows, cols).astype(np.float32)
    if not np.all(np.isfinite(matrix)):
        raise FmatError(f"{path}: non-finite value in payload")
    row_index = None
    sidecar = index_path(path)
    if with_index and sidecar.exists():
        with open(sidecar, encoding="utf-8") as fh:
            row_index = json.load(fh)
    return matrix, row_index
