"""Raw float array files and line-delimited JSON manifests."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, List

import numpy as np


class ArrayFormatError(ValueError):
    pass


def write_array(path, arr) -> None:
    """One-line JSON header {rows, cols} followed by little-endian float32 data.

    Vectors are stored as a single row.
    """
    a = np.asarray(arr, dtype="<f4")
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ArrayFormatError(f"expected a vector or matrix, got shape {a.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write((json.dumps({"rows": a.shape[0], "cols": a.shape[1]}) + "\n").encode())
        fh.write(np.ascontiguousarray(a).tobytes())


def read_array(path, squeeze: bool = False) -> np.ndarray:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        data = fh.read()
    rows, cols = int(header["rows"]), int(header["cols"])
    if len(data) != rows * cols * 4:
        raise ArrayFormatError(f"{path}: expected {rows * cols * 4} bytes, found {len(data)}")
    a = np.frombuffer(data, dtype="<f4").reshape(rows, cols).astype(np.float32)
    return a[0] if squeeze and rows == 1 else a


def write_jsonl(path, records: Iterable[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
