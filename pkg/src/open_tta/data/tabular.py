"""External labeled pools.

CSV: header row `d0,d1,...,dK,label`, one sample per row, labels in [0, C)
(label C allowed only when open-set samples are declared).

Binary (`.pool`, little-endian):
    8 bytes magic b"OTTPOOL\\0", uint8 version (1), uint64 n, uint32 D, uint32 C,
    n*D float64 features row-major, n int32 labels.
"""
from __future__ import annotations

import os
import re
import struct

import numpy as np
import pandas as pd

from ..errors import TabularFormatError
from .synthetic import LabeledPool

POOL_MAGIC = b"OTTPOOL\x00"
POOL_VERSION = 1
_POOL_HDR = struct.Struct("<BQII")


def _check_labels(labels: np.ndarray, num_classes: int, allow_open: bool, first_line: int) -> None:
    upper = num_classes if allow_open else num_classes - 1
    bad = np.flatnonzero((labels < 0) | (labels > upper))
    if bad.size:
        i = int(bad[0])
        raise TabularFormatError("label out of range", line=first_line + i, label=int(labels[i]), num_classes=num_classes)


def _load_csv(path: str, num_classes: int, allow_open: bool) -> LabeledPool:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise TabularFormatError("file has no header row", line=1, path=path)
    except pd.errors.ParserError as e:
        m = re.search(r"line (\d+)", str(e))
        raise TabularFormatError(f"malformed row: {e}", line=int(m.group(1)) if m else None, path=path)

    cols = list(df.columns)
    if not cols or cols[-1] != "label" or cols[:-1] != [f"d{i}" for i in range(len(cols) - 1)]:
        raise TabularFormatError("header must be d0..dK,label", line=1, header=cols)
    dim = len(cols) - 1
    if df.empty:
        return LabeledPool(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), num_classes)

    numeric = df.apply(pd.to_numeric, errors="coerce")
    bad_rows = ~np.isfinite(numeric.to_numpy(dtype=np.float64)).all(axis=1)
    if bad_rows.any():
        # +2: one for the header, one for 1-based line numbers
        raise TabularFormatError("non-numeric, missing or non-finite value", line=int(np.flatnonzero(bad_rows)[0]) + 2, path=path)
    raw_labels = numeric["label"].to_numpy(dtype=np.float64)
    non_int = np.flatnonzero(raw_labels != np.round(raw_labels))
    if non_int.size:
        raise TabularFormatError("label is not an integer", line=int(non_int[0]) + 2, path=path)

    labels = raw_labels.astype(np.int64)
    _check_labels(labels, num_classes, allow_open, first_line=2)
    feats = numeric[[f"d{i}" for i in range(dim)]].to_numpy(dtype=np.float64).reshape(len(df), dim)
    return LabeledPool(feats, labels, num_classes)


def _load_binary(path: str, num_classes: int, allow_open: bool) -> LabeledPool:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != POOL_MAGIC:
        raise TabularFormatError("bad magic header", path=path)
    try:
        version, n, dim, c = _POOL_HDR.unpack_from(data, 8)
    except struct.error:
        raise TabularFormatError("truncated header", path=path)
    if version != POOL_VERSION:
        raise TabularFormatError("unsupported pool version", path=path, version=version)
    if c != num_classes:
        raise TabularFormatError("declared class count differs", path=path, file_classes=c, num_classes=num_classes)
    off = 8 + _POOL_HDR.size
    need = off + 8 * n * dim + 4 * n
    if len(data) != need:
        raise TabularFormatError("payload size does not match header", path=path, expected=need, got=len(data))
    feats = np.frombuffer(data, dtype="<f8", count=n * dim, offset=off).astype(np.float64).reshape(n, dim)
    labels = np.frombuffer(data, dtype="<i4", count=n, offset=off + 8 * n * dim).astype(np.int64)
    # "line" is the 1-based record index for binary pools
    bad = np.flatnonzero(~np.isfinite(feats).all(axis=1))
    if bad.size:
        raise TabularFormatError("non-finite feature value", line=int(bad[0]) + 1, path=path)
    _check_labels(labels, num_classes, allow_open, first_line=1)
    return LabeledPool(feats, labels, num_classes)


def load_tabular(path: str, num_classes: int, fmt: str = "auto", allow_open: bool = False) -> LabeledPool:
    if fmt == "auto":
        fmt = "binary" if os.path.splitext(path)[1] == ".pool" else "csv"
    if fmt == "csv":
        return _load_csv(path, num_classes, allow_open)
    if fmt == "binary":
        return _load_binary(path, num_classes, allow_open)
    raise TabularFormatError("unknown format", fmt=fmt)


def save_pool_binary(pool: LabeledPool, path: str) -> None:
    n, dim = pool.features.shape
    with open(path, "wb") as f:
        f.write(POOL_MAGIC)
        f.write(_POOL_HDR.pack(POOL_VERSION, n, dim, pool.num_classes))
        f.write(np.ascontiguousarray(pool.features, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(pool.labels, dtype="<i4").tobytes())


def save_pool_csv(pool: LabeledPool, path: str) -> None:
    dim = pool.features.shape[1]
    df = pd.DataFrame(pool.features, columns=[f"d{i}" for i in range(dim)])
    df["label"] = pool.labels
    df.to_csv(path, index=False)
