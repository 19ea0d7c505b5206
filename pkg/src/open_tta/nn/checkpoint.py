"""Flat checkpoint file for SmallClassifier.

Layout (little-endian):

    8 bytes   magic b"OTTACKPT"
    uint8     format version (1)
    uint32    number of layers L
    uint32    input_dim
    L times:  uint32 out_dim, uint8 activation (0 identity, 1 relu),
              uint8 stats mode (0 source, 1 test batch), float64 eps
    L times:  float64 arrays weight (out x in, row-major), bias, gamma, beta,
              running_mean, running_var
"""
from __future__ import annotations

import os
import struct
from typing import List

import numpy as np

from ..errors import CheckpointFormatError
from .model import Activation, BatchNormState, LayerBlock, SmallClassifier, StatsMode

MAGIC = b"OTTACKPT"
FORMAT_VERSION = 1

_ACT_CODES = {Activation.IDENTITY: 0, Activation.RELU: 1}
_MODE_CODES = {StatsMode.SOURCE: 0, StatsMode.TEST_BATCH: 1}
_LAYER_HDR = struct.Struct("<IBBd")


def to_bytes(model: SmallClassifier) -> bytes:
    model.validate()
    parts: List[bytes] = [MAGIC, struct.pack("<BII", FORMAT_VERSION, len(model.layers), model.input_dim)]
    for blk in model.layers:
        parts.append(_LAYER_HDR.pack(blk.out_dim, _ACT_CODES[blk.activation], _MODE_CODES[blk.bn.stats_mode], blk.bn.eps))
    for blk in model.layers:
        for arr in (blk.weight, blk.bias, blk.bn.gamma, blk.bn.beta, blk.bn.running_mean, blk.bn.running_var):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> SmallClassifier:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("bad magic header")
    off = len(MAGIC)
    try:
        version, n_layers, input_dim = struct.unpack_from("<BII", data, off)
    except struct.error as e:
        raise CheckpointFormatError(f"truncated header: {e}")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError("unsupported checkpoint version", found=version, expected=FORMAT_VERSION)
    off += struct.calcsize("<BII")

    act_by_code = {v: k for k, v in _ACT_CODES.items()}
    mode_by_code = {v: k for k, v in _MODE_CODES.items()}
    headers = []
    for _ in range(n_layers):
        try:
            headers.append(_LAYER_HDR.unpack_from(data, off))
        except struct.error as e:
            raise CheckpointFormatError(f"truncated layer header: {e}")
        off += _LAYER_HDR.size

    def take(count: int) -> np.ndarray:
        nonlocal off
        end = off + 8 * count
        if end > len(data):
            raise CheckpointFormatError("truncated parameter block")
        arr = np.frombuffer(data[off:end], dtype="<f8").astype(np.float64)
        off = end
        return arr

    layers: List[LayerBlock] = []
    in_dim = input_dim
    for out_dim, act, mode, eps in headers:
        if act not in act_by_code or mode not in mode_by_code:
            raise CheckpointFormatError("unknown activation or stats mode code", activation=act, mode=mode)
        weight = take(out_dim * in_dim).reshape(out_dim, in_dim)
        bias = take(out_dim)
        gamma = take(out_dim)
        beta = take(out_dim)
        rm = take(out_dim)
        rv = take(out_dim)
        bn = BatchNormState(rm, rv, gamma, beta, eps=eps, stats_mode=mode_by_code[mode])
        layers.append(LayerBlock(weight, bias, bn, act_by_code[act]))
        in_dim = out_dim
    if off != len(data):
        raise CheckpointFormatError("trailing bytes after parameter block", extra=len(data) - off)

    model = SmallClassifier(layers)
    model.validate()
    return model


def save_checkpoint(model: SmallClassifier, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(to_bytes(model))


def load_checkpoint(path: str) -> SmallClassifier:
    with open(path, "rb") as f:
        return from_bytes(f.read())
