"""SMCK checkpoint container.

Layout (little-endian)::

    b"SMCK" | u8 version=1 | u32 header length | UTF-8 JSON header
    | u32 tensor count | per tensor: u16 name length, UTF-8 name, SMRT block

The JSON header holds the model config, the training config and the
normalizer, so a checkpoint alone is enough to run inference.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .data.arrayio import decode_array, encode_array
from .data.dataset import Normalizer
from .errors import BadMagicError, FormatError, TruncatedError, UnsupportedVersionError
from .model import ModelConfig, ParameterStore, SmartModel

MAGIC = b"SMCK"
VERSION = 1


@dataclass
class Checkpoint:
    model: SmartModel
    normalizer: Normalizer
    train_config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = {
        "model": ckpt.model.config.to_dict(),
        "train": ckpt.train_config,
        "normalizer": ckpt.normalizer.to_dict(),
        "extra": ckpt.extra,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<BI", VERSION, len(blob)), blob, struct.pack("<I", len(ckpt.model.params))]
    for name, arr in ckpt.model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(encode_array(arr.data))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 4:
        raise TruncatedError("checkpoint truncated")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad checkpoint magic {buf[:4]!r}")
    if len(buf) < 9:
        raise TruncatedError("checkpoint header truncated")
    version, hlen = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version}")
    pos = 9
    if len(buf) < pos + hlen + 4:
        raise TruncatedError("checkpoint header truncated")
    header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    state = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise TruncatedError("tensor name truncated")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + nlen:
            raise TruncatedError("tensor name truncated")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = decode_array(buf, pos)
        state[name] = arr
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes in checkpoint")

    config = ModelConfig.from_dict(header["model"])
    params = ParameterStore({k: np.asarray(v, dtype=np.float64) for k, v in state.items()})
    model = SmartModel(config, params)
    # order and names must match a fresh model of this config
    expected = list(SmartModel(config).params)
    if list(params) != expected:
        raise FormatError("checkpoint tensors do not match the model config")
    return Checkpoint(
        model=model,
        normalizer=Normalizer.from_dict(header["normalizer"]),
        train_config=header.get("train", {}),
        extra=header.get("extra", {}),
    )


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
