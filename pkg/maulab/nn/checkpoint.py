"""
Checkpoint file layout:

    b"MAULAB01"
    uint64 little-endian header length
    UTF-8 JSON header {kind, dtype, params: [{name, shape}], config, config_digest, meta}
    raw little-endian float64 values of every parameter, in header order
"""

import json
import os
import struct
from typing import Dict, Text

import numpy as np
from loguru import logger

from maulab import exceptions, utils
from maulab.models import ModelKind

MAGIC = b"MAULAB01"
DTYPE = "<f8"
_LENGTH = struct.Struct("<Q")


class Checkpoint(object):
    def __init__(self, kind: ModelKind, params: Dict[Text, np.ndarray], header: Dict):
        self.kind = ModelKind(kind)
        self.params = params
        self.header = header

    @property
    def config(self) -> Dict:
        return self.header.get("config", {})

    @property
    def config_digest(self) -> Text:
        return self.header.get("config_digest", "")

    @property
    def meta(self) -> Dict:
        return self.header.get("meta", {})


def encode_checkpoint(
    kind: ModelKind,
    params: Dict[Text, np.ndarray],
    config: Dict,
    config_digest: Text = "",
    meta: Dict = None,
) -> bytes:
    header = {
        "kind": ModelKind(kind).value,
        "dtype": "float64-le",
        "params": [{"name": name, "shape": list(value.shape)} for name, value in params.items()],
        "config": config,
        "config_digest": config_digest,
        "meta": meta or {},
    }
    header_bytes = utils.dumps_json(header).encode("utf-8")
    chunks = [MAGIC, _LENGTH.pack(len(header_bytes)), header_bytes]
    for value in params.values():
        chunks.append(np.ascontiguousarray(value, dtype=DTYPE).tobytes())
    return b"".join(chunks)


def save_checkpoint(
    path: Text,
    kind: ModelKind,
    params: Dict[Text, np.ndarray],
    config: Dict,
    config_digest: Text = "",
    meta: Dict = None,
) -> Text:
    utils.atomic_write(path, encode_checkpoint(kind, params, config, config_digest, meta))
    logger.debug(f"saved {ModelKind(kind).value} checkpoint: {path}")
    return path


def load_checkpoint(path: Text, expected_kind: ModelKind = None) -> Checkpoint:
    if not os.path.isfile(path):
        raise exceptions.FileNotFound(f"checkpoint not exists: {path}")

    with open(path, "rb") as f:
        blob = f.read()

    if blob[: len(MAGIC)] != MAGIC:
        raise exceptions.FileFormatError(f"bad checkpoint magic in {path}")

    offset = len(MAGIC)
    if len(blob) < offset + _LENGTH.size:
        raise exceptions.FileFormatError(f"truncated checkpoint header in {path}")
    (header_len,) = _LENGTH.unpack_from(blob, offset)
    offset += _LENGTH.size
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as ex:
        raise exceptions.FileFormatError(f"invalid checkpoint header in {path}: {ex}")
    offset += header_len

    params: Dict[Text, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise exceptions.FileFormatError(
                f"checkpoint {path} truncated at parameter {entry['name']}"
            )
        params[entry["name"]] = (
            np.frombuffer(blob, dtype=DTYPE, count=count, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset += nbytes

    if offset != len(blob):
        raise exceptions.FileFormatError(f"checkpoint {path} has {len(blob) - offset} trailing bytes")

    checkpoint = Checkpoint(header["kind"], params, header)
    if expected_kind is not None and checkpoint.kind != ModelKind(expected_kind):
        raise exceptions.CheckpointMismatch(
            f"{path} holds a {checkpoint.kind.value} checkpoint, expected {ModelKind(expected_kind).value}"
        )
    return checkpoint
