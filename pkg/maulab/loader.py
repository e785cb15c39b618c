"""
Reading and writing of every on-disk artifact except checkpoints.

Frame files hold one record per utterance:

    uint32 LE id length, UTF-8 id bytes
    uint32 LE L_frames, uint32 LE F
    L_frames * F little-endian float32 values, row-major
"""

import csv
import io
import json
import os
import re
import struct
from typing import Dict, Iterable, List, Text, Tuple, Type, TypeVar

import numpy as np
import yaml
from loguru import logger
from pydantic import BaseModel, ValidationError

from maulab import exceptions, utils
from maulab.models import AUSequence, CorpusManifest

M = TypeVar("M", bound=BaseModel)

_U32 = struct.Struct("<I")
FRAME_DTYPE = "<f4"
DIGEST_PREFIX = "# config_digest="
_SVG_DIGEST = re.compile(r"<desc>config_digest=([^<]*)</desc>")


def _load_yaml_file(yaml_file: Text) -> Dict:
    """load yaml file and check file content format"""
    with open(yaml_file, mode="rb") as stream:
        try:
            yaml_content = yaml.load(stream, Loader=yaml.SafeLoader)
        except yaml.YAMLError as ex:
            err_msg = f"YAMLError:\nfile: {yaml_file}\nerror: {ex}"
            logger.error(err_msg)
            raise exceptions.FileFormatError(err_msg)

        return yaml_content


def _load_json_file(json_file: Text) -> Dict:
    """load json file and check file content format"""
    with open(json_file, mode="rb") as data_file:
        try:
            json_content = json.load(data_file)
        except json.JSONDecodeError as ex:
            err_msg = f"JSONDecodeError:\nfile: {json_file}\nerror: {ex}"
            raise exceptions.FileFormatError(err_msg)

        return json_content


def load_config_file(config_file: Text) -> Dict:
    """load run config overrides from a JSON or YAML file"""
    if not os.path.isfile(config_file):
        raise exceptions.FileNotFound(f"config file not exists: {config_file}")

    file_suffix = os.path.splitext(config_file)[1].lower()
    if file_suffix == ".json":
        content = _load_json_file(config_file)
    elif file_suffix in [".yaml", ".yml"]:
        content = _load_yaml_file(config_file)
    else:
        raise exceptions.FileFormatError(
            f"config file should be YAML/JSON format, invalid format file: {config_file}"
        )

    if content is None:
        return {}
    if not isinstance(content, dict):
        raise exceptions.FileFormatError(f"config file must hold a mapping: {config_file}")
    return content


def load_model_file(path: Text, model: Type[M]) -> M:
    """load a JSON artifact and validate it with a pydantic model"""
    if not os.path.isfile(path):
        raise exceptions.FileNotFound(f"file not exists: {path}")
    content = _load_json_file(path)
    try:
        return model.parse_obj(content)
    except ValidationError as ex:
        raise exceptions.FileFormatError(f"{model.__name__} ValidationError in {path}:\n{ex}")


def load_manifest(path: Text) -> CorpusManifest:
    return load_model_file(path, CorpusManifest)


def write_json(path: Text, data) -> Text:
    if isinstance(data, BaseModel):
        data = json.loads(data.json())
    return utils.atomic_write(path, utils.dumps_json(data, indent=2) + "\n")


# frame binaries


def encode_frames(records: Iterable[Tuple[Text, np.ndarray]]) -> bytes:
    chunks: List[bytes] = []
    for utt_id, frames in records:
        frames = np.asarray(frames)
        if frames.ndim != 2:
            raise exceptions.DimensionError(
                f"frames of {utt_id} must be a matrix, got shape {frames.shape}"
            )
        id_bytes = utt_id.encode("utf-8")
        chunks.append(_U32.pack(len(id_bytes)))
        chunks.append(id_bytes)
        chunks.append(_U32.pack(frames.shape[0]))
        chunks.append(_U32.pack(frames.shape[1]))
        chunks.append(np.ascontiguousarray(frames, dtype=FRAME_DTYPE).tobytes())
    return b"".join(chunks)


def write_frames(path: Text, records: Iterable[Tuple[Text, np.ndarray]]) -> Text:
    return utils.atomic_write(path, encode_frames(records))


def decode_frames(blob: bytes, source: Text = "<bytes>") -> Dict[Text, np.ndarray]:
    """parse a frame file into an ordered id -> float64 matrix mapping"""
    frames: Dict[Text, np.ndarray] = {}
    offset = 0

    def take(nbytes: int) -> int:
        nonlocal offset
        if offset + nbytes > len(blob):
            raise exceptions.FileFormatError(f"truncated frame file: {source}")
        start = offset
        offset += nbytes
        return start

    while offset < len(blob):
        (id_len,) = _U32.unpack_from(blob, take(_U32.size))
        start = take(id_len)
        try:
            utt_id = blob[start : start + id_len].decode("utf-8")
        except UnicodeDecodeError:
            raise exceptions.FileFormatError(f"invalid utterance id in frame file: {source}")
        (n_frames,) = _U32.unpack_from(blob, take(_U32.size))
        (width,) = _U32.unpack_from(blob, take(_U32.size))
        count = n_frames * width
        start = take(count * 4)
        matrix = np.frombuffer(blob, dtype=FRAME_DTYPE, count=count, offset=start)
        frames[utt_id] = matrix.astype(np.float64).reshape(n_frames, width)

    return frames


def read_frames(path: Text) -> Dict[Text, np.ndarray]:
    if not os.path.isfile(path):
        raise exceptions.FileNotFound(f"frame file not exists: {path}")
    with open(path, "rb") as f:
        return decode_frames(f.read(), path)


# json lines


def write_jsonl(path: Text, rows: Iterable) -> Text:
    lines = []
    for row in rows:
        if isinstance(row, BaseModel):
            row = json.loads(row.json(exclude_none=True))
        lines.append(utils.dumps_json(row))
    return utils.atomic_write(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: Text) -> List[Dict]:
    if not os.path.isfile(path):
        raise exceptions.FileNotFound(f"json lines file not exists: {path}")
    rows = []
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as ex:
                raise exceptions.FileFormatError(f"{path}:{number} is not valid json: {ex}")
    return rows


def read_model_lines(path: Text, model: Type[M]) -> List[M]:
    try:
        return [model.parse_obj(row) for row in read_jsonl(path)]
    except ValidationError as ex:
        raise exceptions.FileFormatError(f"{model.__name__} ValidationError in {path}:\n{ex}")


def write_units(path: Text, sequences: Iterable[AUSequence]) -> Text:
    return write_jsonl(path, sequences)


def read_units(path: Text) -> List[AUSequence]:
    return read_model_lines(path, AUSequence)


def dumps_csv_rows(rows: Iterable[Dict], digest: Text = "") -> Text:
    """csv text with a header row, floats in repr form

    A non-empty digest is written first as a `# config_digest=` comment line.
    """
    rows = list(rows)
    buffer = io.StringIO()
    if digest:
        buffer.write(f"{DIGEST_PREFIX}{digest}\n")
    if rows:
        writer = csv.DictWriter(buffer, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buffer.getvalue()


def read_csv_rows(csv_file: Text) -> List[Dict]:
    """load csv file as a list of row mappings, values stay strings

    Comment lines starting with `#` are skipped.

    Examples:
        >>> cat vq.log.csv
        # config_digest=3f9a...
        step,lr,loss
        1,2.2e-05,0.91
        2,4.4e-05,0.87

        >>> read_csv_rows("vq.log.csv")
        [
            {'step': '1', 'lr': '2.2e-05', 'loss': '0.91'},
            {'step': '2', 'lr': '4.4e-05', 'loss': '0.87'}
        ]

    """
    if not os.path.isfile(csv_file):
        raise exceptions.FileNotFound(f"csv file not exists: {csv_file}")

    with open(csv_file, encoding="utf-8") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


def read_csv_digest(csv_file: Text) -> Text:
    """config digest from the leading comment line, empty if absent"""
    if not os.path.isfile(csv_file):
        raise exceptions.FileNotFound(f"csv file not exists: {csv_file}")
    with open(csv_file, encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
    return first[len(DIGEST_PREFIX) :] if first.startswith(DIGEST_PREFIX) else ""


def read_svg_digest(svg_file: Text) -> Text:
    if not os.path.isfile(svg_file):
        raise exceptions.FileNotFound(f"svg file not exists: {svg_file}")
    with open(svg_file, encoding="utf-8") as f:
        found = _SVG_DIGEST.search(f.read())
    return found.group(1) if found else ""
