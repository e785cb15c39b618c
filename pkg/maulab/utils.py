import copy
import hashlib
import json
import os
import os.path
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, List, Text, TypeVar, Union

import numpy as np
from loguru import logger

from maulab import exceptions

T = TypeVar("T")
R = TypeVar("R")


class ExtendJSONEncoder(json.JSONEncoder):
    """dump numpy scalars and arrays as plain json numbers and lists"""

    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        try:
            return super(ExtendJSONEncoder, self).default(obj)
        except (UnicodeDecodeError, TypeError):
            return repr(obj)


def dumps_json(data: Any, indent: int = None) -> Text:
    """canonical json text, identical input always gives identical bytes"""
    return json.dumps(
        data, cls=ExtendJSONEncoder, sort_keys=True, indent=indent, ensure_ascii=False
    )


def sha256_digest(data: Union[bytes, Text]) -> Text:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def config_digest(config_mapping: Dict) -> Text:
    """digest of a resolved config, output paths excluded"""
    mapping = {k: v for k, v in config_mapping.items() if k != "paths"}
    return sha256_digest(dumps_json(mapping))


def file_digest(path: Text) -> Text:
    hasher = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def atomic_write(path: Text, content: Union[bytes, Text]) -> Text:
    """write content to a temp file in the same folder, then rename over path"""
    folder = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(folder, exist_ok=True)
    except OSError as ex:
        raise exceptions.FileFormatError(f"output directory not writable: {folder}, {ex}")

    if isinstance(content, str):
        content = content.encode("utf-8")

    fd, tmp_path = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(content)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise

    logger.debug(f"wrote {len(content)} bytes to {path}")
    return path


def substream(seed: int, *keys: int) -> np.random.Generator:
    """independent generator derived from (seed, keys), no shared global state"""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in keys]))


def worker_count() -> int:
    """worker cap from MAULAB_THREADS, default single worker"""
    value = os.getenv("MAULAB_THREADS", "1")
    try:
        count = int(value)
    except ValueError:
        logger.warning(f"invalid MAULAB_THREADS value: {value}, use 1")
        return 1
    return max(1, count)


def parallel_map(func: Callable[[T], R], items: Iterable[T], workers: int = None) -> List[R]:
    """map func over items, results keep input order whatever the worker count"""
    items = list(items)
    workers = workers or worker_count()
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items))


def deep_merge(base: Dict, overrides: Dict) -> Dict:
    """merge two mappings recursively, values in overrides have higher priority"""
    merged = copy.deepcopy(base)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(expression: Text) -> Dict:
    """convert dotted override to nested mapping

    Examples:
        >>> parse_override("detection.threshold=0.3")
            {"detection": {"threshold": 0.3}}

    """
    if "=" not in expression:
        raise exceptions.ConfigError(f"override should be key=value, got: {expression}")

    dotted_key, raw_value = expression.split("=", 1)
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value

    result: Dict = {}
    cursor = result
    keys = dotted_key.strip().split(".")
    for key in keys[:-1]:
        cursor = cursor.setdefault(key, {})
    cursor[keys[-1]] = value
    return result


def print_info(info_mapping: Dict):
    """log info mapping as a two-column table.

    Examples:
        >>> print_info({"PRE": 0.5, "REC": 0.25})
        ==================== Output ====================
        Key              :  Value
        ---------------- :  ----------------------------
        PRE              :  0.5
        REC              :  0.25
        ------------------------------------------------

    """
    if not info_mapping:
        return

    content_format = "{:<16} : {:<}\n"
    content = "\n==================== Output ====================\n"
    content += content_format.format("Key", "Value")
    content += content_format.format("-" * 16, "-" * 29)

    for key, value in info_mapping.items():
        if isinstance(value, (dict, list)):
            value = dumps_json(value)
        elif value is None:
            value = "None"

        content += content_format.format(key, value)

    content += "-" * 48 + "\n"
    logger.info(content)


LOGGER_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green>"
    + " | <level>{level}</level> | <level>{message}</level>"
)


def init_logger(level: str):
    level = level.upper()
    if level not in ["TRACE", "DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]:
        level = "INFO"  # default

    logger.remove()
    logger.add(sys.stdout, format=LOGGER_FORMAT, level=level)
