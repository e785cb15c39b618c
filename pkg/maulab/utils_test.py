import json
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np
import toml

from maulab import __version__, exceptions, utils
from maulab.utils import ExtendJSONEncoder


class TestUtils(unittest.TestCase):
    def test_versions_are_in_sync(self):
        """Checks if the pyproject.toml and __version__ in __init__.py are in sync."""

        path = Path(__file__).resolve().parents[1] / "pyproject.toml"
        pyproject = toml.loads(open(str(path)).read())
        pyproject_version = pyproject["tool"]["poetry"]["version"]
        self.assertEqual(pyproject_version, __version__)

    def test_json_encoder_numpy(self):
        data = {"a": np.int64(3), "b": np.float32(0.5), "c": np.arange(3), "d": np.bool_(True)}
        self.assertEqual(
            json.loads(json.dumps(data, cls=ExtendJSONEncoder)),
            {"a": 3, "b": 0.5, "c": [0, 1, 2], "d": True},
        )

    def test_dumps_json_is_canonical(self):
        self.assertEqual(utils.dumps_json({"b": 1, "a": [1.5]}), '{"a": [1.5], "b": 1}')

    def test_config_digest_ignores_paths(self):
        base = {"seed": 1, "paths": {"corpus_dir": "x"}}
        moved = {"paths": {"corpus_dir": "y"}, "seed": 1}
        self.assertEqual(utils.config_digest(base), utils.config_digest(moved))
        self.assertNotEqual(utils.config_digest(base), utils.config_digest({"seed": 2}))
        self.assertEqual(len(utils.config_digest(base)), 64)

    def test_atomic_write(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "nested", "out.txt")
            utils.atomic_write(path, "first")
            utils.atomic_write(path, b"second")
            with open(path, "rb") as f:
                self.assertEqual(f.read(), b"second")
            self.assertEqual(os.listdir(os.path.dirname(path)), ["out.txt"])
            self.assertEqual(utils.file_digest(path), utils.sha256_digest(b"second"))

    def test_substream_is_reproducible_and_independent(self):
        a = utils.substream(5, 1, 2).random(4)
        np.testing.assert_array_equal(a, utils.substream(5, 1, 2).random(4))
        self.assertFalse(np.array_equal(a, utils.substream(5, 1, 3).random(4)))
        self.assertFalse(np.array_equal(a, utils.substream(6, 1, 2).random(4)))

    def test_worker_count(self):
        previous = os.environ.get("MAULAB_THREADS")
        try:
            os.environ["MAULAB_THREADS"] = "3"
            self.assertEqual(utils.worker_count(), 3)
            os.environ["MAULAB_THREADS"] = "many"
            self.assertEqual(utils.worker_count(), 1)
            del os.environ["MAULAB_THREADS"]
            self.assertEqual(utils.worker_count(), 1)
        finally:
            if previous is not None:
                os.environ["MAULAB_THREADS"] = previous

    def test_parallel_map_keeps_order(self):
        def square(x):
            return x * x

        items = list(range(20))
        self.assertEqual(utils.parallel_map(square, items, workers=4), [x * x for x in items])
        self.assertEqual(utils.parallel_map(square, items, workers=1), [x * x for x in items])

    def test_deep_merge(self):
        base = {"a": {"b": 1, "c": 2}, "d": [1]}
        merged = utils.deep_merge(base, {"a": {"c": 3}, "d": [2]})
        self.assertEqual(merged, {"a": {"b": 1, "c": 3}, "d": [2]})
        self.assertEqual(base["a"]["c"], 2)

    def test_parse_override(self):
        self.assertEqual(
            utils.parse_override("detection.threshold=0.3"), {"detection": {"threshold": 0.3}}
        )
        self.assertEqual(utils.parse_override("preset=smoke"), {"preset": "smoke"})
        self.assertEqual(
            utils.parse_override("detection.sweep=[0.1, 0.2]"), {"detection": {"sweep": [0.1, 0.2]}}
        )
        with self.assertRaises(exceptions.ConfigError):
            utils.parse_override("detection.threshold")

