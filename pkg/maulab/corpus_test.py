import filecmp
import os
import tempfile
import unittest

import numpy as np

from maulab import exceptions
from maulab.config import resolve_run_config
from maulab.corpus import (
    MANIFEST_FILE,
    build_inventory,
    frames_file,
    generate_corpus,
    generate_utterance,
    load_corpus,
    nearest_prototype_accuracy,
    pairwise_distances,
    reference_file,
)
from maulab.models import CorpusParams, PhonemeInventory, SplitCounts, SplitEnum


class TestInventory(unittest.TestCase):
    def test_prototypes_and_substitutes(self):
        params = CorpusParams()
        inventory = build_inventory(np.random.default_rng(0), params)
        standard = inventory.prototypes[: inventory.size]

        self.assertEqual(inventory.prototypes.shape, (32 + 8, 16))
        np.testing.assert_allclose(np.linalg.norm(standard, axis=1), 1.0)
        distances = pairwise_distances(standard)[~np.eye(32, dtype=bool)]
        self.assertGreater(distances.min(), params.min_separation)
        self.assertAlmostEqual(inventory.noise_std, 0.1 * distances.min())

        self.assertEqual(len(inventory.accent_map), 8)
        for key, proto in inventory.accent_map.items():
            self.assertGreaterEqual(proto, inventory.size)
            self.assertNotEqual(key, proto)
            # a midpoint of two unit vectors lies strictly inside the sphere
            self.assertLess(np.linalg.norm(inventory.prototypes[proto]), 1.0)

    def test_unsatisfiable_separation(self):
        params = CorpusParams(phoneme_count=8, accent_count=0, feature_dim=2, min_separation=1.9)
        with self.assertRaises(exceptions.CorpusError):
            build_inventory(np.random.default_rng(0), params)


class TestUtterance(unittest.TestCase):
    def setUp(self):
        self.inventory = build_inventory(np.random.default_rng(1), CorpusParams())

    def generate(self, seed: int, is_l2: bool, error_rate: float, len_range=(8, 20)):
        return generate_utterance(
            np.random.default_rng(seed), self.inventory, is_l2, error_rate, len_range, (3, 8)
        )

    def test_spans_tile_frames(self):
        for seed in range(20):
            utt = self.generate(seed, True, 0.5)
            self.assertEqual(len(utt.frame_spans), len(utt.phonemes))
            self.assertEqual(utt.frame_spans[0][0], 0)
            for (_, end), (start, _) in zip(utt.frame_spans, utt.frame_spans[1:]):
                self.assertEqual(end, start)
            self.assertEqual(utt.frame_spans[-1][1], utt.n_frames)
            for start, end in utt.frame_spans:
                self.assertTrue(3 <= end - start <= 8)
            self.assertEqual(utt.frames.shape, (utt.n_frames, 16))

    def test_l1_has_no_errors(self):
        for seed in range(20):
            utt = self.generate(seed, False, 1.0)
            self.assertEqual(sum(utt.labels), 0)
            self.assertIsNone(utt.reference)

    def test_zero_error_rate(self):
        for seed in range(20):
            utt = self.generate(seed, True, 0.0)
            self.assertEqual(sum(utt.labels), 0)
            np.testing.assert_array_equal(utt.frames, utt.reference)

    def test_labels_mark_substituted_prototypes(self):
        utt = self.generate(3, True, 1.0)
        for i, (start, end) in enumerate(utt.frame_spans):
            phoneme = utt.phonemes[i]
            self.assertEqual(utt.labels[i], int(phoneme in self.inventory.accent_map))
            source = self.inventory.accent_map.get(phoneme, phoneme)
            noise = utt.reference[start:end] - self.inventory.prototypes[phoneme]
            np.testing.assert_allclose(
                utt.frames[start:end], self.inventory.prototypes[source] + noise, atol=1e-12
            )

    def test_full_substitution_rate_matches_coverage(self):
        labels = []
        for seed in range(600):
            labels.extend(self.generate(seed, True, 1.0, len_range=(20, 20)).labels)
        self.assertGreaterEqual(len(labels), 10 ** 4)
        self.assertAlmostEqual(float(np.mean(labels)), 8 / 32, delta=0.02)

    def test_invalid_arguments(self):
        rng = np.random.default_rng(0)
        with self.assertRaises(exceptions.ConfigError):
            generate_utterance(rng, self.inventory, True, 1.5, (8, 20), (3, 8))
        with self.assertRaises(exceptions.ConfigError):
            generate_utterance(rng, self.inventory, True, 0.5, (8, 20), (1, 8))
        with self.assertRaises(exceptions.ConfigError):
            generate_utterance(rng, self.inventory, True, 0.5, (8, 20), (3, 40))
        empty = PhonemeInventory(size=0, prototypes=np.zeros((0, 4)), noise_std=0.1)
        with self.assertRaises(exceptions.ConfigError):
            generate_utterance(rng, empty, False, 0.0, (8, 20), (3, 8))


class TestCorpus(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.params = resolve_run_config("smoke").corpus

    def tearDown(self):
        self.tmp.cleanup()

    def test_splits_and_counts(self):
        params = self.params.copy(update={"counts": SplitCounts(l1_train=100, l2_train=50, l2_test=20)})
        corpus = generate_corpus(4, params)
        self.assertEqual(len(corpus.manifest.utterances), 170)
        ids = [set(corpus.manifest.split_ids(split)) for split in SplitEnum]
        self.assertEqual([len(i) for i in ids], [100, 50, 20])
        self.assertFalse(ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        for utt in corpus.utterances(SplitEnum.L1_TRAIN):
            self.assertEqual(sum(utt.labels), 0)
        for utt in corpus.utterances(SplitEnum.L2_TEST):
            self.assertEqual(utt.reference.shape, utt.frames.shape)

    def test_same_seed_gives_identical_files(self):
        first, second = os.path.join(self.tmp.name, "a"), os.path.join(self.tmp.name, "b")
        generate_corpus(11, self.params, first, "digest")
        generate_corpus(11, self.params, second, "digest")
        names = [MANIFEST_FILE] + [frames_file(s) for s in SplitEnum]
        names += [reference_file(SplitEnum.L2_TRAIN), reference_file(SplitEnum.L2_TEST)]
        for name in names:
            self.assertTrue(
                filecmp.cmp(os.path.join(first, name), os.path.join(second, name), shallow=False),
                name,
            )

    def test_seed_changes_corpus(self):
        a = generate_corpus(1, self.params)
        b = generate_corpus(2, self.params)
        self.assertNotEqual(a.manifest.prototypes, b.manifest.prototypes)

    def test_load_matches_generated(self):
        generated = generate_corpus(5, self.params, self.tmp.name, "digest")
        loaded = load_corpus(self.tmp.name)
        self.assertEqual(loaded.manifest, generated.manifest)
        self.assertEqual(loaded.manifest.config_digest, "digest")
        for utt_id, frames in generated.frames.items():
            np.testing.assert_array_equal(loaded.frames[utt_id], frames)
        for utt_id, reference in generated.references.items():
            np.testing.assert_array_equal(loaded.references[utt_id], reference)
        inventory = loaded.inventory
        self.assertEqual(inventory.accent_map, generated.inventory.accent_map)

    def test_unknown_utterance(self):
        corpus = generate_corpus(5, self.params)
        with self.assertRaises(exceptions.NotFoundError):
            corpus.entry("missing")

    def test_nearest_prototype_oracle(self):
        params = CorpusParams(counts=SplitCounts(l1_train=40, l2_train=1, l2_test=1))
        corpus = generate_corpus(0, params)
        inventory = corpus.inventory
        standard = inventory.prototypes[: inventory.size]
        distances = pairwise_distances(standard)[~np.eye(inventory.size, dtype=bool)]
        self.assertGreater(distances.min(), 6 * inventory.noise_std)
        accuracy = nearest_prototype_accuracy(corpus.utterances(SplitEnum.L1_TRAIN), inventory)
        self.assertGreater(accuracy, 0.99)
