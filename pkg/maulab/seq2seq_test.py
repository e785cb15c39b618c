import math
import os
import tempfile
import unittest

import numpy as np

from maulab import exceptions
from maulab.config import resolve_run_config
from maulab.metrics import mask_auc
from maulab.models import (
    AUSequence,
    DetectorOutput,
    ModelConfig,
    ModelKind,
    ScheduleEnum,
    SpanMode,
    SpanSamplerConfig,
)
from maulab.nn.checkpoint import load_checkpoint
from maulab.nn.tensor import Tensor, check_gradients, no_grad
from maulab.seq2seq import (
    MaskedAUModel,
    collate,
    compute_loss,
    corrupted_batch,
    corrupted_mask_scores,
    finetune_corrector,
    load_model,
    train_detector,
)
from maulab.utils import file_digest

SMALL = ModelConfig(
    model_dim=8,
    ff_dim=16,
    heads=2,
    encoder_layers=1,
    decoder_layers=1,
    front_conv_layers=1,
    au_vocab=9,
    phoneme_vocab=8,
)


def synthetic_corpus(seed: int, count: int = 12):
    rng = np.random.default_rng(seed)
    sequences, phonemes = [], {}
    for i in range(count):
        utt_id = f"s{i}"
        sequences.append(AUSequence(id=utt_id, units=rng.integers(0, 8, size=int(rng.integers(12, 30))).tolist()))
        phonemes[utt_id] = rng.integers(0, 8, size=int(rng.integers(3, 8))).tolist()
    return sequences, phonemes


class TestForward(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.model = MaskedAUModel(SMALL, np.random.default_rng(1))

    def random_pair(self, units: int, phonemes: int):
        return self.rng.integers(0, 9, size=units).tolist(), self.rng.integers(0, 8, size=phonemes).tolist()

    def test_output_shapes_and_distributions(self):
        units, phonemes = self.random_pair(7, 4)
        output = self.model(collate([units], [phonemes]))
        self.assertEqual(output.unit_logits.shape, (1, 7, 9))
        self.assertEqual(output.mask_logits.shape, (1, 7))
        self.assertEqual(output.mask_probs.shape, (1, 7))
        self.assertEqual(output.attention.shape, (1, 2, 7, 4))

        probs = np.exp(output.unit_logits.data - output.unit_logits.data.max(axis=-1, keepdims=True))
        probs /= probs.sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)
        self.assertTrue(np.all((output.mask_probs >= 0) & (output.mask_probs <= 1)))
        self.assertTrue(np.all(output.attention >= 0))
        np.testing.assert_allclose(output.attention.sum(axis=-1), 1.0, atol=1e-9)

    def test_padding_invariance(self):
        units, phonemes = self.random_pair(6, 3)
        long_units, long_phonemes = self.random_pair(11, 7)
        alone = self.model(collate([units], [phonemes]))
        together = self.model(collate([units, long_units], [phonemes, long_phonemes]))

        np.testing.assert_allclose(together.unit_logits.data[0, :6], alone.unit_logits.data[0], atol=1e-10)
        np.testing.assert_allclose(together.mask_probs[0, :6], alone.mask_probs[0], atol=1e-10)
        np.testing.assert_allclose(together.attention[0, :, :6, :3], alone.attention[0], atol=1e-10)
        np.testing.assert_allclose(together.attention[0, :, :6, 3:], 0.0, atol=1e-12)

    def test_future_context_changes_past_positions(self):
        changed = 0
        for _ in range(10):
            units, phonemes = self.random_pair(8, 4)
            edited = list(units)
            edited[-1] = (edited[-1] + 1) % 9
            first = self.model(collate([units], [phonemes])).unit_logits.data[0, 0]
            second = self.model(collate([edited], [phonemes])).unit_logits.data[0, 0]
            changed += int(not np.allclose(first, second, atol=1e-12))
        self.assertEqual(changed, 10)

    def test_untrained_loss_is_finite(self):
        units, phonemes = self.random_pair(9, 5)
        batch = collate([units], [phonemes], targets=[units], error_masks=[[0] * 9])
        losses = compute_loss(self.model(batch), batch)
        self.assertTrue(np.isfinite(losses.total.item()))

    def test_contract_errors(self):
        with self.assertRaises(exceptions.ContractError):
            self.model(collate([[]], [[1, 2]]))
        with self.assertRaises(exceptions.ContractError):
            self.model(collate([[1, 2]], [[]]))
        with self.assertRaises(exceptions.ContractError):
            self.model(collate([[1, 9]], [[1]]))
        with self.assertRaises(exceptions.ContractError):
            self.model(collate([[1, 2]], [[8]]))
        with self.assertRaises(exceptions.ContractError):
            collate([[1]], [[1], [2]])
        with self.assertRaises(exceptions.ContractError):
            collate([[1, 2]], [[1]], targets=[[1]])

    def test_gradients_match_finite_differences(self):
        model = MaskedAUModel(SMALL.copy(update={"model_dim": 4, "ff_dim": 8}), np.random.default_rng(2))
        batch = collate(
            [[1, 3, 8, 2, 0], [4, 4, 1]],
            [[0, 5, 2], [7, 1]],
            targets=[[1, 3, 5, 2, 0], [4, 6, 1]],
            error_masks=[[0, 0, 1, 0, 0], [0, 1, 0]],
        )
        params = {
            name: param
            for name, param in model.named_parameters().items()
            if name.startswith(("unit_head", "mask_head", "phoneme_embed", "decoder.0.cross_attn"))
        }
        errors = check_gradients(lambda: compute_loss(model(batch), batch).total, params)
        worst = max(errors, key=errors.get)
        self.assertLess(errors[worst], 1e-4, worst)


class TestLoss(unittest.TestCase):
    def setUp(self):
        self.targets = [[1, 0, 3, 2]]
        self.mask = [[0, 1, 1, 0]]
        self.batch = collate([[1, 0, 3, 2]], [[0, 1]], targets=self.targets, error_masks=self.mask)

    def output(self, unit_logits: np.ndarray, mask_logits: np.ndarray) -> DetectorOutput:
        return DetectorOutput(
            unit_logits=Tensor(unit_logits),
            mask_logits=Tensor(mask_logits),
            mask_probs=1 / (1 + np.exp(-mask_logits)),
            attention=np.full((1, 1, 4, 2), 0.5),
        )

    def test_perfect_prediction(self):
        logits = np.full((1, 4, 65), -50.0)
        logits[0, np.arange(4), self.targets[0]] = 50.0
        mask_logits = np.where(np.array(self.mask) == 1, 50.0, -50.0)
        losses = compute_loss(self.output(logits, mask_logits), self.batch)
        self.assertLess(losses.total.item(), 1e-12)

    def test_uniform_prediction(self):
        losses = compute_loss(self.output(np.zeros((1, 4, 65)), np.zeros((1, 4))), self.batch)
        self.assertAlmostEqual(losses.ce, math.log(65), places=12)
        self.assertAlmostEqual(losses.bce, math.log(2), places=12)
        self.assertAlmostEqual(losses.total.item(), math.log(65) + math.log(2), places=12)
        self.assertAlmostEqual(losses.masked_ce, math.log(65), places=12)

    def test_masked_ce_covers_flagged_positions(self):
        logits = np.zeros((1, 4, 65))
        # confident and correct on the unflagged positions 0 and 3 only
        logits[0, [0, 3], [1, 2]] = 50.0
        losses = compute_loss(self.output(logits, np.zeros((1, 4))), self.batch)
        self.assertAlmostEqual(losses.masked_ce, math.log(65), places=12)
        self.assertAlmostEqual(losses.ce, math.log(65) / 2, places=9)

        no_mask = collate([[1, 0, 3, 2]], [[0, 1]], targets=self.targets)
        self.assertIsNone(compute_loss(self.output(logits, np.zeros((1, 4))), no_mask, False).masked_ce)

    def test_bce_decomposition(self):
        rng = np.random.default_rng(3)
        model = MaskedAUModel(SMALL, np.random.default_rng(4))
        for _ in range(10):
            units = rng.integers(0, 9, size=(2, 6))
            batch = collate(
                units.tolist(),
                [[1, 2, 3], [4, 5]],
                targets=rng.integers(0, 8, size=(2, 6)).tolist(),
                error_masks=rng.integers(0, 2, size=(2, 6)).tolist(),
            )
            output = model(batch)
            with_bce = compute_loss(output, batch, include_bce=True)
            without = compute_loss(output, batch, include_bce=False)
            self.assertEqual(without.bce, 0.0)
            self.assertAlmostEqual(with_bce.total.item() - without.total.item(), with_bce.bce, delta=1e-12)

    def test_missing_targets(self):
        output = self.output(np.zeros((1, 4, 65)), np.zeros((1, 4)))
        with self.assertRaises(exceptions.ContractError):
            compute_loss(output, collate([[1, 0, 3, 2]], [[0, 1]]))
        no_mask = collate([[1, 0, 3, 2]], [[0, 1]], targets=self.targets)
        with self.assertRaises(exceptions.ContractError):
            compute_loss(output, no_mask)
        self.assertAlmostEqual(compute_loss(output, no_mask, include_bce=False).ce, math.log(65), places=12)


class TestCorruptedBatch(unittest.TestCase):
    def test_modes(self):
        sequences, phonemes = synthetic_corpus(5)
        spans = SpanSamplerConfig()
        rng = np.random.default_rng(6)
        batch = corrupted_batch(rng, sequences[:3], phonemes, sequences, spans, 8, SpanMode.DISTRACTOR)
        for row, seq in enumerate(sequences[:3]):
            length = len(seq.units)
            np.testing.assert_array_equal(batch.targets[row, :length], seq.units)
            self.assertTrue(batch.unit_mask[row, :length].all())
            self.assertFalse(batch.unit_mask[row, length:].any())
            keep = batch.error_mask[row, :length] == 0
            np.testing.assert_array_equal(batch.units[row, :length][keep], np.asarray(seq.units)[keep])
        self.assertNotIn(8, batch.units[batch.unit_mask].tolist())

        masked = corrupted_batch(rng, sequences[:3], phonemes, [], spans, 8, SpanMode.MASK_TOKEN)
        hits = (masked.error_mask == 1) & masked.unit_mask
        self.assertTrue(np.all(masked.units[hits] == 8))


class TestTraining(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        run_config = resolve_run_config("smoke")
        self.cfg = run_config.model
        self.spans = run_config.spans
        self.detector_train = run_config.detector_train
        self.corrector_train = run_config.corrector_train
        self.sequences, self.phonemes = synthetic_corpus(7)

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name: str) -> str:
        return os.path.join(self.tmp.name, name)

    def train(self, log_name: str = "detector.log.csv"):
        return train_detector(
            self.sequences,
            self.phonemes,
            self.sequences,
            self.cfg,
            self.spans,
            self.detector_train,
            self.path("detector.ckpt"),
            self.path(log_name),
            "digest",
        )

    def test_detector_checkpoint_and_log(self):
        model, rows = self.train()
        self.assertEqual(len(rows), self.detector_train.max_steps)
        for column in ("step", "lr", "loss", "grad_norm", "ce", "bce", "masked_fraction", "masked_ce"):
            self.assertIn(column, rows[0])
        for row in rows:
            self.assertAlmostEqual(row["loss"], row["ce"] + row["bce"], delta=1e-9)
            self.assertTrue(0 <= row["masked_fraction"] <= 1)

        loaded, digest = load_model(self.path("detector.ckpt"), ModelKind.DETECTOR)
        self.assertEqual(digest, "digest")
        self.assertEqual(loaded.cfg, self.cfg)
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(loaded.state_dict()[name], value)
        with self.assertRaises(exceptions.CheckpointMismatch):
            load_model(self.path("detector.ckpt"), ModelKind.CORRECTOR)

    def test_same_seed_reproduces_log(self):
        self.train("first.csv")
        self.train("second.csv")
        with open(self.path("first.csv")) as a, open(self.path("second.csv")) as b:
            self.assertEqual(a.read(), b.read())

    def test_detector_input_errors(self):
        with self.assertRaises(exceptions.CorpusError):
            train_detector(self.sequences, self.phonemes, [], self.cfg, self.spans, self.detector_train)
        with self.assertRaises(exceptions.ContractError):
            train_detector([], self.phonemes, self.sequences, self.cfg, self.spans, self.detector_train)
        with self.assertRaises(exceptions.ContractError):
            train_detector(self.sequences, {}, self.sequences, self.cfg, self.spans, self.detector_train)

    def test_finetune_corrector(self):
        detector, _ = self.train()
        corrector, rows = finetune_corrector(
            self.path("detector.ckpt"),
            self.sequences,
            self.phonemes,
            self.spans,
            self.corrector_train,
            self.cfg,
            self.path("corrector.ckpt"),
            self.path("corrector.log.csv"),
            "digest",
        )
        self.assertEqual(len(rows), self.corrector_train.max_steps)
        self.assertNotIn("bce", rows[0])
        for row in rows:
            self.assertAlmostEqual(row["loss"], row["ce"], delta=1e-12)

        checkpoint = load_checkpoint(self.path("corrector.ckpt"), ModelKind.CORRECTOR)
        self.assertEqual(checkpoint.meta["detector"], file_digest(self.path("detector.ckpt")))
        self.assertEqual(checkpoint.config_digest, "digest")
        tuned = corrector.state_dict()
        self.assertTrue(any(not np.array_equal(tuned[k], v) for k, v in detector.state_dict().items()))

    def test_corrector_starts_from_detector_weights(self):
        detector, _ = self.train()
        tiny_step = self.corrector_train.copy(
            update={"max_steps": 1, "schedule": ScheduleEnum.CONSTANT, "base_lr": 1e-12}
        )
        start, _ = finetune_corrector(
            self.path("detector.ckpt"), self.sequences, self.phonemes, self.spans, tiny_step
        )
        for name, value in detector.state_dict().items():
            np.testing.assert_allclose(start.state_dict()[name], value, rtol=0, atol=1e-10)

    def test_finetune_corrector_config_mismatch(self):
        self.train()
        other = self.cfg.copy(update={"ff_dim": self.cfg.ff_dim * 2})
        with self.assertRaises(exceptions.CheckpointMismatch):
            finetune_corrector(
                self.path("detector.ckpt"), self.sequences, self.phonemes, self.spans, self.corrector_train, other
            )

    def test_corrupted_mask_scores(self):
        model, _ = self.train()
        scores, labels = corrupted_mask_scores(
            model, self.sequences[:4], self.phonemes, self.sequences, self.spans, np.random.default_rng(8)
        )
        total = sum(len(s.units) for s in self.sequences[:4])
        self.assertEqual(scores.shape, (total,))
        self.assertEqual(labels.shape, (total,))
        self.assertTrue(np.all((scores >= 0) & (scores <= 1)))
        self.assertTrue(set(labels.tolist()) <= {0, 1})


@unittest.skipUnless(os.getenv("MAULAB_SLOW") == "true", "long training run")
class TestTrainDetectorDesk(unittest.TestCase):
    def test_desk_detector_converges(self):
        from maulab.corpus import generate_corpus
        from maulab.models import SplitEnum
        from maulab.vq import encode_corpus, train_vq

        run_config = resolve_run_config("desk")
        corpus = generate_corpus(run_config.seed, run_config.corpus)
        l1 = corpus.utterances(SplitEnum.L1_TRAIN)
        vq_model, _ = train_vq(l1 + corpus.utterances(SplitEnum.L2_TRAIN), run_config.vq, run_config.vq_train)
        sequences = encode_corpus(vq_model, l1)
        phonemes = {u.id: u.phonemes for u in l1}
        training, held_out = sequences[run_config.holdout_l1 :], sequences[: run_config.holdout_l1]

        train_cfg = run_config.detector_train
        if train_cfg.max_steps < 2000:
            train_cfg = train_cfg.copy(update={"max_steps": 2000})
        model, rows = train_detector(training, phonemes, sequences, run_config.model, run_config.spans, train_cfg)
        self.assertLess(rows[1999]["loss"], 0.5 * rows[9]["loss"])

        with no_grad():
            scores, labels = corrupted_mask_scores(
                model, held_out, phonemes, training, run_config.spans, np.random.default_rng(0)
            )
        self.assertGreater(mask_auc(scores, labels), 0.9)
