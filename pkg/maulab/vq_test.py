import os
import tempfile
import unittest

import numpy as np

from maulab import exceptions
from maulab.config import resolve_run_config
from maulab.corpus import generate_corpus
from maulab.models import AUSequence, SplitEnum, TauAnneal, TrainConfig, VQConfig
from maulab.nn import tensor as F
from maulab.nn.tensor import Tensor, gradients
from maulab.vq import (
    VQModel,
    decode_units,
    diversity_loss,
    encode_corpus,
    encode_utterance,
    gumbel_softmax,
    load_vq,
    perplexity,
    reconstruction_mse,
    temperature_at,
    train_vq,
    usage_histogram,
)

SMALL_VQ = VQConfig(
    feature_dim=6,
    codebook_size=8,
    code_dim=4,
    model_dim=8,
    ff_dim=16,
    heads=2,
    encoder_kernel=3,
    decoder_kernel=3,
)


class TestGumbelSoftmax(unittest.TestCase):
    def test_low_temperature_follows_argmax(self):
        logits = Tensor(np.tile([10.0, 0.0, 0.0], (10 ** 4, 1)))
        _, index = gumbel_softmax(logits, 0.01, np.random.default_rng(0))
        self.assertGreater(float((index == 0).mean()), 0.999)

    def test_uniform_logits_give_uniform_indices(self):
        draws, codes = 10 ** 4, 4
        _, index = gumbel_softmax(Tensor(np.zeros((draws, codes))), 1.0, np.random.default_rng(1))
        counts = np.bincount(index, minlength=codes)
        sigma = np.sqrt(draws * (1 / codes) * (1 - 1 / codes))
        for count in counts:
            self.assertLess(abs(count - draws / codes), 3 * sigma)

    def test_hard_forward_is_one_hot(self):
        logits = Tensor(np.random.default_rng(2).normal(size=(5, 6)))
        assignment, index = gumbel_softmax(logits, 1.0, np.random.default_rng(3), hard=True)
        np.testing.assert_array_equal(assignment.data, np.eye(6)[index])

    def test_straight_through_gradient_equals_soft_gradient(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        weights = rng.normal(size=(3, 5))

        hard, _ = gumbel_softmax(logits, 0.7, np.random.default_rng(9), hard=True)
        hard_grad = gradients((hard * weights).sum(), {"logits": logits})["logits"]
        soft, _ = gumbel_softmax(logits, 0.7, np.random.default_rng(9), hard=False)
        soft_grad = gradients((soft * weights).sum(), {"logits": logits})["logits"]
        np.testing.assert_allclose(hard_grad, soft_grad)

    def test_temperature_must_be_positive(self):
        with self.assertRaises(exceptions.ContractError):
            gumbel_softmax(Tensor(np.zeros((1, 2))), 0.0, np.random.default_rng(0))

    def test_temperature_anneal(self):
        self.assertEqual(temperature_at(100, SMALL_VQ), 1.0)
        annealed = SMALL_VQ.copy(update={"tau_anneal": TauAnneal(start=2.0, end=0.5, decay=0.5)})
        self.assertEqual(temperature_at(0, annealed), 2.0)
        self.assertEqual(temperature_at(1, annealed), 1.0)
        self.assertEqual(temperature_at(10, annealed), 0.5)


class TestDiversityLoss(unittest.TestCase):
    def test_uniform_usage(self):
        probs = Tensor(np.full((6, 8), 1 / 8))
        self.assertAlmostEqual(diversity_loss(probs).item(), 0.0, places=12)

    def test_single_code(self):
        probs = Tensor(np.tile(np.eye(8)[2], (6, 1)))
        self.assertAlmostEqual(diversity_loss(probs).item(), 7 / 8, places=12)

    def test_half_uniform(self):
        probs = Tensor(np.eye(4)[[0, 1, 0, 1]])
        self.assertAlmostEqual(diversity_loss(probs).item(), 0.5, places=12)

    def test_bounds(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            probs = F.softmax(Tensor(rng.normal(scale=3.0, size=(4, 6, 8))))
            value = diversity_loss(probs).item()
            self.assertGreaterEqual(value, -1e-12)
            self.assertLessEqual(value, 7 / 8 + 1e-12)

    def test_mask_excludes_padding(self):
        probs = Tensor(np.stack([np.eye(4)[[0, 1, 2, 3]], np.eye(4)[[0, 0, 0, 0]]]))
        mask = np.array([[True] * 4, [False] * 4])
        self.assertAlmostEqual(diversity_loss(probs, mask).item(), 0.0, places=12)

    def test_empty_rejected(self):
        with self.assertRaises(exceptions.ContractError):
            diversity_loss(Tensor(np.zeros((0, 4))))

    def test_perplexity(self):
        self.assertAlmostEqual(perplexity([0.5, 0.5, 0.0, 0.0]), 2.0)
        self.assertAlmostEqual(perplexity(np.full(8, 1 / 8)), 8.0)


class TestVQModel(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(6)
        self.model = VQModel(SMALL_VQ, np.random.default_rng(7))

    def test_unit_length(self):
        for n_frames, units in ((10, 5), (7, 4), (1, 1)):
            frames = self.rng.normal(size=(1, n_frames, 6))
            output = self.model(frames, np.array([n_frames]))
            self.assertEqual(output.units.shape, (1, units))
            self.assertEqual(output.reconstruction.shape, (1, n_frames, 6))

    def test_untrained_loss_and_gradients_finite(self):
        frames = self.rng.normal(size=(2, 9, 6))
        lengths = np.array([9, 6])
        output = self.model(frames, lengths, rng=np.random.default_rng(0), tau=1.0)
        loss = reconstruction_mse(output, frames) + diversity_loss(
            F.softmax(output.logits), output.unit_mask
        )
        self.assertTrue(np.isfinite(loss.item()))
        for name, grad in gradients(loss, self.model.named_parameters()).items():
            self.assertTrue(np.all(np.isfinite(grad)), name)

    def test_padding_does_not_change_valid_positions(self):
        short, long = self.rng.normal(size=(5, 6)), self.rng.normal(size=(9, 6))
        batch = np.zeros((2, 9, 6))
        batch[0, :5], batch[1] = short, long
        together = self.model(batch, np.array([5, 9]))
        alone = self.model(short[None], np.array([5]))
        np.testing.assert_array_equal(together.units[0, :3], alone.units[0])
        np.testing.assert_allclose(
            together.reconstruction.data[0, :5], alone.reconstruction.data[0], atol=1e-10
        )

    def test_width_mismatch(self):
        with self.assertRaises(exceptions.DimensionError):
            self.model(self.rng.normal(size=(1, 4, 5)), np.array([4]))
        with self.assertRaises(exceptions.ContractError):
            self.model(np.zeros((1, 0, 6)), np.array([0]))

    def test_encoding_is_deterministic(self):
        frames = self.rng.normal(size=(11, 6))
        self.assertEqual(encode_utterance(self.model, frames), encode_utterance(self.model, frames))

    def test_decode_units(self):
        frames = decode_units(self.model, [1, 2, 3])
        self.assertEqual(frames.shape, (6, 6))
        self.assertEqual(decode_units(self.model, [1, 2, 3], 5).shape, (5, 6))

    def test_decode_contract(self):
        for units, n_frames in (([1, 8, 2], None), ([1, -1], None), ([1, 9], None), ([], None), ([1, 2], 7)):
            with self.assertRaises(exceptions.ContractError, msg=str(units)):
                decode_units(self.model, units, n_frames)

    def test_usage_histogram(self):
        sequences = [AUSequence(id="a", units=[0, 1, 1]), AUSequence(id="b", units=[7])]
        np.testing.assert_array_equal(usage_histogram(sequences, 8), [1, 2, 0, 0, 0, 0, 0, 1])


class TestTrainVQ(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        run_config = resolve_run_config("smoke")
        self.vq_cfg = run_config.vq
        self.train_cfg = run_config.vq_train
        self.corpus = generate_corpus(0, run_config.corpus)
        self.utterances = self.corpus.utterances(SplitEnum.L1_TRAIN)

    def tearDown(self):
        self.tmp.cleanup()

    def test_checkpoint_log_and_reload(self):
        path = os.path.join(self.tmp.name, "vq.ckpt")
        log = os.path.join(self.tmp.name, "vq.log.csv")
        model, rows = train_vq(self.utterances, self.vq_cfg, self.train_cfg, path, log, "digest")

        self.assertEqual(len(rows), self.train_cfg.max_steps)
        for column in ("step", "lr", "loss", "mse", "diversity", "perplexity"):
            self.assertIn(column, rows[0])
        with open(log) as f:
            self.assertEqual(len(f.read().splitlines()), self.train_cfg.max_steps + 1)

        loaded, digest = load_vq(path)
        self.assertEqual(digest, "digest")
        self.assertEqual(loaded.cfg, self.vq_cfg)
        ours = encode_corpus(model, self.utterances)
        theirs = encode_corpus(loaded, self.utterances)
        self.assertEqual(ours, theirs)
        for utt, seq in zip(self.utterances, ours):
            self.assertEqual(seq.id, utt.id)
            self.assertEqual(len(seq.units), -(-utt.n_frames // 2))
            self.assertTrue(all(0 <= u < self.vq_cfg.codebook_size for u in seq.units))

    def test_same_seed_same_parameters(self):
        first, _ = train_vq(self.utterances, self.vq_cfg, self.train_cfg)
        second, _ = train_vq(self.utterances, self.vq_cfg, self.train_cfg)
        for name, value in first.state_dict().items():
            np.testing.assert_array_equal(second.state_dict()[name], value)

    def test_empty_corpus(self):
        with self.assertRaises(exceptions.ContractError):
            train_vq([], self.vq_cfg, self.train_cfg)

    def test_feature_mismatch(self):
        cfg = self.vq_cfg.copy(update={"feature_dim": 5})
        with self.assertRaises(exceptions.DimensionError):
            train_vq(self.utterances, cfg, self.train_cfg)


@unittest.skipUnless(os.getenv("MAULAB_SLOW") == "true", "long training run")
class TestTrainVQDesk(unittest.TestCase):
    def test_desk_training_converges(self):
        run_config = resolve_run_config("desk")
        corpus = generate_corpus(run_config.seed, run_config.corpus)
        utterances = corpus.utterances(SplitEnum.L1_TRAIN) + corpus.utterances(SplitEnum.L2_TRAIN)
        train_cfg = run_config.vq_train
        if train_cfg.max_steps < 500:
            train_cfg = train_cfg.copy(update={"max_steps": 500})
        model, rows = train_vq(utterances, run_config.vq, train_cfg)

        initial = rows[0]["mse"]
        final = float(np.mean([r["mse"] for r in rows[-20:]]))
        self.assertLessEqual(final, 0.5 * initial)
        self.assertGreater(rows[499]["perplexity"], rows[9]["perplexity"])

        averages = []
        for utt in utterances[:20]:
            units = encode_utterance(model, utt.frames)
            rendered = decode_units(model, units, utt.n_frames)
            averages.append(float(((rendered - utt.frames) ** 2).mean()))
        self.assertLess(float(np.mean(averages)), 2 * final)
