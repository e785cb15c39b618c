import filecmp
import math
import os
import shutil
import tempfile
import unittest

from maulab import exceptions, loader
from maulab.config import resolve_run_config
from maulab.models import CorrectionRecord, DetectionRecord, ModelKind, SplitEnum
from maulab.nn.checkpoint import load_checkpoint
from maulab.pipeline import STAGES, Workspace, run_pipeline, run_stage


class TestPipeline(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.config = resolve_run_config("smoke", {"seed": 2})
        cls.first = Workspace(os.path.join(cls.tmp.name, "first"), cls.config)
        cls.second = Workspace(os.path.join(cls.tmp.name, "second"), cls.config)
        run_pipeline(cls.first)
        run_pipeline(cls.second)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def artifacts(self, ws: Workspace):
        paths = [ws.manifest_path, ws.reference_units, ws.detections, ws.holdout_detections]
        paths += [ws.corrections, ws.corrected_frames]
        paths += [ws.units(split) for split in SplitEnum]
        for kind in ModelKind:
            paths += [ws.checkpoint(kind), ws.training_log(kind)]
        paths += [
            ws.report_file(name)
            for name in (
                "codebook_usage.json",
                "detection_report.json",
                "correction_report.json",
                "threshold_sweep.csv",
                "curves-vq.svg",
                "curves-detector.svg",
                "curves-corrector.svg",
            )
        ]
        return paths

    def test_every_artifact_written(self):
        for path in self.artifacts(self.first):
            self.assertTrue(os.path.isfile(path), path)
        heatmaps = [n for n in os.listdir(self.first.report_dir) if n.startswith("heatmap-")]
        self.assertEqual(len(heatmaps), 1)

    def test_same_seed_gives_identical_artifacts(self):
        for ours, theirs in zip(self.artifacts(self.first), self.artifacts(self.second)):
            self.assertTrue(filecmp.cmp(ours, theirs, shallow=False), ours)

    def test_every_artifact_embeds_the_digest(self):
        ws = self.first
        for kind in ModelKind:
            self.assertEqual(loader.read_csv_digest(ws.training_log(kind)), ws.digest, kind)
            self.assertEqual(load_checkpoint(ws.checkpoint(kind), kind).config_digest, ws.digest)
        self.assertEqual(loader.read_csv_digest(ws.report_file("threshold_sweep.csv")), ws.digest)
        svgs = [name for name in os.listdir(ws.report_dir) if name.endswith(".svg")]
        self.assertEqual(len(svgs), 4)
        for name in svgs:
            self.assertEqual(loader.read_svg_digest(ws.report_file(name)), ws.digest, name)
        usage = loader.load_config_file(ws.report_file("codebook_usage.json"))
        self.assertEqual(usage["config_digest"], ws.digest)

    def test_records_cover_the_test_split(self):
        test_ids = [seq.id for seq in loader.read_units(self.first.units(SplitEnum.L2_TEST))]
        detections = loader.read_model_lines(self.first.detections, DetectionRecord)
        corrections = loader.read_model_lines(self.first.corrections, CorrectionRecord)
        self.assertEqual([r.id for r in detections], test_ids)
        self.assertEqual([r.id for r in corrections], test_ids)
        for record in detections:
            self.assertEqual(record.config_digest, self.first.digest)
            self.assertEqual(record.H, self.config.detection.threshold)
        for record in corrections:
            for unit, original, masked in zip(record.units, record.input_units, record.masked):
                if not masked:
                    self.assertEqual(unit, original)

        frames = loader.read_frames(self.first.corrected_frames)
        self.assertEqual(list(frames), test_ids)

    def test_reports(self):
        detection = loader.load_config_file(self.first.report_file("detection_report.json"))
        self.assertEqual(detection["utterances"], self.config.corpus.counts.l2_test)
        self.assertEqual(detection["provenance"]["config_digest"], self.first.digest)
        self.assertEqual(set(detection["provenance"]["checkpoints"]), {"vq", "detector", "corrector"})

        correction = loader.load_config_file(self.first.report_file("correction_report.json"))
        self.assertEqual(correction["copy_rate"], 1.0)
        self.assertEqual(correction["chance_rate"], 1 / self.config.vq.codebook_size)

        rows = loader.read_csv_rows(self.first.report_file("threshold_sweep.csv"))
        self.assertEqual([float(r["H"]) for r in rows], self.config.detection.sweep)

    def test_changed_config_is_rejected(self):
        changed = resolve_run_config("smoke", {"seed": 2, "detection": {"threshold": 0.3}})
        with self.assertRaises(exceptions.DigestMismatch):
            run_stage(Workspace(self.first.root, changed), "evaluate")

    def test_log_from_another_config_is_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = os.path.join(tmp, "copy")
            shutil.copytree(self.first.root, root)
            ws = Workspace(root, self.config)
            log_path = ws.training_log(ModelKind.DETECTOR)
            with open(log_path) as f:
                text = f.read()
            with open(log_path, "w") as f:
                f.write(text.replace(ws.digest, "0" * 64, 1))

            for stage in ("evaluate", "report"):
                with self.assertRaises(exceptions.DigestMismatch, msg=stage):
                    run_stage(ws, stage)

    def test_report_for_unknown_utterance(self):
        with self.assertRaises(exceptions.NotFoundError):
            run_stage(self.first, "report", utt_id="missing")


class TestStageDependencies(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.ws = Workspace(self.tmp.name, resolve_run_config("smoke"))

    def tearDown(self):
        self.tmp.cleanup()

    def test_missing_prerequisites_name_their_stage(self):
        expected = {
            "train-vq": "generate",
            "encode": "train-vq",
            "train-detector": "generate",
            "finetune-corrector": "train-detector",
            "detect": "train-detector",
            "correct": "finetune-corrector",
            "evaluate": "train-vq",
            "report": "train-detector",
        }
        for stage in STAGES[1:]:
            with self.assertRaises(exceptions.ArtifactNotFound, msg=stage) as cm:
                run_stage(self.ws, stage)
            self.assertEqual(cm.exception.stage, expected[stage], stage)

    def test_unknown_stage(self):
        with self.assertRaises(exceptions.ConfigError):
            run_stage(self.ws, "deploy")


@unittest.skipUnless(os.getenv("MAULAB_SLOW") == "true", "long training run")
class TestDeskPipeline(unittest.TestCase):
    def test_desk_acceptance(self):
        with tempfile.TemporaryDirectory() as tmp:
            ws = Workspace(tmp, resolve_run_config("desk"))
            run_pipeline(ws)
            detection, correction = run_stage(ws, "evaluate")
            corrector_log = loader.read_csv_rows(ws.training_log(ModelKind.CORRECTOR))

        self.assertGreaterEqual(detection.F1, 3 * detection.random_baseline_F1)
        self.assertGreater(detection.mask_auc, 0.9)
        self.assertGreaterEqual(detection.l1_mean_score_below_h, 0.9)
        self.assertLess(float(corrector_log[-1]["masked_ce"]), math.log(ws.config.model.au_vocab))
        self.assertGreaterEqual(correction.recovery_rate, 10 * correction.chance_rate)
        self.assertEqual(correction.copy_rate, 1.0)
        self.assertGreaterEqual(correction.improved_fraction, 0.8)
