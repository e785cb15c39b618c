"""
Pipeline stages over one workspace directory.

Stage order: generate -> train-vq -> encode -> train-detector ->
finetune-corrector -> detect -> correct -> evaluate -> report. Every stage
checks its prerequisites first and names the stage that produces a missing
artifact.
"""

import os
from typing import Dict, List, Optional, Text, Tuple

import numpy as np
from loguru import logger

from maulab import config, corpus, exceptions, loader, metrics, report, utils
from maulab.corpus import Corpus
from maulab.inference import correct as correct_utterance
from maulab.inference import detect as detect_utterance
from maulab.inference import detect_corpus
from maulab.models import (
    AUSequence,
    CorrectionRecord,
    CorrectionReport,
    DetectionRecord,
    DetectionReport,
    ModelKind,
    Provenance,
    RunConfig,
    SplitEnum,
)
from maulab.nn.checkpoint import load_checkpoint
from maulab.seq2seq import corrupted_mask_scores, finetune_corrector, load_model, train_detector
from maulab.vq import (
    decode_units,
    encode_corpus,
    load_vq,
    perplexity,
    train_vq,
    usage_histogram,
)

STAGES = [
    "generate",
    "train-vq",
    "encode",
    "train-detector",
    "finetune-corrector",
    "detect",
    "correct",
    "evaluate",
    "report",
]

EVAL_STREAM = 41


class Workspace(object):
    """file layout of one run rooted at ``root``"""

    def __init__(self, root: Text, run_config: RunConfig):
        self.root = root
        self.config = run_config
        self.digest = config.run_config_digest(run_config)
        paths = run_config.paths
        self.corpus_dir = os.path.join(root, paths.corpus_dir)
        self.checkpoint_dir = os.path.join(root, paths.checkpoint_dir)
        self.report_dir = os.path.join(root, paths.report_dir)

    @property
    def manifest_path(self) -> Text:
        return os.path.join(self.corpus_dir, corpus.MANIFEST_FILE)

    def checkpoint(self, kind: ModelKind) -> Text:
        return os.path.join(self.checkpoint_dir, f"{ModelKind(kind).value}.ckpt")

    def training_log(self, kind: ModelKind) -> Text:
        return os.path.join(self.checkpoint_dir, f"{ModelKind(kind).value}.log.csv")

    def units(self, split: SplitEnum) -> Text:
        return os.path.join(self.corpus_dir, f"{SplitEnum(split).value}.units.jsonl")

    @property
    def reference_units(self) -> Text:
        return os.path.join(self.corpus_dir, f"{SplitEnum.L2_TEST.value}.ref.units.jsonl")

    @property
    def detections(self) -> Text:
        return os.path.join(self.report_dir, "detections.jsonl")

    @property
    def holdout_detections(self) -> Text:
        return os.path.join(self.report_dir, "detections.l1-holdout.jsonl")

    @property
    def corrections(self) -> Text:
        return os.path.join(self.report_dir, "corrections.jsonl")

    @property
    def corrected_frames(self) -> Text:
        return os.path.join(self.report_dir, "corrected.frames.bin")

    def report_file(self, name: Text) -> Text:
        return os.path.join(self.report_dir, name)


def require(path: Text, stage: Text, what: Text):
    if not os.path.isfile(path):
        raise exceptions.ArtifactNotFound(
            f"missing {what}: {path}, run `maulab {stage}` first", stage
        )


def _load_corpus(ws: Workspace) -> Corpus:
    require(ws.manifest_path, "generate", "corpus manifest")
    return corpus.load_corpus(ws.corpus_dir)


def _load_units(ws: Workspace, split: SplitEnum) -> List[AUSequence]:
    require(ws.units(split), "encode", f"{SplitEnum(split).value} acoustic units")
    return loader.read_units(ws.units(split))


def _phonemes(data: Corpus) -> Dict[Text, List[int]]:
    return {entry.id: entry.phonemes for entry in data.manifest.utterances}


def _l1_partition(ws: Workspace, sequences: List[AUSequence]) -> Tuple[List[AUSequence], List[AUSequence]]:
    """(training, holdout), the holdout is the last holdout_l1 l1-train sequences"""
    cut = len(sequences) - ws.config.holdout_l1
    return sequences[:cut], sequences[cut:]


def _provenance(ws: Workspace, kinds: List[ModelKind]) -> Provenance:
    return Provenance(
        seed=ws.config.seed,
        config_digest=ws.digest,
        checkpoints={
            ModelKind(k).value: utils.file_digest(ws.checkpoint(k))
            for k in kinds
            if os.path.isfile(ws.checkpoint(k))
        },
    )


def _log_digests(ws: Workspace) -> Dict[Text, Text]:
    digests = {}
    for kind in ModelKind:
        log_path = ws.training_log(kind)
        if os.path.isfile(log_path):
            digests[f"{kind.value} log"] = loader.read_csv_digest(log_path)
    return digests


def _checkpoint_digest(path: Text, kind: ModelKind) -> Text:
    return load_checkpoint(path, kind).config_digest


# stages


def generate(ws: Workspace) -> Corpus:
    logger.info(f"generate corpus into {ws.corpus_dir}")
    return corpus.generate_corpus(ws.config.seed, ws.config.corpus, ws.corpus_dir, ws.digest)


def train_vq_stage(ws: Workspace) -> List[Dict]:
    data = _load_corpus(ws)
    utterances = data.utterances(SplitEnum.L1_TRAIN) + data.utterances(SplitEnum.L2_TRAIN)
    _, rows = train_vq(
        utterances,
        ws.config.vq,
        ws.config.vq_train,
        checkpoint_path=ws.checkpoint(ModelKind.VQ),
        log_path=ws.training_log(ModelKind.VQ),
        config_digest=ws.digest,
    )
    return rows


def encode(ws: Workspace) -> Dict[SplitEnum, List[AUSequence]]:
    require(ws.checkpoint(ModelKind.VQ), "train-vq", "vq checkpoint")
    data = _load_corpus(ws)
    model, _ = load_vq(ws.checkpoint(ModelKind.VQ))

    encoded: Dict[SplitEnum, List[AUSequence]] = {}
    for split in SplitEnum:
        encoded[split] = encode_corpus(model, data.utterances(split), ws.digest)
        loader.write_units(ws.units(split), encoded[split])

    test = data.utterances(SplitEnum.L2_TEST)
    references = [u.copy(update={"frames": u.reference}) for u in test]
    loader.write_units(ws.reference_units, encode_corpus(model, references, ws.digest))

    sequences = [seq for split in SplitEnum for seq in encoded[split]]
    counts = usage_histogram(sequences, ws.config.vq.codebook_size)
    usage = {
        "counts": counts.tolist(),
        "used_codes": int((counts > 0).sum()),
        "perplexity": perplexity(counts / counts.sum()),
        "config_digest": ws.digest,
    }
    loader.write_json(ws.report_file("codebook_usage.json"), usage)
    logger.info(
        f"codebook usage: {usage['used_codes']}/{ws.config.vq.codebook_size} codes, "
        f"perplexity {usage['perplexity']:.2f}"
    )
    return encoded


def _distractor_pool(ws: Workspace, training: List[AUSequence]) -> List[AUSequence]:
    pool: List[AUSequence] = []
    for split in ws.config.distractor_sources:
        pool.extend(training if split == SplitEnum.L1_TRAIN else _load_units(ws, split))
    return pool


def train_detector_stage(ws: Workspace) -> List[Dict]:
    data = _load_corpus(ws)
    training, _ = _l1_partition(ws, _load_units(ws, SplitEnum.L1_TRAIN))
    _, rows = train_detector(
        training,
        _phonemes(data),
        _distractor_pool(ws, training),
        ws.config.model,
        ws.config.spans,
        ws.config.detector_train,
        checkpoint_path=ws.checkpoint(ModelKind.DETECTOR),
        log_path=ws.training_log(ModelKind.DETECTOR),
        config_digest=ws.digest,
    )
    return rows


def finetune_corrector_stage(ws: Workspace) -> List[Dict]:
    require(ws.checkpoint(ModelKind.DETECTOR), "train-detector", "detector checkpoint")
    data = _load_corpus(ws)
    training, _ = _l1_partition(ws, _load_units(ws, SplitEnum.L1_TRAIN))
    _, rows = finetune_corrector(
        ws.checkpoint(ModelKind.DETECTOR),
        training,
        _phonemes(data),
        ws.config.spans,
        ws.config.corrector_train,
        expected_cfg=ws.config.model,
        checkpoint_path=ws.checkpoint(ModelKind.CORRECTOR),
        log_path=ws.training_log(ModelKind.CORRECTOR),
        config_digest=ws.digest,
    )
    return rows


def detect(ws: Workspace) -> List[DetectionRecord]:
    require(ws.checkpoint(ModelKind.DETECTOR), "train-detector", "detector checkpoint")
    data = _load_corpus(ws)
    model, _ = load_model(ws.checkpoint(ModelKind.DETECTOR), ModelKind.DETECTOR)
    phonemes = _phonemes(data)

    records = detect_corpus(
        _load_units(ws, SplitEnum.L2_TEST), phonemes, model, ws.config.detection, ws.digest
    )
    loader.write_jsonl(ws.detections, records)

    _, holdout = _l1_partition(ws, _load_units(ws, SplitEnum.L1_TRAIN))
    loader.write_jsonl(
        ws.holdout_detections,
        detect_corpus(holdout, phonemes, model, ws.config.detection, ws.digest),
    )
    return records


def correct(ws: Workspace) -> List[CorrectionRecord]:
    require(ws.checkpoint(ModelKind.CORRECTOR), "finetune-corrector", "corrector checkpoint")
    require(ws.checkpoint(ModelKind.VQ), "train-vq", "vq checkpoint")
    require(ws.detections, "detect", "detections")
    data = _load_corpus(ws)
    corrector, _ = load_model(ws.checkpoint(ModelKind.CORRECTOR), ModelKind.CORRECTOR)
    detector_cfg = None
    if os.path.isfile(ws.checkpoint(ModelKind.DETECTOR)):
        detector_cfg = load_model(ws.checkpoint(ModelKind.DETECTOR), ModelKind.DETECTOR)[0].cfg
    vq_model, _ = load_vq(ws.checkpoint(ModelKind.VQ))
    detections = {r.id: r for r in loader.read_model_lines(ws.detections, DetectionRecord)}

    def run(seq: AUSequence) -> Tuple[CorrectionRecord, np.ndarray]:
        if seq.id not in detections:
            raise exceptions.ArtifactNotFound(
                f"no detection for {seq.id}, run `maulab detect` first", "detect"
            )
        entry = data.entry(seq.id)
        return correct_utterance(
            seq,
            entry.phonemes,
            np.asarray(detections[seq.id].mask_probs),
            corrector,
            vq_model,
            ws.config.detection,
            n_frames=entry.n_frames,
            detector_cfg=detector_cfg,
            config_digest=ws.digest,
        )

    results = utils.parallel_map(run, _load_units(ws, SplitEnum.L2_TEST))
    records = [record for record, _ in results]
    loader.write_jsonl(ws.corrections, records)
    loader.write_frames(ws.corrected_frames, [(r.id, f) for r, f in results])
    masked = sum(sum(r.masked) for r in records)
    logger.info(f"corrected {len(records)} utterances, {masked} masked positions")
    return records


def evaluate(ws: Workspace) -> Tuple[DetectionReport, CorrectionReport]:
    for kind, stage in (
        (ModelKind.VQ, "train-vq"),
        (ModelKind.DETECTOR, "train-detector"),
        (ModelKind.CORRECTOR, "finetune-corrector"),
    ):
        require(ws.checkpoint(kind), stage, f"{kind.value} checkpoint")
    require(ws.detections, "detect", "detections")
    require(ws.holdout_detections, "detect", "l1 holdout detections")
    require(ws.corrections, "correct", "corrections")
    require(ws.reference_units, "encode", "reference units")

    data = _load_corpus(ws)
    test_units = _load_units(ws, SplitEnum.L2_TEST)
    detections = loader.read_model_lines(ws.detections, DetectionRecord)
    holdout_records = loader.read_model_lines(ws.holdout_detections, DetectionRecord)
    corrections = loader.read_model_lines(ws.corrections, CorrectionRecord)
    references = loader.read_units(ws.reference_units)

    digests = {
        "config": ws.digest,
        "manifest": data.manifest.config_digest,
        "units": test_units[0].config_digest if test_units else "",
        "detections": detections[0].config_digest if detections else "",
        "corrections": corrections[0].config_digest if corrections else "",
    }
    for kind in (ModelKind.VQ, ModelKind.DETECTOR, ModelKind.CORRECTOR):
        digests[kind.value] = _checkpoint_digest(ws.checkpoint(kind), kind)
    digests.update(_log_digests(ws))
    metrics.check_digests(digests)

    labels = {entry.id: entry.labels for entry in data.manifest.utterances}
    detection_cfg = ws.config.detection

    detector, _ = load_model(ws.checkpoint(ModelKind.DETECTOR), ModelKind.DETECTOR)
    training, holdout = _l1_partition(ws, _load_units(ws, SplitEnum.L1_TRAIN))
    scores, truth = corrupted_mask_scores(
        detector,
        holdout,
        _phonemes(data),
        _distractor_pool(ws, training),
        ws.config.spans,
        utils.substream(ws.config.seed, EVAL_STREAM),
    )
    auc = metrics.mask_auc(scores, truth)
    au_f1 = metrics.mask_f1(scores, truth, detection_cfg.au_mask_threshold).f1
    below = [float(np.mean(r.E_hat)) < detection_cfg.threshold for r in holdout_records]
    l1_below = float(np.mean(below)) if below else None

    provenance = _provenance(ws, [ModelKind.VQ, ModelKind.DETECTOR, ModelKind.CORRECTOR])
    detection = metrics.detection_report(detections, labels, provenance, auc, au_f1, l1_below)
    loader.write_json(ws.report_file("detection_report.json"), detection)

    sweep = metrics.threshold_sweep(
        [r.E_hat for r in detections], [labels[r.id] for r in detections], detection_cfg.sweep
    )
    sweep_csv = loader.dumps_csv_rows(sweep, ws.digest)
    utils.atomic_write(ws.report_file("threshold_sweep.csv"), sweep_csv)

    vq_model, _ = load_vq(ws.checkpoint(ModelKind.VQ))
    corrected_frames = loader.read_frames(ws.corrected_frames)
    truth_units = {seq.id: seq.units for seq in references}
    mse_corrected: Dict[Text, float] = {}
    mse_uncorrected: Dict[Text, float] = {}

    for record in corrections:
        reference = data.references[record.id]
        mse_corrected[record.id] = metrics.frame_mse(corrected_frames[record.id], reference)
        resynthesis = decode_units(vq_model, record.input_units, reference.shape[0])
        mse_uncorrected[record.id] = metrics.frame_mse(resynthesis, reference)
    with_errors = [r.id for r in corrections if any(labels[r.id])]
    correction = metrics.correction_report(
        corrections,
        truth_units,
        mse_corrected,
        mse_uncorrected,
        with_errors,
        ws.config.vq.codebook_size,
        provenance,
    )
    loader.write_json(ws.report_file("correction_report.json"), correction)

    utils.print_info(
        {
            "PRE": detection.PRE,
            "REC": detection.REC,
            "F1": detection.F1,
            "random F1": detection.random_baseline_F1,
            "mask AUC": detection.mask_auc,
            "recovery": correction.recovery_rate,
            "chance": correction.chance_rate,
        }
    )
    return detection, correction


def render_report(ws: Workspace, utt_id: Optional[Text] = None) -> List[Text]:
    """write the training curves and one alignment heatmap, returns written paths"""
    require(ws.checkpoint(ModelKind.DETECTOR), "train-detector", "detector checkpoint")
    data = _load_corpus(ws)
    test_units = {seq.id: seq for seq in _load_units(ws, SplitEnum.L2_TEST)}
    utt_id = utt_id or data.manifest.split_ids(SplitEnum.L2_TEST)[0]
    if utt_id not in test_units:
        raise exceptions.NotFoundError(f"utterance {utt_id} has no encoded units")

    digests = dict(_log_digests(ws), config=ws.digest)
    digests["detector"] = _checkpoint_digest(ws.checkpoint(ModelKind.DETECTOR), ModelKind.DETECTOR)
    metrics.check_digests(digests)

    written: List[Text] = []
    curve_columns = {
        ModelKind.VQ: ["loss", "mse", "diversity", "perplexity"],
        ModelKind.DETECTOR: ["loss", "ce", "bce", "lr"],
        ModelKind.CORRECTOR: ["loss", "ce"],
    }
    for kind, columns in curve_columns.items():
        log_path = ws.training_log(kind)
        if not os.path.isfile(log_path):
            logger.warning(f"no training log for {kind.value}, skip its curves")
            continue
        rows = loader.read_csv_rows(log_path)
        path = ws.report_file(f"curves-{kind.value}.svg")
        svg = report.render_curves(f"{kind.value} training", rows, columns, ws.digest)
        utils.atomic_write(path, svg)
        written.append(path)

    detector, _ = load_model(ws.checkpoint(ModelKind.DETECTOR), ModelKind.DETECTOR)
    entry = data.entry(utt_id)
    alignment, mask_probs = detect_utterance(
        test_units[utt_id], entry.phonemes, detector, ws.config.detection
    )
    svg = report.render_heatmap(
        utt_id,
        entry.phonemes,
        alignment.attention,
        mask_probs,
        alignment.scores,
        alignment.decisions,
        alignment.threshold,
        labels=entry.labels,
        digest=ws.digest,
    )
    path = ws.report_file(f"heatmap-{utt_id}.svg")
    utils.atomic_write(path, svg)
    written.append(path)
    logger.info(f"report written: {written}")
    return written


STAGE_FUNCTIONS = {
    "generate": generate,
    "train-vq": train_vq_stage,
    "encode": encode,
    "train-detector": train_detector_stage,
    "finetune-corrector": finetune_corrector_stage,
    "detect": detect,
    "correct": correct,
    "evaluate": evaluate,
    "report": render_report,
}


def run_stage(ws: Workspace, stage: Text, **kwargs):
    if stage not in STAGE_FUNCTIONS:
        raise exceptions.ConfigError(f"unknown stage: {stage}, choose from {STAGES}")
    logger.info(f"stage {stage} started, config digest {ws.digest[:12]}")
    result = STAGE_FUNCTIONS[stage](ws, **kwargs)
    logger.info(f"stage {stage} finished")
    return result


def run_pipeline(ws: Workspace):
    """run every stage in workflow order"""
    for stage in STAGES:
        run_stage(ws, stage)
