"""
Phoneme-conditioned encoder-decoder over acoustic units.

The decoder reads the whole corrupted sequence at once (no causal mask) and
emits two heads per position: logits over the V + 1 unit ids and one logit
for the error mask. The detector is trained with CE + BCE on distractor
corruptions; the corrector starts from the detector weights and is
fine-tuned with CE only on MASK corruptions.
"""

import math
from typing import Dict, List, Optional, Sequence, Text, Tuple

import numpy as np
from loguru import logger

from maulab import exceptions, utils
from maulab.corruption import corrupt
from maulab.models import (
    AUSequence,
    DetectorOutput,
    LossBreakdown,
    ModelConfig,
    ModelKind,
    Seq2SeqBatch,
    SpanMode,
    SpanSamplerConfig,
    TrainConfig,
)
from maulab.nn import tensor as F
from maulab.nn.checkpoint import load_checkpoint
from maulab.nn.modules import (
    Conv1d,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    apply_mask,
    sequence_mask,
    sinusoidal_positions,
)
from maulab.nn.tensor import Tensor, no_grad
from maulab.runner import TrainRunner

DETECTOR_STREAM = 21
CORRECTOR_STREAM = 31


class FrontConv(Module):
    """residual ReLU convolutions applied before the transformer layers"""

    def __init__(self, dim: int, kernel: int, layers: int, rng: np.random.Generator):
        self.convs = [Conv1d(dim, dim, kernel, rng) for _ in range(layers)]

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        for conv in self.convs:
            x = apply_mask(x + F.relu(conv(apply_mask(x, mask))), mask)
        return x


class EncoderLayer(Module):
    def __init__(self, dim: int, ff_dim: int, heads: int, rng: np.random.Generator):
        self.attn_norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ff_norm = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, rng)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.attn_norm(x)
        attended, _ = self.attn(h, h, mask)
        x = x + attended
        return x + self.ff(self.ff_norm(x))


class DecoderLayer(Module):
    """bidirectional self-attention, cross-attention to phonemes, feed-forward"""

    def __init__(self, dim: int, ff_dim: int, heads: int, rng: np.random.Generator):
        self.self_norm = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.cross_norm = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.ff_norm = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, rng)

    def forward(
        self, x: Tensor, memory: Tensor, unit_mask: np.ndarray, phoneme_mask: np.ndarray
    ) -> Tuple[Tensor, np.ndarray]:
        h = self.self_norm(x)
        attended, _ = self.self_attn(h, h, unit_mask)
        x = x + attended
        crossed, attention = self.cross_attn(self.cross_norm(x), memory, phoneme_mask)
        x = x + crossed
        return x + self.ff(self.ff_norm(x)), attention


class MaskedAUModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.model_dim
        self.scale = math.sqrt(d)
        self.phoneme_embed = Embedding(cfg.phoneme_vocab, d, rng)
        self.encoder_front = FrontConv(d, cfg.encoder_front_kernel, cfg.front_conv_layers, rng)
        self.encoder = [EncoderLayer(d, cfg.ff_dim, cfg.heads, rng) for _ in range(cfg.encoder_layers)]
        self.encoder_norm = LayerNorm(d)
        self.unit_embed = Embedding(cfg.au_vocab, d, rng)
        self.decoder_front = FrontConv(d, cfg.decoder_front_kernel, cfg.front_conv_layers, rng)
        self.decoder = [DecoderLayer(d, cfg.ff_dim, cfg.heads, rng) for _ in range(cfg.decoder_layers)]
        self.decoder_norm = LayerNorm(d)
        self.unit_head = Linear(d, cfg.au_vocab, rng)
        self.mask_head = Linear(d, 1, rng)

    def _check_batch(self, batch: Seq2SeqBatch):
        units, phonemes = np.asarray(batch.units), np.asarray(batch.phonemes)
        if units.ndim != 2 or units.shape[1] == 0 or not np.asarray(batch.unit_mask).any(axis=1).all():
            raise exceptions.ContractError("corrupted unit sequence C is empty")
        if phonemes.ndim != 2 or phonemes.shape[1] == 0 or not np.asarray(batch.phoneme_mask).any(axis=1).all():
            raise exceptions.ContractError("phoneme sequence P is empty")
        if units.min() < 0 or units.max() >= self.cfg.au_vocab:
            raise exceptions.ContractError(
                f"unit ids must lie in [0, {self.cfg.au_vocab}), got [{units.min()}, {units.max()}]"
            )
        if phonemes.min() < 0 or phonemes.max() >= self.cfg.phoneme_vocab:
            raise exceptions.ContractError(
                f"phoneme ids must lie in [0, {self.cfg.phoneme_vocab}), "
                f"got [{phonemes.min()}, {phonemes.max()}]"
            )

    def _embed(self, embedding: Embedding, ids: np.ndarray, front: FrontConv, mask: np.ndarray) -> Tensor:
        x = apply_mask(embedding(ids) * self.scale, mask)
        x = front(x, mask)
        return x + sinusoidal_positions(ids.shape[1], self.cfg.model_dim)[None, :, :]

    def encode(self, phonemes: np.ndarray, phoneme_mask: np.ndarray) -> Tensor:
        x = self._embed(self.phoneme_embed, phonemes, self.encoder_front, phoneme_mask)
        for layer in self.encoder:
            x = layer(x, phoneme_mask)
        return self.encoder_norm(x)

    def forward(self, batch: Seq2SeqBatch) -> DetectorOutput:
        self._check_batch(batch)
        memory = self.encode(batch.phonemes, batch.phoneme_mask)
        x = self._embed(self.unit_embed, batch.units, self.decoder_front, batch.unit_mask)
        attention = None
        for layer in self.decoder:
            x, attention = layer(x, memory, batch.unit_mask, batch.phoneme_mask)
        x = self.decoder_norm(x)

        unit_logits = self.unit_head(x)
        size, length = batch.units.shape
        mask_logits = self.mask_head(x).reshape(size, length)
        return DetectorOutput(
            unit_logits=unit_logits,
            mask_logits=mask_logits,
            mask_probs=F.stable_sigmoid(mask_logits.data),
            attention=attention,
        )


def collate(
    units: Sequence[Sequence[int]],
    phonemes: Sequence[Sequence[int]],
    targets: Optional[Sequence[Sequence[int]]] = None,
    error_masks: Optional[Sequence[Sequence[int]]] = None,
) -> Seq2SeqBatch:
    """pad to the longest sequence, padding id 0 under a false mask"""
    if len(units) != len(phonemes):
        raise exceptions.ContractError(f"{len(units)} unit rows vs {len(phonemes)} phoneme rows")

    def pad(rows: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
        lengths = np.array([len(r) for r in rows], dtype=np.int64)
        out = np.zeros((len(rows), max(int(lengths.max()), 1)), dtype=np.int64)
        for i, row in enumerate(rows):
            out[i, : len(row)] = row
        return out, sequence_mask(lengths, out.shape[1])

    unit_ids, unit_mask = pad(units)
    phoneme_ids, phoneme_mask = pad(phonemes)
    batch = Seq2SeqBatch(
        units=unit_ids, unit_mask=unit_mask, phonemes=phoneme_ids, phoneme_mask=phoneme_mask
    )
    for name, rows in (("targets", targets), ("error_mask", error_masks)):
        if rows is None:
            continue
        if [len(r) for r in rows] != [len(r) for r in units]:
            raise exceptions.ContractError(f"{name} lengths differ from unit lengths")
        setattr(batch, name, pad(rows)[0])
    return batch


def compute_loss(output: DetectorOutput, batch: Seq2SeqBatch, include_bce: bool = True) -> LossBreakdown:
    """mean CE over valid positions, plus mean BCE of the mask head when include_bce"""
    if batch.targets is None or (include_bce and batch.error_mask is None):
        raise exceptions.ContractError("loss needs targets X and, with BCE, the error mask M")
    if batch.targets.shape != batch.units.shape:
        raise exceptions.ContractError(
            f"targets {batch.targets.shape} do not match units {batch.units.shape}"
        )

    weights = batch.unit_mask.astype(np.float64)
    count = weights.sum()
    size, length = batch.units.shape
    log_probs = F.log_softmax(output.unit_logits, axis=-1)
    rows, cols = np.meshgrid(np.arange(size), np.arange(length), indexing="ij")
    picked = log_probs[rows, cols, batch.targets]
    ce = -(picked * weights).sum() * (1.0 / count)

    masked_ce = None
    if batch.error_mask is not None:
        flagged = batch.error_mask.astype(bool) & batch.unit_mask
        if flagged.any():
            masked_ce = float(-picked.data[flagged].mean())

    total = ce
    bce_value = 0.0
    if include_bce:
        bce = (F.bce_with_logits(output.mask_logits, batch.error_mask) * weights).sum() * (1.0 / count)
        total = ce + bce
        bce_value = bce.item()
    return LossBreakdown(total=total, ce=ce.item(), bce=bce_value, masked_ce=masked_ce)


def corrupted_batch(
    rng: np.random.Generator,
    sequences: Sequence[AUSequence],
    phonemes: Dict[Text, List[int]],
    pool: Sequence[AUSequence],
    spans: SpanSamplerConfig,
    mask_id: int,
    mode: SpanMode,
) -> Seq2SeqBatch:
    records = [corrupt(rng, seq, pool, spans, mask_id, mode) for seq in sequences]
    return collate(
        [r.corrupted for r in records],
        [phonemes[seq.id] for seq in sequences],
        targets=[r.original for r in records],
        error_masks=[r.mask for r in records],
    )


def _training_inputs(sequences: Sequence[AUSequence], phonemes: Dict[Text, List[int]]):
    if not sequences:
        raise exceptions.ContractError("training AU corpus is empty")
    missing = [s.id for s in sequences if s.id not in phonemes]
    if missing:
        raise exceptions.ContractError(f"no phonemes for {len(missing)} sequences, e.g. {missing[0]}")


def _train(
    name: Text,
    kind: ModelKind,
    model: MaskedAUModel,
    sequences: Sequence[AUSequence],
    phonemes: Dict[Text, List[int]],
    pool: Sequence[AUSequence],
    spans: SpanSamplerConfig,
    mode: SpanMode,
    include_bce: bool,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    checkpoint_path: Optional[Text],
    log_path: Optional[Text],
    config_digest: Text,
    meta: Optional[Dict] = None,
) -> List[Dict]:
    mask_id = model.cfg.mask_id

    def step_fn(step: int, step_rng: np.random.Generator):
        picks = step_rng.integers(0, len(sequences), size=train_cfg.batch_size)
        batch = corrupted_batch(
            step_rng, [sequences[i] for i in picks], phonemes, pool, spans, mask_id, mode
        )
        losses = compute_loss(model(batch), batch, include_bce)
        metrics = {"ce": losses.ce}
        if include_bce:
            metrics["bce"] = losses.bce
        masked = batch.error_mask.astype(bool) & batch.unit_mask
        metrics["masked_fraction"] = float(masked.sum() / batch.unit_mask.sum())
        metrics["masked_ce"] = losses.masked_ce if losses.masked_ce is not None else float("nan")
        return losses.total, metrics

    runner = TrainRunner(name, model, train_cfg).with_rng(rng)
    if checkpoint_path:
        runner.with_checkpoint(checkpoint_path, kind, model.cfg.dict(), config_digest, meta)
    if log_path:
        runner.with_log(log_path)
    return runner.run(step_fn)


def train_detector(
    sequences: Sequence[AUSequence],
    phonemes: Dict[Text, List[int]],
    distractor_pool: Sequence[AUSequence],
    cfg: ModelConfig,
    spans: SpanSamplerConfig,
    train_cfg: TrainConfig,
    checkpoint_path: Text = None,
    log_path: Text = None,
    config_digest: Text = "",
) -> Tuple[MaskedAUModel, List[Dict]]:
    """train on freshly corrupted L1 sequences every step, CE + BCE"""
    _training_inputs(sequences, phonemes)
    if not distractor_pool:
        raise exceptions.CorpusError("distractor pool is empty")
    model = MaskedAUModel(cfg, utils.substream(train_cfg.seed, DETECTOR_STREAM, 0))
    rows = _train(
        "detector",
        ModelKind.DETECTOR,
        model,
        sequences,
        phonemes,
        distractor_pool,
        spans,
        SpanMode.DISTRACTOR,
        True,
        train_cfg,
        utils.substream(train_cfg.seed, DETECTOR_STREAM, 1),
        checkpoint_path,
        log_path,
        config_digest,
    )
    return model, rows


def load_model(path: Text, kind: ModelKind) -> Tuple[MaskedAUModel, Text]:
    """rebuild a detector or corrector, returns (model, config digest)"""
    checkpoint = load_checkpoint(path, kind)
    cfg = ModelConfig.parse_obj(checkpoint.config)
    model = MaskedAUModel(cfg, np.random.default_rng(0))
    model.load_state_dict(checkpoint.params)
    return model, checkpoint.config_digest


def finetune_corrector(
    detector_path: Text,
    sequences: Sequence[AUSequence],
    phonemes: Dict[Text, List[int]],
    spans: SpanSamplerConfig,
    train_cfg: TrainConfig,
    expected_cfg: Optional[ModelConfig] = None,
    checkpoint_path: Text = None,
    log_path: Text = None,
    config_digest: Text = "",
) -> Tuple[MaskedAUModel, List[Dict]]:
    """start from the detector weights, MASK corruptions, CE only

    Raises:
        exceptions.CheckpointMismatch: detector config differs from expected_cfg

    """
    _training_inputs(sequences, phonemes)
    model, _ = load_model(detector_path, ModelKind.DETECTOR)
    if expected_cfg is not None and model.cfg != expected_cfg:
        raise exceptions.CheckpointMismatch(
            f"detector checkpoint {detector_path} config {model.cfg.dict()} differs from "
            f"corrector config {expected_cfg.dict()}"
        )
    logger.info(f"corrector initialised from {detector_path}")
    rows = _train(
        "corrector",
        ModelKind.CORRECTOR,
        model,
        sequences,
        phonemes,
        [],
        spans,
        SpanMode.MASK_TOKEN,
        False,
        train_cfg,
        utils.substream(train_cfg.seed, CORRECTOR_STREAM, 1),
        checkpoint_path,
        log_path,
        config_digest,
        meta={"detector": utils.file_digest(detector_path)},
    )
    return model, rows


def corrupted_mask_scores(
    model: MaskedAUModel,
    sequences: Sequence[AUSequence],
    phonemes: Dict[Text, List[int]],
    pool: Sequence[AUSequence],
    spans: SpanSamplerConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """mask-head probabilities and true M over freshly corrupted sequences"""
    scores, labels = [], []
    for seq in sequences:
        batch = corrupted_batch(
            rng, [seq], phonemes, pool, spans, model.cfg.mask_id, SpanMode.DISTRACTOR
        )
        with no_grad():
            output = model(batch)
        scores.append(output.mask_probs[0])
        labels.append(batch.error_mask[0])
    return np.concatenate(scores), np.concatenate(labels)
