"""
Detection and correction with frozen checkpoints.

Per-phoneme error score, with A the head-reduced cross-attention of the last
decoder layer (decoder position j attends to phoneme i):

    E_hat[i] = sum_j A[j, i] * M_hat[j] / sum_j A[j, i]
"""

from typing import Dict, List, Optional, Sequence, Text, Tuple

import numpy as np
from loguru import logger

from maulab import exceptions, utils
from maulab.models import (
    AlignmentResult,
    AUSequence,
    CorrectionRecord,
    DetectionConfig,
    DetectionRecord,
    HeadReduction,
    ModelConfig,
)
from maulab.nn.tensor import no_grad
from maulab.seq2seq import MaskedAUModel, collate
from maulab.vq import VQModel, decode_units


def reduce_heads(attention: np.ndarray, reduction: HeadReduction = HeadReduction.MEAN) -> np.ndarray:
    """(h, T, L) -> (T, L); a (T, L) map passes through"""
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim == 2:
        return attention
    if attention.ndim != 3:
        raise exceptions.DimensionError(f"attention must be (h, T, L) or (T, L), got {attention.shape}")
    if HeadReduction(reduction) == HeadReduction.MAX:
        return attention.max(axis=0)
    return attention.mean(axis=0)


def phoneme_error_scores(
    mask_probs: np.ndarray,
    attention: np.ndarray,
    reduction: HeadReduction = HeadReduction.MEAN,
) -> np.ndarray:
    """attention-weighted mean of the unit-level error probabilities per phoneme

    A phoneme that receives no attention mass scores 0.
    """
    mask_probs = np.asarray(mask_probs, dtype=np.float64)
    weights = reduce_heads(attention, reduction)
    if weights.shape[0] != mask_probs.shape[0]:
        raise exceptions.DimensionError(
            f"attention covers {weights.shape[0]} positions, mask has {mask_probs.shape[0]}"
        )
    mass = weights.sum(axis=0)
    weighted = weights.T @ mask_probs
    empty = mass <= 0
    if empty.any():
        logger.warning(f"phonemes {np.flatnonzero(empty).tolist()} receive no attention, score 0")
    return np.where(empty, 0.0, weighted / np.where(empty, 1.0, mass))


def align(
    mask_probs: np.ndarray, attention: np.ndarray, cfg: DetectionConfig, threshold: float = None
) -> AlignmentResult:
    threshold = cfg.threshold if threshold is None else threshold
    scores = phoneme_error_scores(mask_probs, attention, cfg.head_reduction)
    return AlignmentResult(
        attention=reduce_heads(attention, cfg.head_reduction),
        scores=scores,
        decisions=(scores > threshold).astype(np.int64),
        threshold=threshold,
    )


def detect(
    units: AUSequence, phonemes: Sequence[int], model: MaskedAUModel, cfg: DetectionConfig
) -> Tuple[AlignmentResult, np.ndarray]:
    """returns (alignment, M_hat) for one utterance

    Raises:
        exceptions.ContractError: unit or phoneme ids outside the model vocabulary

    """
    batch = collate([units.units], [list(phonemes)])
    with no_grad():
        output = model(batch)
    mask_probs = output.mask_probs[0]
    return align(mask_probs, output.attention[0], cfg), mask_probs


def detection_record(
    units: AUSequence,
    phonemes: Sequence[int],
    model: MaskedAUModel,
    cfg: DetectionConfig,
    config_digest: Text = "",
) -> Tuple[DetectionRecord, AlignmentResult]:
    alignment, mask_probs = detect(units, phonemes, model, cfg)
    record = DetectionRecord(
        id=units.id,
        E_hat=alignment.scores.tolist(),
        decisions=alignment.decisions.tolist(),
        H=alignment.threshold,
        mask_probs=mask_probs.tolist(),
        config_digest=config_digest,
    )
    return record, alignment


def detect_corpus(
    sequences: Sequence[AUSequence],
    phonemes: Dict[Text, List[int]],
    model: MaskedAUModel,
    cfg: DetectionConfig,
    config_digest: Text = "",
) -> List[DetectionRecord]:
    def run(seq: AUSequence) -> DetectionRecord:
        return detection_record(seq, phonemes[seq.id], model, cfg, config_digest)[0]

    records = utils.parallel_map(run, list(sequences))
    flagged = sum(sum(r.decisions) for r in records)
    logger.info(f"detected {flagged} mispronounced phonemes in {len(records)} utterances")
    return records


def fill_masked(
    units: Sequence[int], masked: np.ndarray, phonemes: Sequence[int], corrector: MaskedAUModel
) -> np.ndarray:
    """one non-autoregressive pass, argmax over real units at masked positions"""
    units = np.asarray(units, dtype=np.int64)
    masked = np.asarray(masked, dtype=bool)
    mask_id = corrector.cfg.mask_id
    if not masked.any():
        return units.copy()

    corrupted = np.where(masked, mask_id, units)
    batch = collate([corrupted], [list(phonemes)])
    with no_grad():
        output = corrector(batch)
    logits = output.unit_logits.data[0].copy()
    logits[:, mask_id] = -np.inf
    filled = logits.argmax(axis=-1)
    return np.where(masked, filled, units)


def correct(
    units: AUSequence,
    phonemes: Sequence[int],
    mask_probs: np.ndarray,
    corrector: MaskedAUModel,
    vq_model: VQModel,
    cfg: DetectionConfig,
    n_frames: int = None,
    detector_cfg: Optional[ModelConfig] = None,
    config_digest: Text = "",
) -> Tuple[CorrectionRecord, np.ndarray]:
    """mask positions with M_hat above au_mask_threshold, fill them, decode to frames

    Raises:
        exceptions.CheckpointMismatch: corrector and detector configs differ
        exceptions.DimensionError: mask length differs from the unit sequence

    """
    if detector_cfg is not None and detector_cfg != corrector.cfg:
        raise exceptions.CheckpointMismatch("corrector and detector model configs differ")
    mask_probs = np.asarray(mask_probs, dtype=np.float64)
    if mask_probs.shape != (len(units.units),):
        raise exceptions.DimensionError(
            f"mask has shape {mask_probs.shape}, sequence {units.id} has {len(units.units)} units"
        )

    masked = mask_probs > cfg.au_mask_threshold
    corrected = fill_masked(units.units, masked, phonemes, corrector)
    frames = decode_units(vq_model, corrected, n_frames)
    record = CorrectionRecord(
        id=units.id,
        units=corrected.tolist(),
        input_units=list(units.units),
        masked=masked.astype(np.int64).tolist(),
        config_digest=config_digest,
    )
    return record, frames
