"""Corpus-level scoring of detection and correction."""

from typing import Dict, List, Optional, Sequence, Text

import numpy as np
from loguru import logger
from scipy import stats

from maulab import exceptions
from maulab.models import (
    PRF1,
    CorrectionRecord,
    CorrectionReport,
    DetectionRecord,
    DetectionReport,
    Provenance,
)


def _ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator else 0.0


def prf1_from_counts(tp: int, fp: int, fn: int) -> PRF1:
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return PRF1(tp=tp, fp=fp, fn=fn, precision=precision, recall=recall, f1=f1)


def prf1(decisions: Sequence[Sequence[int]], labels: Sequence[Sequence[int]]) -> PRF1:
    """micro-averaged precision, recall and F1 over every phoneme of every utterance

    Raises:
        exceptions.ContractError: utterance count or per-utterance lengths differ

    """
    if len(decisions) != len(labels):
        raise exceptions.ContractError(
            f"{len(decisions)} decision rows vs {len(labels)} label rows"
        )
    tp = fp = fn = 0
    for index, (decided, truth) in enumerate(zip(decisions, labels)):
        decided, truth = np.asarray(decided, dtype=bool), np.asarray(truth, dtype=bool)
        if decided.shape != truth.shape:
            raise exceptions.ContractError(
                f"utterance {index}: {decided.size} decisions vs {truth.size} labels"
            )
        tp += int((decided & truth).sum())
        fp += int((decided & ~truth).sum())
        fn += int((~decided & truth).sum())
    return prf1_from_counts(tp, fp, fn)


def mask_auc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """ROC AUC as the Mann-Whitney rank statistic, ties share the mean rank

    Returns None when labels hold a single class.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if scores.shape != labels.shape:
        raise exceptions.ContractError(f"{scores.size} scores vs {labels.size} labels")
    positives = int(labels.sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        logger.warning("mask AUC undefined for single-class labels")
        return None
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - positives * (positives + 1) / 2.0) / (positives * negatives))


def mask_f1(scores: Sequence[float], labels: Sequence[int], threshold: float) -> PRF1:
    decided = np.asarray(scores, dtype=np.float64).reshape(-1) > threshold
    return prf1([decided], [np.asarray(labels).reshape(-1)])


def recovery_rate(
    corrected: Sequence[int], truth: Sequence[int], masked: Sequence[int]
) -> Optional[float]:
    """fraction of masked positions filled with the ground-truth unit, None if nothing masked"""
    corrected, truth = np.asarray(corrected), np.asarray(truth)
    masked = np.asarray(masked, dtype=bool)
    if not corrected.shape == truth.shape == masked.shape:
        raise exceptions.ContractError(
            f"recovery rate: lengths {corrected.size}, {truth.size}, {masked.size} differ"
        )
    if not masked.any():
        return None
    return float((corrected[masked] == truth[masked]).mean())


def random_baseline_f1(positive_rate: float, decision_rate: float) -> float:
    """expected F1 of a detector flagging a random share q of phonemes, positives p"""
    return _ratio(2.0 * positive_rate * decision_rate, positive_rate + decision_rate)


def frame_mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise exceptions.DimensionError(f"frame_mse: shapes {a.shape} and {b.shape} differ")
    return float(((a - b) ** 2).mean())


def threshold_sweep(
    scores: Sequence[Sequence[float]], labels: Sequence[Sequence[int]], thresholds: Sequence[float]
) -> List[Dict]:
    rows = []
    for threshold in sorted(thresholds):
        decisions = [np.asarray(s) > threshold for s in scores]
        result = prf1(decisions, labels)
        rows.append(
            {
                "H": float(threshold),
                "PRE": result.precision,
                "REC": result.recall,
                "F1": result.f1,
                "TP": result.tp,
                "FP": result.fp,
                "FN": result.fn,
                "flagged": int(sum(d.sum() for d in decisions)),
            }
        )
    return rows


def check_digests(digests: Dict[Text, Text]):
    """every artifact must come from the same resolved config

    Raises:
        exceptions.DigestMismatch: two artifacts carry different digests

    """
    present = {name: d for name, d in digests.items() if d}
    if len(set(present.values())) > 1:
        detail = ", ".join(f"{name}={d[:12]}" for name, d in sorted(present.items()))
        raise exceptions.DigestMismatch(f"artifacts come from different configs: {detail}")


def detection_report(
    records: Sequence[DetectionRecord],
    labels: Dict[Text, List[int]],
    provenance: Provenance,
    auc: Optional[float] = None,
    au_f1: Optional[float] = None,
    l1_mean_score_below_h: Optional[float] = None,
) -> DetectionReport:
    if not records:
        raise exceptions.ContractError("detection report needs at least one utterance")
    threshold = records[0].H
    decisions = [r.decisions for r in records]
    truth = [labels[r.id] for r in records]
    result = prf1(decisions, truth)

    phonemes = sum(len(t) for t in truth)
    positive_rate = _ratio(sum(sum(t) for t in truth), phonemes)
    decision_rate = _ratio(sum(sum(d) for d in decisions), phonemes)
    per_utterance = [
        {"id": r.id, "decisions": r.decisions, "labels": labels[r.id], "E_hat": r.E_hat}
        for r in records
    ]
    return DetectionReport(
        threshold=threshold,
        utterances=len(records),
        phonemes=phonemes,
        PRE=result.precision,
        REC=result.recall,
        F1=result.f1,
        TP=result.tp,
        FP=result.fp,
        FN=result.fn,
        positive_rate=positive_rate,
        decision_rate=decision_rate,
        random_baseline_F1=random_baseline_f1(positive_rate, decision_rate),
        mask_auc=auc,
        mask_f1=au_f1,
        l1_mean_score_below_h=l1_mean_score_below_h,
        per_utterance=per_utterance,
        provenance=provenance,
    )


def correction_report(
    records: Sequence[CorrectionRecord],
    truth_units: Dict[Text, List[int]],
    mse_corrected: Dict[Text, float],
    mse_uncorrected: Dict[Text, float],
    with_errors: Sequence[Text],
    codebook_size: int,
    provenance: Provenance,
) -> CorrectionReport:
    """aggregate recovery over all masked positions, copy rate over all others

    ``with_errors`` names the utterances whose ground truth holds a
    substitution; the MSE comparison is made on those only.
    """
    for r in records:
        if len(truth_units[r.id]) != len(r.units):
            raise exceptions.ContractError(f"{r.id}: ground truth and corrected lengths differ")
    corrected = [unit for r in records for unit in r.units]
    truth = [unit for r in records for unit in truth_units[r.id]]
    original = np.array([unit for r in records for unit in r.input_units], dtype=np.int64)
    masked = [flag for r in records for flag in r.masked]
    kept = ~np.asarray(masked, dtype=bool)
    copied = int((np.asarray(corrected)[kept] == original[kept]).sum())

    scored = [i for i in with_errors if i in mse_corrected]
    improved = [i for i in scored if mse_corrected[i] < mse_uncorrected[i]]
    return CorrectionReport(
        utterances=len(records),
        masked_positions=int(sum(masked)),
        recovery_rate=recovery_rate(corrected, truth, masked),
        chance_rate=1.0 / codebook_size,
        copy_rate=copied / int(kept.sum()) if kept.any() else 1.0,
        mse_corrected=[mse_corrected[i] for i in scored],
        mse_uncorrected=[mse_uncorrected[i] for i in scored],
        improved_fraction=len(improved) / len(scored) if scored else None,
        provenance=provenance,
    )
