"""Span corruption of unit sequences: C = D * M + X * (1 - M)."""

from typing import List, Sequence, Tuple

import numpy as np

from maulab import exceptions
from maulab.models import AUSequence, CorruptionRecord, SpanMode, SpanSamplerConfig

Span = Tuple[int, int]


def span_count(length: int, cfg: SpanSamplerConfig) -> int:
    return max(1, int(length / cfg.span_divisor))


def sample_spans(rng: np.random.Generator, length: int, cfg: SpanSamplerConfig) -> List[Span]:
    """n = max(1, int(T / 10)) spans (j, k), k = int(U(0, k_max)), j = int(U(0, T - k))

    Spans may overlap and k may be 0; k is capped at T.
    """
    if length < 1:
        raise exceptions.ContractError(f"span sampling needs T >= 1, got {length}")
    spans: List[Span] = []
    for _ in range(span_count(length, cfg)):
        k = min(int(rng.uniform(0, cfg.k_max)), length)
        room = length - k
        j = int(rng.uniform(0, room)) if room > 0 else 0
        spans.append((j, k))
    return spans


def span_mask(length: int, spans: Sequence[Span]) -> np.ndarray:
    mask = np.zeros(length, dtype=np.int64)
    for j, k in spans:
        mask[j : j + k] = 1
    return mask


def compose(original: np.ndarray, distractor: np.ndarray, mask: np.ndarray) -> np.ndarray:
    original, distractor, mask = np.asarray(original), np.asarray(distractor), np.asarray(mask)
    if not original.shape == distractor.shape == mask.shape:
        raise exceptions.DimensionError(
            f"compose: X {original.shape}, D {distractor.shape}, M {mask.shape} differ"
        )
    return distractor * mask + original * (1 - mask)


def _draw_segment(
    rng: np.random.Generator, pool: Sequence[AUSequence], length: int, cfg: SpanSamplerConfig
) -> np.ndarray:
    for _ in range(cfg.max_resample):
        source = pool[int(rng.integers(0, len(pool)))]
        if len(source.units) >= length:
            offset = int(rng.integers(0, len(source.units) - length + 1))
            return np.asarray(source.units[offset : offset + length], dtype=np.int64)
    raise exceptions.CorpusError(
        f"no distractor of length >= {length} found in {cfg.max_resample} draws"
    )


def corrupt(
    rng: np.random.Generator,
    sequence: AUSequence,
    distractor_pool: Sequence[AUSequence],
    cfg: SpanSamplerConfig,
    mask_id: int,
    mode: SpanMode = None,
) -> CorruptionRecord:
    """replace sampled spans by distractor segments or by MASK

    Args:
        sequence: original units X
        distractor_pool: sequences to cut distractors from, X itself is skipped
        mask_id: the MASK token id V
        mode: overrides cfg.mode

    Raises:
        exceptions.ContractError: empty X
        exceptions.CorpusError: empty pool or no pool sequence long enough

    """
    mode = SpanMode(mode or cfg.mode)
    original = np.asarray(sequence.units, dtype=np.int64)
    length = original.size
    if length == 0:
        raise exceptions.ContractError(f"cannot corrupt empty sequence {sequence.id}")

    spans = sample_spans(rng, length, cfg)
    mask = span_mask(length, spans)

    if mode == SpanMode.MASK_TOKEN:
        distractor = np.full(length, mask_id, dtype=np.int64)
    else:
        pool = [p for p in distractor_pool if p.id != sequence.id]
        if not pool:
            raise exceptions.CorpusError("distractor pool is empty")
        distractor = original.copy()
        for j, k in spans:
            if k > 0:
                distractor[j : j + k] = _draw_segment(rng, pool, k, cfg)

    corrupted = compose(original, distractor, mask)
    if not np.array_equal(corrupted * (1 - mask), original * (1 - mask)):
        raise exceptions.ContractError(f"corruption of {sequence.id} altered unmasked units")

    return CorruptionRecord(
        original=original,
        distractor=distractor,
        mask=mask,
        corrupted=corrupted,
        spans=spans,
    )

