"""
Synthetic bilingual corpus: phoneme sequences rendered as noisy frame
matrices around per-phoneme prototype vectors.

L2 utterances substitute accented phonemes with prototypes that sit midway
between two standard prototypes; each L2 utterance also keeps its L1
rendering (same durations, same noise draws) as the correction ground truth.
"""

import os
from typing import Dict, List, Optional, Text, Tuple

import numpy as np
from loguru import logger

from maulab import exceptions, loader, utils
from maulab.models import (
    CorpusManifest,
    CorpusParams,
    ManifestEntry,
    PhonemeInventory,
    SplitEnum,
    Utterance,
)

MANIFEST_FILE = "manifest.json"
MAX_PROTOTYPE_DRAWS = 10000

SPLIT_KEYS = {SplitEnum.L1_TRAIN: 0, SplitEnum.L2_TRAIN: 1, SplitEnum.L2_TEST: 2}


def frames_file(split: SplitEnum) -> Text:
    return f"{SplitEnum(split).value}.frames.bin"


def reference_file(split: SplitEnum) -> Text:
    return f"{SplitEnum(split).value}.ref.bin"


def is_l2_split(split: SplitEnum) -> bool:
    return SplitEnum(split) != SplitEnum.L1_TRAIN


def pairwise_distances(vectors: np.ndarray) -> np.ndarray:
    diff = vectors[:, None, :] - vectors[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


def _unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def build_inventory(rng: np.random.Generator, params: CorpusParams) -> PhonemeInventory:
    """draw separated unit-norm prototypes and the accent substitutes

    Substitute prototype for an accented phoneme p is the midpoint of two
    standard prototypes, both different from p.
    """
    size, dim = params.phoneme_count, params.feature_dim
    if size < 1:
        raise exceptions.ConfigError("phoneme inventory is empty")

    prototypes: List[np.ndarray] = []
    draws = 0
    while len(prototypes) < size:
        draws += 1
        if draws > MAX_PROTOTYPE_DRAWS:
            raise exceptions.CorpusError(
                f"cannot place {size} prototypes in {dim} dims with separation "
                f"{params.min_separation}"
            )
        candidate = _unit_vector(rng, dim)
        if all(np.linalg.norm(candidate - p) > params.min_separation for p in prototypes):
            prototypes.append(candidate)
    standard = np.stack(prototypes)

    accent_map: Dict[int, int] = {}
    substitutes: List[np.ndarray] = []
    accented = sorted(int(p) for p in rng.choice(size, size=params.accent_count, replace=False))
    for key in accented:
        others = np.array([p for p in range(size) if p != key])
        a, b = rng.choice(others, size=2, replace=False)
        substitutes.append((standard[a] + standard[b]) / 2.0)
        accent_map[key] = size + len(substitutes) - 1

    table = np.concatenate([standard] + ([np.stack(substitutes)] if substitutes else []))
    distances = pairwise_distances(standard)
    min_distance = float(distances[~np.eye(size, dtype=bool)].min()) if size > 1 else 1.0
    return PhonemeInventory(
        size=size,
        accent_map=accent_map,
        prototypes=table,
        noise_std=params.noise_scale * min_distance,
    )


def generate_utterance(
    rng: np.random.Generator,
    inventory: PhonemeInventory,
    is_l2: bool,
    error_rate: float,
    len_range: Tuple[int, int],
    dur_range: Tuple[int, int],
    utt_id: Text = "utt",
    split: Optional[SplitEnum] = None,
) -> Utterance:
    if inventory.size < 1:
        raise exceptions.ConfigError("phoneme inventory is empty")
    if not 0 <= error_rate <= 1:
        raise exceptions.ConfigError(f"error_rate must lie in [0, 1], got {error_rate}")
    if dur_range[0] < 2 or dur_range[1] > 32 or dur_range[0] > dur_range[1]:
        raise exceptions.ConfigError(f"dur_range must lie within [2, 32] frames, got {dur_range}")

    length = int(rng.integers(len_range[0], len_range[1] + 1))
    phonemes = rng.integers(0, inventory.size, size=length)
    durations = rng.integers(dur_range[0], dur_range[1] + 1, size=length)
    draws = rng.random(length)
    noise = rng.normal(0.0, inventory.noise_std, size=(int(durations.sum()), inventory.prototypes.shape[1]))

    mapped = np.array([int(p) in inventory.accent_map for p in phonemes], dtype=bool)
    substituted = mapped & (draws < error_rate) if is_l2 else np.zeros(length, dtype=bool)
    sources = np.array(
        [inventory.accent_map[int(p)] if sub else int(p) for p, sub in zip(phonemes, substituted)],
        dtype=np.int64,
    )

    ends = np.cumsum(durations)
    starts = ends - durations
    frame_phonemes = np.repeat(phonemes, durations)
    frame_sources = np.repeat(sources, durations)
    frames = inventory.prototypes[frame_sources] + noise
    reference = inventory.prototypes[frame_phonemes] + noise if is_l2 else None

    return Utterance(
        id=utt_id,
        split=split or (SplitEnum.L2_TRAIN if is_l2 else SplitEnum.L1_TRAIN),
        phonemes=[int(p) for p in phonemes],
        frames=frames,
        labels=[int(s) for s in substituted],
        frame_spans=[(int(s), int(e)) for s, e in zip(starts, ends)],
        reference=reference,
    )


class Corpus(object):
    """A loaded corpus directory: manifest plus frames of every split."""

    def __init__(self, manifest: CorpusManifest, frames: Dict[Text, np.ndarray], references: Dict[Text, np.ndarray]):
        self.manifest = manifest
        self.frames = frames
        self.references = references
        self.__entries = {entry.id: entry for entry in manifest.utterances}

    @property
    def inventory(self) -> PhonemeInventory:
        return PhonemeInventory(
            size=self.manifest.params.phoneme_count,
            accent_map=self.manifest.accent_map,
            prototypes=np.asarray(self.manifest.prototypes, dtype=np.float64),
            noise_std=self.manifest.noise_std,
        )

    def entry(self, utt_id: Text) -> ManifestEntry:
        try:
            return self.__entries[utt_id]
        except KeyError:
            raise exceptions.NotFoundError(f"utterance not in corpus: {utt_id}")

    def utterance(self, utt_id: Text) -> Utterance:
        entry = self.entry(utt_id)
        return Utterance(
            id=entry.id,
            split=entry.split,
            phonemes=entry.phonemes,
            frames=self.frames[entry.id],
            labels=entry.labels,
            frame_spans=entry.frame_spans,
            reference=self.references.get(entry.id),
        )

    def utterances(self, split: SplitEnum) -> List[Utterance]:
        return [self.utterance(utt_id) for utt_id in self.manifest.split_ids(SplitEnum(split))]


def generate_corpus(
    seed: int, params: CorpusParams, out_dir: Text = None, config_digest: Text = ""
) -> Corpus:
    """generate every split as a pure function of (seed, params)

    Each utterance draws from its own substream (seed, split, index), so
    generation order and worker count never change the result. When out_dir
    is given, writes manifest.json, <split>.frames.bin and, for L2 splits,
    <split>.ref.bin.
    """
    inventory = build_inventory(utils.substream(seed, 0), params)
    logger.info(
        f"inventory: {inventory.size} phonemes, {len(inventory.accent_map)} accented, "
        f"noise std {inventory.noise_std:.4f}"
    )

    jobs = [
        (split, index)
        for split, count in params.counts.items()
        for index in range(count)
    ]

    def render(job: Tuple[SplitEnum, int]) -> Utterance:
        split, index = job
        return generate_utterance(
            utils.substream(seed, 1, SPLIT_KEYS[split], index),
            inventory,
            is_l2_split(split),
            params.error_rate,
            params.len_range,
            params.dur_range,
            utt_id=f"{split.value}-{index:05d}",
            split=split,
        )

    utterances = utils.parallel_map(render, jobs)

    manifest = CorpusManifest(
        seed=seed,
        config_digest=config_digest,
        params=params,
        accent_map=inventory.accent_map,
        prototypes=inventory.prototypes.tolist(),
        noise_std=inventory.noise_std,
        utterances=[
            ManifestEntry(
                id=u.id,
                split=u.split,
                phonemes=u.phonemes,
                labels=u.labels,
                frame_spans=u.frame_spans,
                n_frames=u.n_frames,
            )
            for u in utterances
        ],
    )
    # frames are persisted as float32, keep the in-memory copy identical to a reload
    frames = {u.id: u.frames.astype(np.float32).astype(np.float64) for u in utterances}
    references = {
        u.id: u.reference.astype(np.float32).astype(np.float64)
        for u in utterances
        if u.reference is not None
    }
    corpus = Corpus(manifest, frames, references)

    if out_dir:
        save_corpus(corpus, out_dir)

    positives = sum(sum(u.labels) for u in utterances)
    logger.info(f"generated {len(utterances)} utterances, {positives} substituted phonemes")
    return corpus


def save_corpus(corpus: Corpus, out_dir: Text):
    for split, _ in corpus.manifest.params.counts.items():
        ids = corpus.manifest.split_ids(split)
        loader.write_frames(
            os.path.join(out_dir, frames_file(split)), [(i, corpus.frames[i]) for i in ids]
        )
        if is_l2_split(split):
            loader.write_frames(
                os.path.join(out_dir, reference_file(split)),
                [(i, corpus.references[i]) for i in ids],
            )
    loader.write_json(os.path.join(out_dir, MANIFEST_FILE), corpus.manifest)
    logger.info(f"corpus saved to {out_dir}")


def load_corpus(corpus_dir: Text) -> Corpus:
    manifest = loader.load_manifest(os.path.join(corpus_dir, MANIFEST_FILE))
    frames: Dict[Text, np.ndarray] = {}
    references: Dict[Text, np.ndarray] = {}
    for split, _ in manifest.params.counts.items():
        frames.update(loader.read_frames(os.path.join(corpus_dir, frames_file(split))))
        if is_l2_split(split):
            references.update(loader.read_frames(os.path.join(corpus_dir, reference_file(split))))

    missing = [entry.id for entry in manifest.utterances if entry.id not in frames]
    if missing:
        raise exceptions.FileFormatError(
            f"corpus {corpus_dir} lacks frames for {len(missing)} utterances, e.g. {missing[0]}"
        )
    for entry in manifest.utterances:
        if frames[entry.id].shape[0] != entry.n_frames:
            raise exceptions.FileFormatError(
                f"{entry.id} has {frames[entry.id].shape[0]} frames, manifest says {entry.n_frames}"
            )
    return Corpus(manifest, frames, references)


def nearest_prototype_accuracy(utterances: List[Utterance], inventory: PhonemeInventory) -> float:
    """fraction of frames whose nearest standard prototype is their phoneme

    Frames of substituted phonemes are skipped.
    """
    standard = inventory.prototypes[: inventory.size]
    correct = total = 0
    for utt in utterances:
        truth = np.repeat(
            np.asarray(utt.phonemes), [end - start for start, end in utt.frame_spans]
        )
        keep = np.repeat(np.asarray(utt.labels) == 0, [end - start for start, end in utt.frame_spans])
        diff = utt.frames[:, None, :] - standard[None, :, :]
        nearest = (diff ** 2).sum(axis=-1).argmin(axis=1)
        correct += int((nearest[keep] == truth[keep]).sum())
        total += int(keep.sum())
    if total == 0:
        raise exceptions.ContractError("no unsubstituted frames to classify")
    return correct / total
