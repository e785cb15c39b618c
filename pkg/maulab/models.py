from enum import Enum
from typing import Dict, List, Optional, Text, Tuple

import numpy as np
from pydantic import BaseModel, Field, root_validator, validator

from maulab.nn.tensor import Tensor

UINT64_MAX = 2 ** 64 - 1


class PresetEnum(Text, Enum):
    DESK = "desk"
    PAPER = "paper"
    SMOKE = "smoke"


class SplitEnum(Text, Enum):
    L1_TRAIN = "l1-train"
    L2_TRAIN = "l2-train"
    L2_TEST = "l2-test"


class ScheduleEnum(Text, Enum):
    WARMUP = "warmup"
    CONSTANT = "constant"


class SpanMode(Text, Enum):
    DISTRACTOR = "distractor"
    MASK_TOKEN = "mask_token"


class HeadReduction(Text, Enum):
    MEAN = "mean"
    MAX = "max"


class ModelKind(Text, Enum):
    VQ = "vq"
    DETECTOR = "detector"
    CORRECTOR = "corrector"


class StrictModel(BaseModel):
    class Config:
        extra = "forbid"
        validate_assignment = True


class ArrayModel(BaseModel):
    class Config:
        arbitrary_types_allowed = True


# configs


class TrainConfig(StrictModel):
    base_lr: float = 1e-4
    schedule: ScheduleEnum = ScheduleEnum.WARMUP
    warmup_steps: int = 4000
    model_dim_for_schedule: int = 512
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    max_steps: int = 1000
    batch_size: int = 16
    log_every: int = 50
    checkpoint_every: int = 250
    grad_clip: Optional[float] = None
    seed: int = 0

    @validator("base_lr")
    def check_lr(cls, v):
        if v <= 0:
            raise ValueError(f"base_lr must be > 0, got {v}")
        return v

    @validator("adam_beta1", "adam_beta2")
    def check_beta(cls, v):
        if not 0 <= v < 1:
            raise ValueError(f"adam betas must lie in [0, 1), got {v}")
        return v

    @validator("warmup_steps", "model_dim_for_schedule", "max_steps", "batch_size", "log_every", "checkpoint_every")
    def check_positive(cls, v):
        if v < 1:
            raise ValueError(f"must be a positive integer, got {v}")
        return v

    @validator("seed")
    def check_seed(cls, v):
        if not 0 <= v <= UINT64_MAX:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {v}")
        return v


class TauAnneal(StrictModel):
    start: float = 2.0
    end: float = 0.5
    decay: float = 0.999995

    @validator("start", "end", "decay")
    def check_positive(cls, v):
        if v <= 0:
            raise ValueError(f"must be > 0, got {v}")
        return v


class VQConfig(StrictModel):
    feature_dim: int = 16
    codebook_size: int = 64
    code_dim: int = 16
    temperature: float = 1.0
    tau_anneal: Optional[TauAnneal] = None
    downsample_stride: int = 2
    downsample_kernel: int = 3
    diversity_weight: float = 0.1
    model_dim: int = 64
    ff_dim: int = 128
    heads: int = 2
    encoder_blocks: int = 1
    decoder_blocks: int = 1
    encoder_kernel: int = 7
    decoder_kernel: int = 7

    @validator("codebook_size")
    def check_codebook(cls, v):
        if v < 2:
            raise ValueError(f"codebook_size V must be >= 2, got {v}")
        return v

    @validator("temperature")
    def check_temperature(cls, v):
        if v <= 0:
            raise ValueError(f"temperature must be > 0, got {v}")
        return v

    @validator("diversity_weight")
    def check_weight(cls, v):
        if v < 0:
            raise ValueError(f"diversity_weight must be >= 0, got {v}")
        return v

    @validator("downsample_kernel", "encoder_kernel", "decoder_kernel")
    def check_odd(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError(f"kernel sizes must be odd and positive, got {v}")
        return v

    @validator("feature_dim", "code_dim", "downsample_stride", "model_dim", "ff_dim", "heads")
    def check_positive(cls, v):
        if v < 1:
            raise ValueError(f"must be a positive integer, got {v}")
        return v

    @root_validator(skip_on_failure=True)
    def check_heads(cls, values):
        if values["model_dim"] % values["heads"] != 0:
            raise ValueError(
                f"model_dim {values['model_dim']} not divisible by heads {values['heads']}"
            )
        return values

    @property
    def mask_id(self) -> int:
        return self.codebook_size


class SpanSamplerConfig(StrictModel):
    span_divisor: int = 10
    k_max: int = 10
    mode: SpanMode = SpanMode.DISTRACTOR
    max_resample: int = 16

    @validator("k_max", "span_divisor", "max_resample")
    def check_positive(cls, v):
        if v < 1:
            raise ValueError(f"must be >= 1, got {v}")
        return v


class ModelConfig(StrictModel):
    model_dim: int = 64
    ff_dim: int = 128
    heads: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 2
    front_conv_layers: int = 2
    encoder_front_kernel: int = 3
    decoder_front_kernel: int = 5
    au_vocab: int = 65
    phoneme_vocab: int = 32

    @validator("encoder_front_kernel", "decoder_front_kernel")
    def check_odd(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError(f"front conv kernels must be odd, got {v}")
        return v

    @validator("au_vocab")
    def check_vocab(cls, v):
        if v < 3:
            raise ValueError(f"au_vocab = V + 1 must be >= 3, got {v}")
        return v

    @root_validator(skip_on_failure=True)
    def check_heads(cls, values):
        if values["model_dim"] % values["heads"] != 0:
            raise ValueError(
                f"model_dim {values['model_dim']} not divisible by heads {values['heads']}"
            )
        return values

    @property
    def mask_id(self) -> int:
        return self.au_vocab - 1


class DetectionConfig(StrictModel):
    threshold: float = 0.4
    au_mask_threshold: float = 0.5
    head_reduction: HeadReduction = HeadReduction.MEAN
    sweep: List[float] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]

    @validator("threshold")
    def check_threshold(cls, v):
        if not 0 < v < 1:
            raise ValueError(f"phoneme threshold H must lie in (0, 1), got {v}")
        return v

    @validator("au_mask_threshold")
    def check_au_threshold(cls, v):
        if not 0 <= v <= 1:
            raise ValueError(f"au_mask_threshold must lie in [0, 1], got {v}")
        return v


class SplitCounts(StrictModel):
    l1_train: int = 300
    l2_train: int = 150
    l2_test: int = 60

    @validator("l1_train", "l2_train", "l2_test")
    def check_count(cls, v):
        if v < 1:
            raise ValueError(f"split counts must be >= 1, got {v}")
        return v

    def items(self) -> List[Tuple[SplitEnum, int]]:
        return [
            (SplitEnum.L1_TRAIN, self.l1_train),
            (SplitEnum.L2_TRAIN, self.l2_train),
            (SplitEnum.L2_TEST, self.l2_test),
        ]


class CorpusParams(StrictModel):
    phoneme_count: int = 32
    accent_count: int = 8
    feature_dim: int = 16
    noise_scale: float = 0.1
    min_separation: float = 0.7
    error_rate: float = 0.5
    len_range: Tuple[int, int] = (8, 20)
    dur_range: Tuple[int, int] = (3, 8)
    counts: SplitCounts = SplitCounts()

    @validator("error_rate")
    def check_rate(cls, v):
        if not 0 <= v <= 1:
            raise ValueError(f"error_rate must lie in [0, 1], got {v}")
        return v

    @validator("len_range")
    def check_len_range(cls, v):
        if v[0] < 1 or v[0] > v[1]:
            raise ValueError(f"len_range must be 1 <= lo <= hi, got {v}")
        return v

    @validator("dur_range")
    def check_dur_range(cls, v):
        if v[0] < 2 or v[1] > 32 or v[0] > v[1]:
            raise ValueError(f"dur_range must lie within [2, 32] frames, got {v}")
        return v

    @root_validator(skip_on_failure=True)
    def check_accent(cls, values):
        if values["accent_count"] > values["phoneme_count"]:
            raise ValueError("accent_count cannot exceed phoneme_count")
        if values["accent_count"] > 0 and values["phoneme_count"] < 3:
            raise ValueError("substitute prototypes need at least 3 phonemes")
        return values


class PathsConfig(StrictModel):
    corpus_dir: Text = "corpus"
    checkpoint_dir: Text = "checkpoints"
    report_dir: Text = "reports"


class RunConfig(StrictModel):
    preset: PresetEnum = PresetEnum.DESK
    seed: int = 0
    paths: PathsConfig = PathsConfig()
    corpus: CorpusParams = CorpusParams()
    vq: VQConfig = VQConfig()
    vq_train: TrainConfig
    model: ModelConfig = ModelConfig()
    detector_train: TrainConfig
    corrector_train: TrainConfig
    spans: SpanSamplerConfig = SpanSamplerConfig()
    detection: DetectionConfig = DetectionConfig()
    distractor_sources: List[SplitEnum] = [SplitEnum.L1_TRAIN, SplitEnum.L2_TRAIN]
    holdout_l1: int = 30

    @validator("seed")
    def check_seed(cls, v):
        if not 0 <= v <= UINT64_MAX:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {v}")
        return v

    @root_validator(skip_on_failure=True)
    def check_consistency(cls, values):
        vq, model, corpus = values["vq"], values["model"], values["corpus"]
        if model.au_vocab != vq.codebook_size + 1:
            raise ValueError(
                f"model.au_vocab {model.au_vocab} must equal vq.codebook_size + 1 "
                f"= {vq.codebook_size + 1}"
            )
        if model.phoneme_vocab != corpus.phoneme_count:
            raise ValueError(
                f"model.phoneme_vocab {model.phoneme_vocab} must equal "
                f"corpus.phoneme_count {corpus.phoneme_count}"
            )
        if vq.feature_dim != corpus.feature_dim:
            raise ValueError(
                f"vq.feature_dim {vq.feature_dim} must equal corpus.feature_dim {corpus.feature_dim}"
            )
        if values["holdout_l1"] >= corpus.counts.l1_train:
            raise ValueError("holdout_l1 must leave at least one l1-train utterance")
        if not values["distractor_sources"]:
            raise ValueError("distractor_sources cannot be empty")
        return values


# corpus


class PhonemeInventory(ArrayModel):
    size: int
    accent_map: Dict[int, int] = {}
    prototypes: np.ndarray  # (size + len(accent_map), F), rows >= size are substitutes
    noise_std: float

    @root_validator(skip_on_failure=True)
    def check_accent_map(cls, values):
        size, total = values["size"], values["prototypes"].shape[0]
        for key, proto in values["accent_map"].items():
            if not 0 <= key < size:
                raise ValueError(f"accent_map key {key} is not a phoneme id")
            if not 0 <= proto < total:
                raise ValueError(f"accent_map value {proto} is not a prototype id")
            if key == proto:
                raise ValueError(f"accent_map is identity on {key}")
        return values


class Utterance(ArrayModel):
    id: Text
    split: SplitEnum = SplitEnum.L1_TRAIN
    phonemes: List[int]
    frames: np.ndarray  # (L_frames, F)
    labels: List[int]
    frame_spans: List[Tuple[int, int]]
    reference: Optional[np.ndarray] = None  # L1 rendering, same durations and noise

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


class ManifestEntry(StrictModel):
    id: Text
    split: SplitEnum
    phonemes: List[int]
    labels: List[int]
    frame_spans: List[Tuple[int, int]]
    n_frames: int


class CorpusManifest(StrictModel):
    seed: int
    config_digest: Text
    params: CorpusParams
    accent_map: Dict[int, int]
    prototypes: List[List[float]]
    noise_std: float
    utterances: List[ManifestEntry]

    def split_ids(self, split: SplitEnum) -> List[Text]:
        return [u.id for u in self.utterances if u.split == split]


class AUSequence(StrictModel):
    id: Text
    units: List[int]
    split: Optional[SplitEnum] = None
    config_digest: Optional[Text] = None


# corruption


class CorruptionRecord(ArrayModel):
    original: np.ndarray  # X
    distractor: np.ndarray  # D, meaningful under mask only
    mask: np.ndarray  # M
    corrupted: np.ndarray  # C
    spans: List[Tuple[int, int]]  # (j, k)


# seq2seq


class Seq2SeqBatch(ArrayModel):
    units: np.ndarray  # (B, T) decoder input ids
    unit_mask: np.ndarray  # (B, T) bool
    phonemes: np.ndarray  # (B, L)
    phoneme_mask: np.ndarray  # (B, L) bool
    targets: Optional[np.ndarray] = None  # (B, T) original units X
    error_mask: Optional[np.ndarray] = None  # (B, T) M


class DetectorOutput(ArrayModel):
    unit_logits: Tensor  # (B, T, V + 1)
    mask_logits: Tensor  # (B, T)
    mask_probs: np.ndarray  # (B, T)
    attention: np.ndarray  # (B, h, T, L), last decoder layer cross-attention


class LossBreakdown(ArrayModel):
    total: Tensor
    ce: float
    bce: float = 0.0
    masked_ce: Optional[float] = None  # CE over positions flagged in the error mask


# inference


class AlignmentResult(ArrayModel):
    attention: np.ndarray  # (T, L), heads reduced
    scores: np.ndarray  # E_hat (L,)
    decisions: np.ndarray  # (L,) in {0, 1}
    threshold: float


class DetectionRecord(StrictModel):
    id: Text
    E_hat: List[float]
    decisions: List[int]
    H: float
    mask_probs: List[float]
    config_digest: Text = ""


class CorrectionRecord(StrictModel):
    id: Text
    units: List[int]
    input_units: List[int]
    masked: List[int]
    config_digest: Text = ""


# reports


class PRF1(StrictModel):
    tp: int = 0
    fp: int = 0
    fn: int = 0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0


class Provenance(StrictModel):
    seed: int
    config_digest: Text
    checkpoints: Dict[Text, Text] = {}


class DetectionReport(StrictModel):
    threshold: float
    utterances: int
    phonemes: int
    PRE: float
    REC: float
    F1: float
    TP: int
    FP: int
    FN: int
    positive_rate: float
    decision_rate: float
    random_baseline_F1: float
    mask_auc: Optional[float] = None
    mask_f1: Optional[float] = None
    l1_mean_score_below_h: Optional[float] = None
    per_utterance: List[Dict] = []
    provenance: Provenance


class CorrectionReport(StrictModel):
    utterances: int
    masked_positions: int
    recovery_rate: Optional[float] = None
    chance_rate: float
    copy_rate: float
    mse_corrected: List[float] = Field(default_factory=list)
    mse_uncorrected: List[float] = Field(default_factory=list)
    improved_fraction: Optional[float] = None
    provenance: Provenance
