"""
Acoustic unit discovery.

    frames -> input proj -> conv/attention blocks -> strided conv (down)
           -> unit logits -> Gumbel-Softmax -> codebook -> code proj
           -> transposed conv (up) -> conv/attention blocks -> output proj

Training minimises reconstruction MSE plus a weighted diversity loss on the
batch-mean code distribution. Inference uses the noiseless argmax path.
"""

import math
from typing import Dict, List, Optional, Sequence, Text, Tuple

import numpy as np
from loguru import logger

from maulab import exceptions, utils
from maulab.models import ArrayModel, AUSequence, ModelKind, TrainConfig, Utterance, VQConfig
from maulab.nn import tensor as F
from maulab.nn.checkpoint import load_checkpoint
from maulab.nn.modules import (
    ConvTranspose1d,
    Conv1d,
    DepthwiseConv1d,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    apply_mask,
    sequence_mask,
)
from maulab.nn.tensor import Tensor, no_grad
from maulab.runner import TrainRunner

VQ_STREAM = 11


class VQOutput(ArrayModel):
    reconstruction: Tensor  # (B, L, F)
    logits: Tensor  # (B, T, V)
    assignment: Tensor  # (B, T, V), one-hot forward value on the hard path
    units: np.ndarray  # (B, T)
    frame_mask: np.ndarray  # (B, L)
    unit_mask: np.ndarray  # (B, T)


def gumbel_softmax(
    logits: Tensor, tau: float, rng: np.random.Generator, hard: bool = True
) -> Tuple[Tensor, np.ndarray]:
    """sample a relaxed one-hot code assignment over the last axis

    Returns (assignment, index); with hard=True the assignment's forward value
    is the one-hot of the index and its gradient is the soft sample's.
    """
    if tau <= 0:
        raise exceptions.ContractError(f"gumbel temperature must be > 0, got {tau}")
    uniform = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=logits.shape)
    noise = -np.log(-np.log(uniform))
    soft = F.softmax((logits + noise) * (1.0 / tau), axis=-1)
    index = soft.data.argmax(axis=-1)
    if not hard:
        return soft, index
    one_hot = np.eye(logits.shape[-1])[index]
    return F.straight_through(one_hot, soft), index


def average_assignment(probs: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """batch-mean code distribution over valid positions, shape (V,)"""
    flat = probs.reshape(-1, probs.shape[-1])
    if mask is None:
        weights = np.full((flat.shape[0], 1), 1.0 / flat.shape[0])
    else:
        valid = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
        if valid.sum() < 1:
            raise exceptions.ContractError("diversity loss needs at least one assignment")
        weights = valid / valid.sum()
    return (flat * weights).sum(axis=0)


def diversity_loss(probs: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """(V - exp(entropy(p_mean))) / V, 0 for uniform usage, (V-1)/V for one code"""
    if probs.size == 0:
        raise exceptions.ContractError("diversity loss needs at least one assignment")
    codes = probs.shape[-1]
    p_mean = average_assignment(probs, mask)
    entropy = -(p_mean * F.log(F.clamp_min(p_mean, 1e-12))).sum()
    return (codes - F.exp(entropy)) * (1.0 / codes)


def perplexity(distribution: np.ndarray) -> float:
    p = np.asarray(distribution, dtype=np.float64)
    p = p[p > 0]
    return float(np.exp(-(p * np.log(p)).sum()))


def usage_histogram(sequences: Sequence[AUSequence], codebook_size: int) -> np.ndarray:
    counts = np.zeros(codebook_size, dtype=np.int64)
    for seq in sequences:
        np.add.at(counts, np.asarray(seq.units, dtype=np.int64), 1)
    return counts


def temperature_at(step: int, cfg: VQConfig) -> float:
    if cfg.tau_anneal is None:
        return cfg.temperature
    anneal = cfg.tau_anneal
    return max(anneal.end, anneal.start * anneal.decay ** step)


def unit_length(n_frames: int, stride: int) -> int:
    return int(math.ceil(n_frames / stride))


def pad_frames(frames: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in frames], dtype=np.int64)
    batch = np.zeros((len(frames), int(lengths.max()), frames[0].shape[1]))
    for i, f in enumerate(frames):
        batch[i, : f.shape[0]] = f
    return batch, lengths


class ConvAttentionBlock(Module):
    """pre-norm residual block: depth-wise conv, self-attention, feed-forward"""

    def __init__(self, dim: int, ff_dim: int, heads: int, kernel: int, rng: np.random.Generator):
        self.conv_norm = LayerNorm(dim)
        self.conv = DepthwiseConv1d(dim, kernel, rng)
        self.attn_norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ff_norm = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, rng)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = x + apply_mask(self.conv(apply_mask(self.conv_norm(x), mask)), mask)
        h = self.attn_norm(x)
        attended, _ = self.attn(h, h, mask)
        x = x + attended
        return apply_mask(x + self.ff(self.ff_norm(x)), mask)


class VQModel(Module):
    def __init__(self, cfg: VQConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.model_dim
        self.input_proj = Linear(cfg.feature_dim, d, rng)
        self.encoder = [
            ConvAttentionBlock(d, cfg.ff_dim, cfg.heads, cfg.encoder_kernel, rng)
            for _ in range(cfg.encoder_blocks)
        ]
        self.down = Conv1d(
            d, d, cfg.downsample_kernel, rng, stride=cfg.downsample_stride,
            padding=cfg.downsample_kernel // 2,
        )
        self.unit_logits = Linear(d, cfg.codebook_size, rng)
        self.codebook = Parameter(rng.normal(0.0, 1.0, size=(cfg.codebook_size, cfg.code_dim)))
        self.code_proj = Linear(cfg.code_dim, d, rng)
        self.up = ConvTranspose1d(
            d, d, cfg.downsample_kernel, rng, stride=cfg.downsample_stride,
            padding=cfg.downsample_kernel // 2, output_padding=cfg.downsample_stride - 1,
        )
        self.decoder = [
            ConvAttentionBlock(d, cfg.ff_dim, cfg.heads, cfg.decoder_kernel, rng)
            for _ in range(cfg.decoder_blocks)
        ]
        self.output_proj = Linear(d, cfg.feature_dim, rng)

    def _check_frames(self, frames: np.ndarray):
        if frames.ndim != 3 or frames.shape[1] == 0:
            raise exceptions.ContractError(f"vq input must be non-empty (B, L, F), got {frames.shape}")
        if frames.shape[2] != self.cfg.feature_dim:
            raise exceptions.DimensionError(
                f"vq input has {frames.shape[2]} features per frame, model expects "
                f"{self.cfg.feature_dim}"
            )

    def encode_logits(self, frames: np.ndarray, lengths: np.ndarray) -> Tuple[Tensor, np.ndarray, np.ndarray]:
        self._check_frames(frames)
        frame_mask = sequence_mask(lengths, frames.shape[1])
        x = apply_mask(self.input_proj(Tensor(frames)), frame_mask)
        for block in self.encoder:
            x = block(x, frame_mask)
        x = self.down(apply_mask(x, frame_mask))
        unit_lengths = np.array([unit_length(n, self.cfg.downsample_stride) for n in lengths])
        unit_mask = sequence_mask(unit_lengths, x.shape[1])
        return self.unit_logits(x), frame_mask, unit_mask

    def decode_assignment(self, assignment: Tensor, unit_mask: np.ndarray, frame_mask: np.ndarray) -> Tensor:
        quantized = F.matmul(assignment, self.codebook)
        x = apply_mask(self.code_proj(quantized), unit_mask)
        x = self.up(x)
        length = frame_mask.shape[1]
        if x.shape[1] < length:
            raise exceptions.DimensionError(
                f"upsampled length {x.shape[1]} is shorter than {length} frames"
            )
        x = apply_mask(x[:, :length, :], frame_mask)
        for block in self.decoder:
            x = block(x, frame_mask)
        return self.output_proj(x)

    def forward(
        self,
        frames: np.ndarray,
        lengths: np.ndarray,
        rng: Optional[np.random.Generator] = None,
        tau: Optional[float] = None,
    ) -> VQOutput:
        """with rng, sample codes by straight-through Gumbel-Softmax; without, take the argmax"""
        logits, frame_mask, unit_mask = self.encode_logits(frames, lengths)
        if rng is None:
            units = logits.data.argmax(axis=-1)
            assignment = Tensor(np.eye(self.cfg.codebook_size)[units])
        else:
            assignment, units = gumbel_softmax(logits, tau or self.cfg.temperature, rng, hard=True)
        reconstruction = self.decode_assignment(assignment, unit_mask, frame_mask)
        return VQOutput(
            reconstruction=reconstruction,
            logits=logits,
            assignment=assignment,
            units=units,
            frame_mask=frame_mask,
            unit_mask=unit_mask,
        )


def reconstruction_mse(output: VQOutput, frames: np.ndarray) -> Tensor:
    """squared error averaged over valid frames and features"""
    weights = output.frame_mask.astype(np.float64)[:, :, None]
    count = weights.sum() * frames.shape[2]
    diff = output.reconstruction - frames
    return (diff * diff * weights).sum() * (1.0 / count)


def vq_losses(
    model: VQModel, frames: Sequence[np.ndarray], rng: np.random.Generator, tau: float
) -> Tuple[Tensor, Dict[Text, float]]:
    batch, lengths = pad_frames(frames)
    output = model(batch, lengths, rng=rng, tau=tau)
    mse = reconstruction_mse(output, batch)
    probs = F.softmax(output.logits, axis=-1)
    diversity = diversity_loss(probs, output.unit_mask)
    total = mse + diversity * model.cfg.diversity_weight
    p_mean = average_assignment(Tensor(probs.data), output.unit_mask).data
    return total, {
        "mse": mse.item(),
        "diversity": diversity.item(),
        "perplexity": perplexity(p_mean),
        "tau": tau,
    }


def train_vq(
    utterances: Sequence[Utterance],
    cfg: VQConfig,
    train_cfg: TrainConfig,
    checkpoint_path: Text = None,
    log_path: Text = None,
    config_digest: Text = "",
) -> Tuple[VQModel, List[Dict]]:
    """train the unit discovery model on L1 and unlabeled L2 frames

    Raises:
        exceptions.ContractError: empty corpus
        exceptions.TrainingDiverged: non-finite loss or gradient

    """
    if not utterances:
        raise exceptions.ContractError("vq training corpus is empty")
    frames = [u.frames for u in utterances]
    for utt in utterances:
        if utt.frames.shape[1] != cfg.feature_dim:
            raise exceptions.DimensionError(
                f"{utt.id} has {utt.frames.shape[1]} features, vq config expects {cfg.feature_dim}"
            )

    model = VQModel(cfg, utils.substream(train_cfg.seed, VQ_STREAM, 0))

    def step_fn(step: int, rng: np.random.Generator):
        picks = rng.integers(0, len(frames), size=train_cfg.batch_size)
        return vq_losses(model, [frames[i] for i in picks], rng, temperature_at(step, cfg))

    runner = TrainRunner("vq", model, train_cfg).with_rng(utils.substream(train_cfg.seed, VQ_STREAM, 1))
    if checkpoint_path:
        runner.with_checkpoint(checkpoint_path, ModelKind.VQ, cfg.dict(), config_digest)
    if log_path:
        runner.with_log(log_path)
    rows = runner.run(step_fn)
    return model, rows


def load_vq(path: Text) -> Tuple[VQModel, Text]:
    """rebuild a frozen VQ model, returns (model, config digest)"""
    checkpoint = load_checkpoint(path, ModelKind.VQ)
    cfg = VQConfig.parse_obj(checkpoint.config)
    model = VQModel(cfg, np.random.default_rng(0))
    model.load_state_dict(checkpoint.params)
    return model, checkpoint.config_digest


def encode_utterance(model: VQModel, frames: np.ndarray) -> List[int]:
    with no_grad():
        output = model(frames[None, :, :], np.array([frames.shape[0]]))
    return [int(u) for u in output.units[0]]


def encode_corpus(
    model: VQModel, utterances: Sequence[Utterance], config_digest: Text = ""
) -> List[AUSequence]:
    """deterministic argmax encoding, one AU sequence per utterance in input order"""
    for utt in utterances:
        if utt.frames.ndim != 2 or utt.frames.shape[1] != model.cfg.feature_dim:
            raise exceptions.DimensionError(
                f"{utt.id} frames {utt.frames.shape} do not match vq feature dim "
                f"{model.cfg.feature_dim}"
            )

    def encode(utt: Utterance) -> AUSequence:
        return AUSequence(
            id=utt.id,
            units=encode_utterance(model, utt.frames),
            split=utt.split,
            config_digest=config_digest or None,
        )

    sequences = utils.parallel_map(encode, list(utterances))
    logger.info(f"encoded {len(sequences)} utterances into acoustic units")
    return sequences


def decode_units(model: VQModel, units: Sequence[int], n_frames: int = None) -> np.ndarray:
    """render a unit sequence without MASK back to a (n_frames, F) frame matrix

    Raises:
        exceptions.ContractError: MASK or out-of-range ids in units

    """
    units = np.asarray(units, dtype=np.int64)
    codebook_size = model.cfg.codebook_size
    if units.size == 0:
        raise exceptions.ContractError("cannot decode an empty unit sequence")
    if (units == model.cfg.mask_id).any():
        raise exceptions.ContractError("MASK present in decode input, fill masks before decoding")
    if units.min() < 0 or units.max() >= codebook_size:
        raise exceptions.ContractError(f"unit ids must lie in [0, {codebook_size})")

    stride = model.cfg.downsample_stride
    n_frames = n_frames or units.size * stride
    if unit_length(n_frames, stride) != units.size:
        raise exceptions.ContractError(
            f"{units.size} units cannot render {n_frames} frames at stride {stride}"
        )
    with no_grad():
        assignment = Tensor(np.eye(codebook_size)[units][None, :, :])
        frames = model.decode_assignment(
            assignment,
            np.ones((1, units.size), dtype=bool),
            np.ones((1, n_frames), dtype=bool),
        )
    return frames.data[0]
