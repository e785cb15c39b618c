"""Parameter containers and the layers shared by the VQ and seq2seq models."""

import math
from typing import Dict, List, Optional, Text, Tuple

import numpy as np

from maulab.exceptions import CheckpointMismatch, DimensionError
from maulab.nn import tensor as F
from maulab.nn.tensor import Tensor


class Parameter(Tensor):
    """A tensor that is trained by the optimizer."""

    def __init__(self, data, name: Text = ""):
        super(Parameter, self).__init__(data, requires_grad=True, name=name)


class Module(object):
    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: Text = "") -> Dict[Text, Parameter]:
        """parameters keyed by dotted path, in attribute declaration order"""
        named: Dict[Text, Parameter] = {}
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                named[path] = value
            elif isinstance(value, Module):
                named.update(value.named_parameters(f"{path}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        named.update(item.named_parameters(f"{path}.{i}."))
                    elif isinstance(item, Parameter):
                        named[f"{path}.{i}"] = item
        return named

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters().values())

    def state_dict(self) -> Dict[Text, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[Text, np.ndarray]):
        named = self.named_parameters()
        missing = sorted(set(named) - set(state))
        unexpected = sorted(set(state) - set(named))
        if missing or unexpected:
            raise CheckpointMismatch(
                f"parameter names differ, missing: {missing}, unexpected: {unexpected}"
            )
        for name, param in named.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise CheckpointMismatch(
                    f"parameter {name} has shape {value.shape}, model expects {param.shape}"
                )
            param.data = value.copy()

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _uniform(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(_uniform(rng, in_features, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(
                f"linear: input {x.shape} does not end with {self.in_features} features"
            )
        out = F.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        self.num_embeddings = num_embeddings
        self.weight = Parameter(rng.normal(0.0, dim ** -0.5, size=(num_embeddings, dim)))

    def forward(self, indices: np.ndarray) -> Tensor:
        return F.embedding(self.weight, indices)


class Conv1d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = None,
    ):
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size
        self.weight = Parameter(_uniform(rng, fan_in, (kernel_size, in_channels, out_channels)))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv1d(Module):
    def __init__(self, channels: int, kernel_size: int, rng: np.random.Generator):
        if kernel_size % 2 == 0:
            raise DimensionError(f"depthwise kernel must be odd, got {kernel_size}")
        self.weight = Parameter(_uniform(rng, kernel_size, (kernel_size, channels)))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.depthwise_conv1d(x, self.weight, self.bias)


class ConvTranspose1d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        output_padding: int = 0,
    ):
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        fan_in = in_channels * kernel_size
        self.weight = Parameter(_uniform(rng, fan_in, (kernel_size, in_channels, out_channels)))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose1d(
            x, self.weight, self.bias, self.stride, self.padding, self.output_padding
        )


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.inner = Linear(dim, hidden, rng)
        self.outer = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.outer(F.gelu(self.inner(x)))


MASKED_SCORE = -1e9


def key_padding_bias(key_mask: Optional[np.ndarray]) -> Optional[np.ndarray]:
    """(B, S) validity mask -> additive (B, 1, 1, S) score bias"""
    if key_mask is None:
        return None
    return np.where(np.asarray(key_mask, dtype=bool), 0.0, MASKED_SCORE)[:, None, None, :]


class MultiHeadAttention(Module):
    """Scaled dot-product attention without causal masking.

    ``forward`` returns the attended values and the attention probabilities
    of shape (B, heads, T_query, T_key); padded keys get probability 0.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise DimensionError(f"attention dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.output = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(
        self, query: Tensor, memory: Tensor, key_mask: Optional[np.ndarray] = None
    ) -> Tuple[Tensor, np.ndarray]:
        q = self._split(self.query(query))
        k = self._split(self.key(memory))
        v = self._split(self.value(memory))
        scores = F.matmul(q, F.swap_last(k)) * (1.0 / math.sqrt(self.head_dim))
        bias = key_padding_bias(key_mask)
        if bias is not None:
            scores = scores + bias
        probs = F.softmax(scores, axis=-1)
        attended = F.matmul(probs, v)  # (B, h, T, d_h)
        batch, _, length, _ = attended.shape
        merged = attended.transpose(0, 2, 1, 3).reshape(batch, length, self.heads * self.head_dim)
        return self.output(merged), probs.data


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    positions = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: dim // 2])
    return table


def sequence_mask(lengths, max_length: int = None) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    max_length = int(lengths.max()) if max_length is None else max_length
    return np.arange(max_length)[None, :] < lengths[:, None]


def apply_mask(x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    """zero padded positions of a (B, L, C) tensor"""
    if mask is None:
        return x
    return x * np.asarray(mask, dtype=np.float64)[:, :, None]
