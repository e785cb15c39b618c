"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new Tensor; when any operand requires gradients the
result records its parents and a backward closure mapping the output gradient
to one gradient per parent. ``Tensor.backward`` walks the graph in reverse
topological order and accumulates gradients into leaf tensors.
"""

import contextlib
import math
import threading
from typing import Callable, Dict, List, Optional, Sequence, Text, Tuple, Union

import numpy as np

from maulab.exceptions import ContractError, DimensionError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """disable graph recording for the current thread"""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor(object):
    def __init__(self, data, requires_grad: bool = False, name: Text = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{op})"

    def backward(self, grad: np.ndarray = None):
        """accumulate d(self)/d(leaf) into every reachable leaf requiring gradients"""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        grads: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(_topological_order(self)):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue

            if node._backward is None:
                # leaf
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue

            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], op: Text, backward: BackwardFn) -> Tensor:
    out = Tensor(data)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(op: Text, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# elementwise arithmetic


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("div", a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        "div",
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def power(a: TensorLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(
        a.data ** exponent,
        (a,),
        "pow",
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def clamp_min(a: TensorLike, minimum: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= minimum
    return _make(np.maximum(a.data, minimum), (a,), "clamp_min", lambda g: (g * keep,))


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return _make(a.data * positive, (a,), "relu", lambda g: (g * positive,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: TensorLike) -> Tensor:
    """tanh approximation of GELU"""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner),)

    return _make(out, (a,), "gelu", backward)


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out ** 2),))


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = stable_sigmoid(a.data)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    e = np.exp(x[~positive])
    out[~positive] = e / (1.0 + e)
    return out


# reductions and shape


def tensor_sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), "sum", backward)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}")
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: TensorLike, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(
        np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inverse),)
    )


def swap_last(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a: TensorLike, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(np.array(out, dtype=np.float64), (a,), "slice", backward)


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}"
        )
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, boundaries, axis=axis))

    return _make(out, tensors, "concat", backward)


# linear algebra


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _make(out, (a, b), "matmul", backward)


# normalisation and probability


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), "softmax", backward)


def log_softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), "log_softmax", backward)


def layer_norm(x: TensorLike, gamma: TensorLike, beta: TensorLike, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError(
            f"layer_norm: input {x.shape} needs gamma/beta of shape ({width},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat * gamma.data + beta.data

    def backward(g):
        g_hat = g * gamma.data
        grad_x = (inv_std / width) * (
            width * g_hat
            - g_hat.sum(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).sum(axis=-1, keepdims=True)
        )
        grad_gamma = (g * x_hat).reshape(-1, width).sum(axis=0)
        grad_beta = g.reshape(-1, width).sum(axis=0)
        return grad_x, grad_gamma, grad_beta

    return _make(out, (x, gamma, beta), "layer_norm", backward)


def bce_with_logits(logits: TensorLike, targets: np.ndarray) -> Tensor:
    """elementwise binary cross-entropy on logits, overflow free"""
    z = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise DimensionError(f"bce_with_logits: logits {z.shape} vs targets {y.shape}")
    out = np.maximum(z.data, 0) - z.data * y + np.log1p(np.exp(-np.abs(z.data)))
    probs = stable_sigmoid(z.data)
    return _make(out, (z,), "bce_with_logits", lambda g: (g * (probs - y),))


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """forward value is exactly ``hard``, gradient flows to ``soft`` unchanged"""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise DimensionError(f"straight_through: hard {hard.shape} vs soft {soft.shape}")
    return _make(hard.copy(), (soft,), "straight_through", lambda g: (g,))


# lookup and convolution


def embedding(weight: Tensor, indices: np.ndarray) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    vocab = weight.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= vocab):
        raise DimensionError(
            f"embedding: ids must lie in [0, {vocab}), got range "
            f"[{indices.min()}, {indices.max()}]"
        )

    def backward(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, indices, g)
        return (grad,)

    return _make(weight.data[indices], (weight,), "embedding", backward)


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def _windows(length_out: int, kernel: int, stride: int) -> np.ndarray:
    return np.arange(length_out)[:, None] * stride + np.arange(kernel)[None, :]


def conv1d(
    x: TensorLike, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """x (B, L, C_in), weight (K, C_in, C_out) -> (B, L_out, C_out)"""
    x = as_tensor(x)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise DimensionError(
            f"conv1d: input {x.shape} and weight {weight.shape} are incompatible"
        )
    kernel = weight.shape[0]
    length = x.shape[1]
    length_out = conv_output_length(length, kernel, stride, padding)
    if length_out < 1:
        raise DimensionError(
            f"conv1d: input length {length} too short for kernel {kernel}, padding {padding}"
        )
    padded = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    idx = _windows(length_out, kernel, stride)
    cols = padded[:, idx, :]  # (B, L_out, K, C_in)
    out = np.einsum("blkc,kco->blo", cols, weight.data)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grad_cols = np.einsum("blo,kco->blkc", g, weight.data)
        grad_padded = np.zeros_like(padded)
        np.add.at(grad_padded, (slice(None), idx), grad_cols)
        grad_x = grad_padded[:, padding : padding + length, :]
        grad_w = np.einsum("blkc,blo->kco", cols, g)
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    return _make(out, parents, "conv1d", backward)


def depthwise_conv1d(x: TensorLike, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (B, L, C), weight (K, C), 'same' padding for odd K"""
    x = as_tensor(x)
    if x.ndim != 3 or weight.ndim != 2 or x.shape[2] != weight.shape[1]:
        raise DimensionError(
            f"depthwise_conv1d: input {x.shape} and weight {weight.shape} are incompatible"
        )
    kernel = weight.shape[0]
    padding = kernel // 2
    length = x.shape[1]
    padded = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    length_out = conv_output_length(length, kernel, 1, padding)
    idx = _windows(length_out, kernel, 1)
    cols = padded[:, idx, :]  # (B, L, K, C)
    out = np.einsum("blkc,kc->blc", cols, weight.data)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grad_cols = g[:, :, None, :] * weight.data[None, None, :, :]
        grad_padded = np.zeros_like(padded)
        np.add.at(grad_padded, (slice(None), idx), grad_cols)
        grads = [
            grad_padded[:, padding : padding + length, :],
            np.einsum("blkc,blc->kc", cols, g),
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    return _make(out, parents, "depthwise_conv1d", backward)


def conv_transpose1d(
    x: TensorLike,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """x (B, T, C_in), weight (K, C_in, C_out) -> (B, (T-1)*stride - 2*padding + K + output_padding, C_out)"""
    x = as_tensor(x)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise DimensionError(
            f"conv_transpose1d: input {x.shape} and weight {weight.shape} are incompatible"
        )
    if output_padding >= stride:
        raise DimensionError(
            f"conv_transpose1d: output_padding {output_padding} must be below stride {stride}"
        )
    batch, steps, _ = x.shape
    kernel, _, channels_out = weight.shape
    full_length = (steps - 1) * stride + kernel + output_padding
    length_out = full_length - 2 * padding
    if length_out < 1:
        raise DimensionError(f"conv_transpose1d: empty output for input {x.shape}")
    idx = _windows(steps, kernel, stride)  # (T, K)
    contrib = np.einsum("btc,kco->btko", x.data, weight.data)
    full = np.zeros((batch, full_length, channels_out))
    np.add.at(full, (slice(None), idx), contrib)
    out = full[:, padding : padding + length_out, :]
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grad_full = np.zeros((batch, full_length, channels_out))
        grad_full[:, padding : padding + length_out, :] = g
        grad_contrib = grad_full[:, idx, :]  # (B, T, K, C_out)
        grads = [
            np.einsum("btko,kco->btc", grad_contrib, weight.data),
            np.einsum("btc,btko->kco", x.data, grad_contrib),
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    return _make(out, parents, "conv_transpose1d", backward)


# gradient utilities


def gradients(loss: Tensor, params: Dict[Text, Tensor]) -> Dict[Text, np.ndarray]:
    """run backward from a scalar loss, unreachable parameters get zero gradients"""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    for param in params.values():
        param.zero_grad()
    loss.backward()
    return {
        name: param.grad if param.grad is not None else np.zeros_like(param.data)
        for name, param in params.items()
    }


def numerical_gradient(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-5) -> np.ndarray:
    """central finite-difference gradient of scalar fn() w.r.t. target.data"""
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = fn().item()
        flat[i] = original - step
        lower = fn().item()
        flat[i] = original
        grad_flat[i] = (upper - lower) / (2 * step)
    return grad


def relative_error(
    analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-7, rtol: float = 1e-4
) -> float:
    """max |a - n| over max(|a|, |n|) + atol / rtol

    Below rtol exactly when |a - n| <= atol + rtol * max(|a|, |n|).
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max(initial=0.0) / (scale + atol / rtol))


def check_gradients(
    fn: Callable[[], Tensor], params: Dict[Text, Tensor], step: float = 1e-5
) -> Dict[Text, float]:
    """relative error of analytic vs central-difference gradient per parameter"""
    analytic = gradients(fn(), params)
    return {
        name: relative_error(analytic[name], numerical_gradient(fn, param, step))
        for name, param in params.items()
    }
