"""Dense tensor arithmetic with reverse-mode differentiation for Dialogue Lab.

Every model computation in the package is written in terms of the `Tensor`
operations defined here. Data lives in numpy arrays; each operation records
its parents and a backward closure so that `Tensor.backward` can propagate
gradients through the recorded graph.
"""

import contextlib
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

# Added to forbidden attention logits before normalisation.
FORBID_VALUE = -1e9

DOUBLE_PRECISION_TOLERANCE = 1e-5
SINGLE_PRECISION_TOLERANCE = 1e-2

_local = threading.local()


class EmptyAttentionRowError(ValueError):
    """Raised when a softmax row has no allowed position."""


class NonFiniteLossError(FloatingPointError):
    """Raised when a perturbed loss evaluates to NaN or Inf."""


def default_dtype() -> np.dtype:
    """Return the dtype new tensors are created with on this thread."""
    return getattr(_local, 'dtype', np.dtype(np.float32))


def grad_enabled() -> bool:
    """Return True when operations on this thread record a graph."""
    return getattr(_local, 'grad_enabled', True)


@contextlib.contextmanager
def precision(dtype: Union[str, np.dtype, type]) -> Iterator[None]:
    """
    Temporarily change the default dtype for new tensors.

    Args:
        dtype: 'float32' for training or 'float64' for verification
    """
    previous = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording, e.g. during decoding."""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    """A dense array with an optional gradient and a recorded history."""

    __slots__ = ('data', 'grad', 'requires_grad', 'name', '_parents', '_backward')

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[Union[str, np.dtype]] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """
        Populate `.grad` on every leaf tensor reachable from this scalar.

        Gradients accumulate across calls until cleared with `zero_grad`.

        Raises:
            ValueError: If this tensor is not a scalar
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        pending: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(_topological_order(self)):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    # Operators

    def __add__(self, other: Any) -> 'Tensor':
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> 'Tensor':
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other: Any) -> 'Tensor':
        return add(_lift(other, self), neg(self))

    def __mul__(self, other: Any) -> 'Tensor':
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Union[int, float]) -> 'Tensor':
        return mul(self, 1.0 / other)

    def __neg__(self) -> 'Tensor':
        return neg(self)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def __getitem__(self, index: Any) -> 'Tensor':
        return take(self, index)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> 'Tensor':
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> 'Tensor':
        count = self.data.size if axis is None else self.data.shape[axis]
        return tensor_sum(self, axis, keepdims) * (1.0 / count)

    def reshape(self, *shape: int) -> 'Tensor':
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes: int) -> 'Tensor':
        return transpose(self, axes)


def as_tensor(value: Any) -> Tensor:
    """Wrap arrays and lists as constant tensors; pass tensors through."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _result(
    data: np.ndarray,
    parents: Tuple[Tensor, ...],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise and structural operations


def add(a: Any, b: Any) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)

    def backward(grad: np.ndarray):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda grad: (-grad,))


def mul(a: Any, b: Any) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)

    def backward(grad: np.ndarray):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; both operands must be at least 2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul expects operands of rank >= 2, got {a.shape} and {b.shape}")

    def backward(grad: np.ndarray):
        grad_a = grad @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ grad
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def tensor_sum(a: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    def backward(grad: np.ndarray):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.shape),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda grad: (grad.reshape(a.shape),))


def transpose(a: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda grad: (np.transpose(grad, inverse),))


def take(a: Tensor, index: Any) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""

    def backward(grad: np.ndarray):
        full = np.zeros_like(a.data)
        np.add.at(full, index, grad)
        return (full,)

    return _result(a.data[index], (a,), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation used by GPT/BERT."""
    c = math.sqrt(2.0 / math.pi)
    u = c * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)

    def backward(grad: np.ndarray):
        du = c * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result(0.5 * x.data * (1.0 + t), (x,), backward)


# Normalisation, attention and loss primitives


def masked_softmax(logits: Any, mask: Any) -> Tensor:
    """
    Softmax over the last axis restricted to allowed positions.

    Forbidden entries receive FORBID_VALUE before normalisation and are set
    to exactly zero afterwards.

    Args:
        logits: Tensor or array of shape (..., n)
        mask: Boolean allow-matrix broadcastable to the logits

    Returns:
        Probabilities with the same shape as the logits

    Raises:
        EmptyAttentionRowError: If any row allows no position
    """
    x = as_tensor(logits)
    allow = np.asarray(mask, dtype=bool)
    if allow.shape[-1] != x.shape[-1]:
        raise ValueError(f"mask length {allow.shape[-1]} does not match logits length {x.shape[-1]}")
    allow = np.broadcast_to(allow, x.shape)
    if not allow.any(axis=-1).all():
        raise EmptyAttentionRowError("empty attention row")

    shifted = x.data + np.where(allow, 0.0, FORBID_VALUE).astype(x.dtype)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    weights = np.exp(shifted) * allow
    probs = weights / weights.sum(axis=-1, keepdims=True)

    def backward(grad: np.ndarray):
        return (probs * (grad - (grad * probs).sum(axis=-1, keepdims=True)),)

    return _result(probs, (x,), backward)


def layer_norm(x: Any, gamma: Any, beta: Any, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by gamma and shift by beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centred * inv_std

    def backward(grad: np.ndarray):
        grad_normed = grad * gamma.data
        grad_x = inv_std * (
            grad_normed
            - grad_normed.mean(axis=-1, keepdims=True)
            - normed * (grad_normed * normed).mean(axis=-1, keepdims=True)
        )
        return grad_x, _unbroadcast(grad * normed, gamma.shape), _unbroadcast(grad, beta.shape)

    return _result(normed * gamma.data + beta.data, (x, gamma, beta), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Plain-array log-softmax over the last axis (no graph)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Any, targets: Any, reduction: str = 'mean') -> Tensor:
    """
    Negative log-likelihood of target ids under softmax(logits).

    Args:
        logits: Tensor of shape (..., vocab)
        targets: Integer ids of shape logits.shape[:-1]
        reduction: 'mean' or 'sum' over all target positions

    Returns:
        Scalar loss tensor

    Raises:
        ValueError: If a target id is outside the vocabulary
    """
    x = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    vocab_size = x.shape[-1]
    if targets.shape != x.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {x.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab_size):
        raise ValueError(f"target id out of range for vocabulary of size {vocab_size}")

    flat = x.data.reshape(-1, vocab_size)
    flat_targets = targets.reshape(-1)
    rows = np.arange(flat.shape[0])
    log_probs = log_softmax(flat)
    nll = -log_probs[rows, flat_targets]
    scale = 1.0 / max(len(flat_targets), 1) if reduction == 'mean' else 1.0
    if reduction not in ('mean', 'sum'):
        raise ValueError(f"unknown reduction: {reduction}")

    def backward(grad: np.ndarray):
        probs = np.exp(log_probs)
        probs[rows, flat_targets] -= 1.0
        return ((probs * (grad * scale)).reshape(x.shape),)

    return _result(np.asarray(nll.sum() * scale, dtype=x.dtype), (x,), backward)


# Verification


@dataclass
class GradCheckResult:
    """Outcome of a finite-difference gradient comparison."""

    max_relative_error: float
    tolerance: float
    coordinates_checked: int
    worst_parameter: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def finite_difference_check(
    model_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    h: float = 1e-5,
    samples_per_tensor: int = 8,
    seed: int = 0,
) -> GradCheckResult:
    """
    Compare backward-pass gradients against central differences.

    Args:
        model_fn: Zero-argument callable returning a scalar loss tensor
        params: Named parameters to perturb
        h: Perturbation size in [1e-6, 1e-4]
        samples_per_tensor: Coordinates sampled from each parameter
        seed: Seed for coordinate sampling

    Returns:
        GradCheckResult with the max relative error over sampled coordinates

    Raises:
        NonFiniteLossError: If a perturbed loss is not finite
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"perturbation h must lie in [1e-6, 1e-4], got {h}")

    tolerance = DOUBLE_PRECISION_TOLERANCE
    if any(p.dtype != np.float64 for p in params.values()):
        logger.warning(
            f"Gradient check running below double precision; tolerance widened to {SINGLE_PRECISION_TOLERANCE}"
        )
        tolerance = SINGLE_PRECISION_TOLERANCE

    for param in params.values():
        param.zero_grad()
    model_fn().backward()

    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, None, 0
    for name, param in params.items():
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        count = min(samples_per_tensor, param.data.size)
        for index in rng.choice(param.data.size, size=count, replace=False):
            original = param.data.flat[index]
            with no_grad():
                param.data.flat[index] = original + h
                loss_plus = float(model_fn().data)
                param.data.flat[index] = original - h
                loss_minus = float(model_fn().data)
            param.data.flat[index] = original
            if not (math.isfinite(loss_plus) and math.isfinite(loss_minus)):
                raise NonFiniteLossError(f"non-finite loss while perturbing {name}[{index}]")

            numeric = (loss_plus - loss_minus) / (2 * h)
            exact = float(analytic.flat[index])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            checked += 1
            if error > worst:
                worst, worst_name = error, name

    logger.debug(f"Gradient check: max relative error {worst:.3e} over {checked} coordinates ({worst_name})")
    return GradCheckResult(worst, tolerance, checked, worst_name)


# Optimisation


@dataclass
class OptimizerState:
    """Adam moments and hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, Optional[np.ndarray]],
    state: OptimizerState,
    lr: Optional[float] = None,
) -> OptimizerState:
    """
    Apply one bias-corrected Adam update in place.

    Args:
        params: Named parameters to update
        grads: Gradient per parameter name; None leaves the parameter untouched
        state: Optimizer state, updated in place and returned
        lr: Optional learning rate overriding state.lr for this step

    Returns:
        The updated optimizer state

    Raises:
        ValueError: If a gradient contains NaN or its shape does not match
    """
    for name, grad in grads.items():
        if grad is None:
            continue
        if grad.shape != params[name].shape:
            raise ValueError(f"gradient shape {grad.shape} does not match parameter {name} {params[name].shape}")
        if np.isnan(grad).any():
            raise ValueError(f"NaN gradient for parameter {name}")

    state.step += 1
    rate = state.lr if lr is None else lr
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step

    for name in sorted(grads):
        grad = grads[name]
        if grad is None:
            continue
        param = params[name]
        m = state.first_moments.get(name)
        v = state.second_moments.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moments[name] = m.astype(param.dtype)
        state.second_moments[name] = v.astype(param.dtype)
        update = rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data = (param.data - update).astype(param.dtype)
    return state


def clip_grad_norm(grads: Dict[str, Optional[np.ndarray]], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name, grad in grads.items():
            if grad is not None:
                grads[name] = grad * np.asarray(scale, dtype=grad.dtype)
    return total
