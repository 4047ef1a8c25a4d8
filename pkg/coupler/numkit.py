"""
Dense tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous float64 numpy arrays. While recording is enabled,
every operation on a tensor that requires a gradient remembers its parents
and a backward closure. Parents are always created before their children,
so creation order is a valid tape order: `backprop` replays the tape in
reverse and accumulates gradients into the leaf tensors created with
``requires_grad=True`` (the parameters).

The operation set is closed on purpose: it is what the denoiser, the
diffusion losses and the policy-gradient surrogate need, nothing more.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import NumericalError, ShapeError, UsageError


_ids = itertools.count()
_recording = threading.local()


def is_grad_enabled() -> bool:
    """True when operations are being recorded on the tape."""
    return getattr(_recording, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording (sampling, rewards, frozen anchors)."""
    previous = is_grad_enabled()
    _recording.enabled = False
    try:
        yield
    finally:
        _recording.enabled = previous


# =============================================================================
# TENSOR
# =============================================================================

class Tensor:
    """A float64 array node on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operators delegate to the functional ops below.
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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division is only supported by constants")
        return div_const(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor that owns a private copy of its data and collects gradients."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def lift(value) -> Tensor:
    """Wrap constants; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# =============================================================================
# OPERATIONS
# =============================================================================

def add(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    return _result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = lift(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def div_const(a, divisor) -> Tensor:
    a = lift(a)
    divisor = np.asarray(divisor, dtype=np.float64)
    return _result(a.data / divisor, (a,), lambda g: (_unbroadcast(g / divisor, a.shape),))


def matmul(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n, k) @ (k, m), got {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, weight, bias) -> Tensor:
    """x @ weight + bias for a batch of row vectors."""
    x, weight, bias = lift(x), lift(weight), lift(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine needs (n, k) @ (k, m), got {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match output width {weight.shape[1]}")
    return _result(
        x.data @ weight.data + bias.data, (x, weight, bias),
        lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def silu(x) -> Tensor:
    """x * sigmoid(x); smooth everywhere."""
    x = lift(x)
    s = expit(x.data)
    return _result(x.data * s, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def exp(x) -> Tensor:
    x = lift(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def clip(x, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; gradient passes only inside the interval."""
    x = lift(x)
    inside = (x.data >= low) & (x.data <= high)
    return _result(np.clip(x.data, low, high), (x,), lambda g: (g * inside,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to `a`."""
    a, b = lift(a), lift(b)
    pick_a = a.data >= b.data
    return _result(
        np.where(pick_a, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def where(mask, a, b) -> Tensor:
    """Select `a` where mask is true, else `b` (mask is a constant)."""
    a, b = lift(a), lift(b)
    mask = np.asarray(mask, dtype=bool)
    return _result(
        np.where(mask, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                   _unbroadcast(np.where(mask, 0.0, g), b.shape)),
    )


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    parts = [lift(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([p.data for p in parts], axis=axis), tuple(parts),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [lift(t) for t in tensors]
    return _result(
        np.stack([p.data for p in parts], axis=axis), tuple(parts),
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def slice_rows(x, start: int, stop: int) -> Tensor:
    """Rows start:stop of a batch."""
    x = lift(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop], (x,), backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = lift(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = lift(x)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.sum(x.data, axis=axis), (x,), backward)


def mean(x, axis: int | None = None) -> Tensor:
    x = lift(x)
    count = x.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(np.mean(x.data, axis=axis), (x,), backward)


def square_norm(x, axis: int | None = None) -> Tensor:
    """Sum of squares, over everything or along one axis."""
    x = lift(x)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (2.0 * x.data * g,)

    return _result(np.sum(x.data * x.data, axis=axis), (x,), backward)


# =============================================================================
# BACKPROPAGATION
# =============================================================================

def backprop(output: Tensor) -> None:
    """
    Accumulate d(output)/d(leaf) into every reachable leaf's `grad`.

    Repeated calls accumulate; clear with `zero_grad` between steps.

    Raises:
        ShapeError: If output is not a single element.
    """
    if output.size != 1:
        raise ShapeError(f"backprop needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    pending = [output]
    while pending:
        node = pending.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        pending.extend(p for p in node._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {output._id: np.ones_like(output.data)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + parent_grad
            else:
                grads[parent._id] = parent_grad


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for tensor in params.values():
        tensor.zero_grad()


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients by name; parameters the output never touched get zeros."""
    return {
        name: tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        for name, tensor in params.items()
    }


def finite_difference(
    fn: Callable[[], float],
    tensor: Tensor,
    h: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of a scalar function w.r.t. one tensor's entries."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = fn()
        flat[i] = original - h
        lower = fn()
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * h)
    return grad


# =============================================================================
# OPTIMIZATION
# =============================================================================

@dataclass
class AdamState:
    """Adam hyperparameters plus first/second moment estimates per parameter."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise UsageError(f"Adam lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise UsageError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise UsageError(f"Adam eps must be > 0, got {self.eps}")


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> None:
    """
    Apply one bias-corrected Adam update in place.

    Every gradient is validated before any parameter moves, so a failed step
    leaves parameters and moments untouched.

    Raises:
        ShapeError: If a gradient does not match its parameter.
        NumericalError: If a gradient holds NaN or Inf (names the parameter).
    """
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, parameter has {tensor.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter '{name}'")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, tensor in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_global_norm(grads: Mapping[str, np.ndarray] | Sequence[np.ndarray], max_norm: float) -> float:
    """
    Scale all gradients in place so their joint L2 norm is at most max_norm.

    Returns:
        The norm before clipping (0.0 for an empty set).
    """
    if not max_norm > 0:
        raise UsageError(f"max_norm must be > 0, got {max_norm}")
    arrays = list(grads.values()) if isinstance(grads, Mapping) else list(grads)
    if not arrays:
        return 0.0
    total = float(np.sqrt(np.sum([np.sum(g * g) for g in arrays])))
    if total > max_norm:
        scale = max_norm / total
        for g in arrays:
            g *= scale
    return total
