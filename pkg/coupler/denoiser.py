"""
The noise-prediction network.

An MLP trunk with skip connections around every block, fed with the noisy
sample and a sinusoidal time embedding. The conditional variant adds a
conditioning encoder (a copy of the trunk's input stack, seeded from a
pretrained unconditional trunk) whose per-level outputs are injected into the
trunk through zero-initialized linear maps, plus a learned null-condition
vector used when the condition is dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit as nk
from .errors import ShapeError, UsageError
from .numkit import Tensor


MAX_PERIOD = 10000.0


# =============================================================================
# CONFIGURATION AND PARAMETERS
# =============================================================================

@dataclass
class DenoiserConfig:
    """Network shape. cond_dim=None means unconditional."""
    data_dim: int
    cond_dim: int | None = None
    hidden_dims: list[int] = field(default_factory=lambda: [128, 128, 128])
    time_embed_dim: int = 32
    cond_drop_prob: float = 0.1

    def __post_init__(self):
        if self.data_dim < 1:
            raise UsageError(f"data_dim must be positive, got {self.data_dim}")
        if self.cond_dim is not None and self.cond_dim < 1:
            raise UsageError(f"cond_dim must be positive, got {self.cond_dim}")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise UsageError(f"hidden_dims must be positive integers, got {self.hidden_dims}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise UsageError(f"time_embed_dim must be a positive even integer, got {self.time_embed_dim}")
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise UsageError(f"cond_drop_prob must lie in [0, 1], got {self.cond_drop_prob}")
        self.hidden_dims = list(self.hidden_dims)

    @property
    def conditional(self) -> bool:
        return self.cond_dim is not None

    def to_dict(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "cond_dim": self.cond_dim,
            "hidden_dims": list(self.hidden_dims),
            "time_embed_dim": self.time_embed_dim,
            "cond_drop_prob": self.cond_drop_prob,
        }

    @classmethod
    def from_dict(cls, values: dict) -> DenoiserConfig:
        return cls(**values)


@dataclass
class DenoiserParams:
    """Named parameter tensors plus the config that shaped them."""
    config: DenoiserConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def copy(self) -> DenoiserParams:
        return DenoiserParams(
            config=replace(self.config, hidden_dims=list(self.config.hidden_dims)),
            tensors={name: nk.parameter(t.data, name) for name, t in self.tensors.items()},
        )

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place (shapes must match)."""
        for name, tensor in self.tensors.items():
            value = arrays[name]
            if value.shape != tensor.shape:
                raise ShapeError(f"parameter '{name}' expects shape {tensor.shape}, got {value.shape}")
            tensor.data[...] = value


# =============================================================================
# TIME EMBEDDING
# =============================================================================

def _periods(dim: int) -> np.ndarray:
    half = dim // 2
    if half == 1:
        return np.ones(1)
    return MAX_PERIOD ** (np.arange(half) / (half - 1))


def time_embedding(t: int, dim: int, T: int) -> np.ndarray:
    """
    Sinusoidal embedding of one timestep.

    First half sin(t / w_k), second half cos(t / w_k), with periods w_k
    geometric from 1 to 10000.

    Raises:
        UsageError: If dim is odd or t lies outside 0..T.
    """
    if dim < 2 or dim % 2:
        raise UsageError(f"time embedding dimension must be even, got {dim}")
    if not 0 <= t <= T:
        raise UsageError(f"timestep {t} outside 0..{T}")
    angles = t / _periods(dim)
    return np.concatenate([np.sin(angles), np.cos(angles)])


def time_embeddings(ts: np.ndarray, dim: int) -> np.ndarray:
    """Batched embedding, one row per timestep."""
    angles = np.asarray(ts, dtype=np.float64)[:, None] / _periods(dim)[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


# =============================================================================
# INITIALIZATION
# =============================================================================

def _dense(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))


def _stack_shapes(config: DenoiserConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of the input stack (input layer plus residual blocks)."""
    widths = config.hidden_dims
    shapes = [
        ("in.w", (config.data_dim + config.time_embed_dim, widths[0])),
        ("in.b", (widths[0],)),
    ]
    for k in range(1, len(widths)):
        shapes.append((f"block{k}.w", (widths[k - 1], widths[k])))
        shapes.append((f"block{k}.b", (widths[k],)))
        if widths[k - 1] != widths[k]:
            shapes.append((f"block{k}.skip", (widths[k - 1], widths[k])))
    return shapes


def init_params(config: DenoiserConfig, rng: np.random.Generator) -> DenoiserParams:
    """
    Randomly initialize a denoiser.

    A conditional config gets a random trunk first and is then extended
    exactly as a pretrained trunk would be.
    """
    trunk = replace(config, cond_dim=None, hidden_dims=list(config.hidden_dims))
    e = trunk.time_embed_dim
    arrays: dict[str, np.ndarray] = {
        "time.w": _dense(rng, e, e),
        "time.b": np.zeros(e),
    }
    for name, shape in _stack_shapes(trunk):
        arrays[name] = np.zeros(shape) if len(shape) == 1 else _dense(rng, *shape)
    arrays["out.w"] = _dense(rng, trunk.hidden_dims[-1], trunk.data_dim, scale=0.1)
    arrays["out.b"] = np.zeros(trunk.data_dim)

    params = DenoiserParams(trunk, {name: nk.parameter(a, name) for name, a in arrays.items()})
    if config.conditional:
        params = init_conditional_from_unconditional(params, config.cond_dim)
    return params


def init_conditional_from_unconditional(uncond_params: DenoiserParams, cond_dim: int) -> DenoiserParams:
    """
    Extend a pretrained unconditional denoiser with a conditioning branch.

    The trunk is copied unchanged, the conditioning encoder starts as a copy
    of the trunk's input stack, and every map that lets the condition reach
    the trunk (hint projection, injections) starts at zero, so the new model
    computes exactly the pretrained function for any condition.

    Raises:
        UsageError: If the source is already conditional.
        ShapeError: If cond_dim is not a positive integer.
    """
    source = uncond_params.config
    if source.conditional:
        raise UsageError("source denoiser is already conditional")
    if not isinstance(cond_dim, (int, np.integer)) or cond_dim < 1:
        raise ShapeError(f"conditioning dimension must be a positive integer, got {cond_dim!r}")

    config = replace(source, cond_dim=int(cond_dim), hidden_dims=list(source.hidden_dims))
    arrays = {name: t.data.copy() for name, t in uncond_params.tensors.items()}
    for name, _ in _stack_shapes(source):
        arrays[f"enc.{name}"] = uncond_params[name].data.copy()
    arrays["hint.w"] = np.zeros((config.cond_dim, config.data_dim))
    arrays["hint.b"] = np.zeros(config.data_dim)
    for k, width in enumerate(config.hidden_dims):
        arrays[f"inject{k}.w"] = np.zeros((width, width))
    arrays["null"] = np.zeros(config.cond_dim)
    return DenoiserParams(config, {name: nk.parameter(a, name) for name, a in arrays.items()})


# =============================================================================
# FORWARD PASS
# =============================================================================

def _input_stack(
    params: DenoiserParams,
    prefix: str,
    x: Tensor,
    temb: Tensor,
    guide: list[Tensor] | None,
) -> list[Tensor]:
    """Run the input layer and residual blocks; return every level's activation."""
    h = nk.affine(nk.concat([x, temb], axis=1), params[prefix + "in.w"], params[prefix + "in.b"])
    if guide is not None:
        h = h + nk.matmul(guide[0], params["inject0.w"])
    h = nk.silu(h)
    levels = [h]
    for k in range(1, len(params.config.hidden_dims)):
        pre = nk.affine(h, params[f"{prefix}block{k}.w"], params[f"{prefix}block{k}.b"])
        if guide is not None:
            pre = pre + nk.matmul(guide[k], params[f"inject{k}.w"])
        skip_name = f"{prefix}block{k}.skip"
        skip = nk.matmul(h, params[skip_name]) if skip_name in params else h
        h = nk.silu(pre) + skip
        levels.append(h)
    return levels


def _condition_rows(
    params: DenoiserParams,
    cond: np.ndarray | None,
    null_mask: np.ndarray | None,
    batch: int,
) -> Tensor:
    """Condition batch with dropped rows replaced by the learned null vector."""
    cond_dim = params.config.cond_dim
    if cond is None:
        cond = np.zeros((batch, cond_dim))
        null_mask = np.ones(batch, dtype=bool)
    else:
        cond = np.asarray(cond, dtype=np.float64)
        if cond.shape != (batch, cond_dim):
            raise ShapeError(f"condition batch must have shape {(batch, cond_dim)}, got {cond.shape}")
        if null_mask is None:
            return Tensor(cond)
    null_mask = np.asarray(null_mask, dtype=bool).reshape(batch, 1)
    return nk.where(null_mask, params["null"], cond)


def denoise(
    params: DenoiserParams,
    x_t,
    t,
    cond: np.ndarray | None = None,
    null_mask: np.ndarray | None = None,
) -> Tensor:
    """
    Predict the noise in a batch of noisy samples.

    Args:
        params: Network parameters
        x_t: (batch, data_dim) noisy samples
        t: Timestep, scalar or one per row
        cond: (batch, cond_dim) conditions, or None for the null condition
        null_mask: Rows whose condition is replaced by the null vector

    Returns:
        (batch, data_dim) tensor of predicted noise

    Raises:
        ShapeError: On any dimension mismatch, or a condition given to an
            unconditional network.
    """
    config = params.config
    x_t = nk.lift(x_t)
    if x_t.ndim != 2 or x_t.shape[1] != config.data_dim:
        raise ShapeError(f"x_t must have shape (batch, {config.data_dim}), got {x_t.shape}")
    batch = x_t.shape[0]
    ts = np.broadcast_to(np.asarray(t), (batch,))

    temb = nk.silu(nk.affine(time_embeddings(ts, config.time_embed_dim), params["time.w"], params["time.b"]))

    guide = None
    if config.conditional:
        c = _condition_rows(params, cond, null_mask, batch)
        hinted = x_t + nk.affine(c, params["hint.w"], params["hint.b"])
        guide = _input_stack(params, "enc.", hinted, temb, None)
    elif cond is not None:
        raise ShapeError("unconditional denoiser does not accept a condition")

    h = _input_stack(params, "", x_t, temb, guide)[-1]
    return nk.affine(h, params["out.w"], params["out.b"])
