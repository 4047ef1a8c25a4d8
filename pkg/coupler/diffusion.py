"""
Diffusion processes on top of the denoiser.

Forward noising, the DDPM and DDIM reverse steps, classifier-free guidance,
the simple denoising loss, the Monte-Carlo likelihood estimate, guided DDIM
sampling with trajectory recording, unconditional pretraining, and
conversion between models and checkpoints.

Timesteps are 1-based: t = 1..T, with alpha_bar(0) = 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from tqdm import tqdm

from . import numkit as nk
from .data import Checkpoint, Normalizer, TabularDataset, load_checkpoint, save_checkpoint
from .denoiser import DenoiserConfig, DenoiserParams, denoise
from .errors import DataError, NumericalError, ShapeError, UsageError
from .numkit import AdamState, Tensor


logger = logging.getLogger(__name__)

NLL_WEIGHTINGS = ("uniform", "elbo")


# =============================================================================
# NOISE SCHEDULE
# =============================================================================

@dataclass
class NoiseSchedule:
    """beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod_{s<=t} alpha_s for t = 1..T."""
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    beta_min: float = 0.0
    beta_max: float = 0.0

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.size < 1:
            raise UsageError("schedule needs at least one beta")
        if np.any(self.betas < 0) or np.any(self.betas >= 1):
            raise UsageError("betas must lie in [0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        self._padded = np.concatenate([[1.0], self.alpha_bars])

    @property
    def T(self) -> int:
        return self.betas.size

    def alpha_bar(self, t):
        """alpha_bar at 0..T (vectorized)."""
        return self._padded[t]

    def beta(self, t):
        return self.betas[np.asarray(t) - 1]

    def alpha(self, t):
        return self.alphas[np.asarray(t) - 1]

    def elbo_weight(self, t):
        """beta_t / (alpha_t (1 - alpha_bar_t)): the likelihood weight of the noise error at step t."""
        return self.beta(t) / (self.alpha(t) * (1.0 - self.alpha_bar(t)))

    def check_timesteps(self, t, low: int = 0) -> None:
        t = np.asarray(t)
        if np.any(t < low) or np.any(t > self.T):
            raise UsageError(f"timestep outside {low}..{self.T}")

    def to_dict(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max}

    @classmethod
    def from_dict(cls, values: dict) -> NoiseSchedule:
        return make_linear_schedule(values["T"], values["beta_min"], values["beta_max"])


def make_linear_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """
    Betas linearly interpolated from beta_min at t=1 to beta_max at t=T.

    Raises:
        UsageError: Unless T >= 1 and 0 < beta_min <= beta_max < 1.
    """
    if T < 1:
        raise UsageError(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise UsageError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, T)
    return NoiseSchedule(betas, beta_min=beta_min, beta_max=beta_max)


def forward_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps; t scalar or one per row."""
    schedule.check_timesteps(t)
    ab = schedule.alpha_bar(t)
    if np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# =============================================================================
# MODEL
# =============================================================================

@dataclass
class DiffusionModel:
    """A denoiser, its schedule, and everything saved alongside it."""
    params: DenoiserParams
    schedule: NoiseSchedule
    ema_params: DenoiserParams | None = None
    ema_decay: float = 0.999
    optimizer: AdamState | None = None
    normalizer: Normalizer | None = None
    cond_normalizer: Normalizer | None = None
    role: str = "anchor"
    step: int = 0

    @property
    def config(self) -> DenoiserConfig:
        return self.params.config

    @property
    def conditional(self) -> bool:
        return self.params.config.conditional

    @property
    def data_dim(self) -> int:
        return self.params.config.data_dim

    @property
    def cond_dim(self) -> int | None:
        return self.params.config.cond_dim

    def eps(
        self,
        x_t,
        t,
        cond: np.ndarray | None = None,
        null_mask: np.ndarray | None = None,
        use_ema: bool = False,
    ) -> Tensor:
        """Predicted noise; a conditional model given no condition uses the null condition."""
        params = self.ema_params if use_ema and self.ema_params is not None else self.params
        return denoise(params, x_t, t, cond, null_mask)

    def enable_ema(self, decay: float | None = None) -> None:
        if decay is not None:
            self.ema_decay = decay
        self.ema_params = self.params.copy()

    def update_ema(self) -> None:
        if self.ema_params is None:
            return
        d = self.ema_decay
        for name, tensor in self.params.tensors.items():
            shadow = self.ema_params[name].data
            shadow[...] = d * shadow + (1.0 - d) * tensor.data

    def copy(self) -> DiffusionModel:
        optimizer = None
        if self.optimizer is not None:
            o = self.optimizer
            optimizer = AdamState(
                lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps, step=o.step,
                m={k: v.copy() for k, v in o.m.items()},
                v={k: v.copy() for k, v in o.v.items()},
            )
        return DiffusionModel(
            params=self.params.copy(),
            schedule=self.schedule,
            ema_params=None if self.ema_params is None else self.ema_params.copy(),
            ema_decay=self.ema_decay,
            optimizer=optimizer,
            normalizer=self.normalizer,
            cond_normalizer=self.cond_normalizer,
            role=self.role,
            step=self.step,
        )

    def ensure_optimizer(self, lr: float) -> AdamState:
        if self.optimizer is None:
            self.optimizer = AdamState(lr=lr)
        return self.optimizer


# =============================================================================
# LOSSES AND LIKELIHOOD
# =============================================================================

def denoising_loss(
    model: DiffusionModel,
    x0: np.ndarray,
    cond: np.ndarray | None,
    drop_prob: float,
    rng: np.random.Generator,
) -> Tensor:
    """
    Mean over the batch of ||eps - eps_hat(x_t, [cond,] t)||^2.

    One (t, eps) pair per row, t uniform in 1..T. With a condition batch, each
    row's condition is independently replaced by the null condition with
    probability drop_prob. Draw order: t, eps, drop mask.

    Raises:
        UsageError: If a condition batch is given to an unconditional model.
    """
    if cond is not None and not model.conditional:
        raise UsageError("conditional batch given to an unconditional model")
    x0 = np.asarray(x0, dtype=np.float64)
    batch = x0.shape[0]
    t = rng.integers(1, model.schedule.T + 1, size=batch)
    eps = rng.standard_normal(size=x0.shape)
    x_t = forward_sample(x0, t, eps, model.schedule)
    null_mask = None
    if cond is not None:
        null_mask = rng.random(batch) < drop_prob
    predicted = model.eps(x_t, t, cond, null_mask)
    return nk.mean(nk.square_norm(nk.sub(eps, predicted), axis=1))


def evaluation_loss(
    model: DiffusionModel,
    x0: np.ndarray,
    cond: np.ndarray | None = None,
    seed: int = 0,
    repeats: int = 1,
    use_ema: bool = False,
) -> float:
    """Denoising loss without gradients and with seeded draws (common random numbers)."""
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=np.float64)
    total = 0.0
    with nk.no_grad():
        for _ in range(repeats):
            t = rng.integers(1, model.schedule.T + 1, size=x0.shape[0])
            eps = rng.standard_normal(size=x0.shape)
            x_t = forward_sample(x0, t, eps, model.schedule)
            predicted = model.eps(x_t, t, cond, use_ema=use_ema).data
            total += float(np.mean(np.sum((eps - predicted) ** 2, axis=1)))
    return total / repeats


def estimate_nll(
    model: DiffusionModel,
    x0: np.ndarray,
    cond: np.ndarray | None,
    k: int,
    rng: np.random.Generator,
    stratified: bool = False,
    use_ema: bool = False,
    weighting: str = "uniform",
) -> np.ndarray:
    """
    Monte-Carlo negative log-likelihood per row, up to a shared constant.

    Returns (T / 2K) * sum_k w(t_k) ||eps_k - eps_hat(x_{t_k}, [cond,] t_k)||^2
    for each row, t_k uniform in 1..T (or one draw per stratum when
    stratified), eps_k fresh. With weighting="uniform" w is 1, which is the
    estimator the rewards use. With weighting="elbo" w(t) is
    NoiseSchedule.elbo_weight, which makes differences between models
    calibrated in nats: two Gaussians with standard deviations 1 and 0.5 in
    d dimensions differ by d ln 2.
    """
    if k < 1:
        raise UsageError(f"need at least one Monte-Carlo draw, got {k}")
    if weighting not in NLL_WEIGHTINGS:
        raise UsageError(f"weighting must be one of {NLL_WEIGHTINGS}, got {weighting!r}")
    x0 = np.asarray(x0, dtype=np.float64)
    batch = x0.shape[0]
    T = model.schedule.T
    if stratified:
        u = rng.random(size=(batch, k))
        strata = np.arange(k)[None, :]
        t = (1 + np.floor((strata + u) / k * T)).astype(np.int64).clip(1, T).reshape(-1)
    else:
        t = rng.integers(1, T + 1, size=batch * k)
    x_rep = np.repeat(x0, k, axis=0)
    cond_rep = None if cond is None else np.repeat(np.asarray(cond, dtype=np.float64), k, axis=0)
    eps = rng.standard_normal(size=x_rep.shape)
    x_t = forward_sample(x_rep, t, eps, model.schedule)
    with nk.no_grad():
        predicted = model.eps(x_t, t, cond_rep, use_ema=use_ema).data
    errors = np.sum((eps - predicted) ** 2, axis=1)
    if weighting == "elbo":
        errors = errors * model.schedule.elbo_weight(t)
    errors = errors.reshape(batch, k)
    return T / (2.0 * k) * errors.sum(axis=1)


# =============================================================================
# REVERSE STEPS AND GUIDANCE
# =============================================================================

def ddpm_reverse_step(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    noise: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Ancestral step: mean (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t), variance beta_t."""
    if t < 1:
        raise UsageError("reverse step needs t >= 1")
    schedule.check_timesteps(t, low=1)
    beta = schedule.beta(t)
    mean = (x_t - beta / np.sqrt(1.0 - schedule.alpha_bar(t)) * eps_hat) / np.sqrt(schedule.alpha(t))
    return mean + np.sqrt(beta) * noise


def ddim_coefficients(t: int, t_prev: int, eta: float, schedule: NoiseSchedule) -> tuple[float, float, float]:
    """
    Coefficients (a, b, sigma) of the DDIM step x_prev = a x_t + b eps_hat + sigma noise.

    Equivalent to sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev - sigma^2) eps_hat
    + sigma noise with x0_hat = (x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t).
    """
    if not 0.0 <= eta <= 1.0:
        raise UsageError(f"eta must lie in [0, 1], got {eta}")
    ab_t = float(schedule.alpha_bar(t))
    ab_prev = float(schedule.alpha_bar(t_prev))
    if ab_prev < ab_t:
        raise UsageError(f"alpha_bar must not decrease from t={t} to t_prev={t_prev}")
    sigma = 0.0
    if eta > 0 and ab_prev != ab_t:
        sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    ratio = np.sqrt(ab_prev) / np.sqrt(ab_t)
    b = np.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0)) - np.sqrt(1.0 - ab_t) * ratio
    return float(ratio), float(b), float(sigma)


def ddim_step(
    x_t: np.ndarray,
    t: int,
    t_prev: int,
    eps_hat: np.ndarray,
    eta: float,
    noise: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One DDIM step from t to t_prev (< t)."""
    a, b, sigma = ddim_coefficients(t, t_prev, eta, schedule)
    return a * x_t + b * eps_hat + sigma * noise


def cfg_noise(eps_cond, eps_uncond, w: float):
    """eps_uncond + w (eps_cond - eps_uncond); exact at w = 0 and w = 1."""
    if w == 0:
        return eps_uncond
    if w == 1:
        return eps_cond
    return eps_uncond + w * (eps_cond - eps_uncond)


def guided_eps(
    model: DiffusionModel,
    x_t: np.ndarray,
    t: int,
    cond: np.ndarray | None,
    guidance: float,
    use_ema: bool = False,
) -> Tensor:
    """Noise prediction for a batch sharing one timestep, with classifier-free guidance."""
    if cond is None:
        return model.eps(x_t, t, use_ema=use_ema)
    if guidance == 1:
        return model.eps(x_t, t, cond, use_ema=use_ema)
    batch = x_t.shape[0]
    if guidance == 0:
        return model.eps(x_t, t, cond, np.ones(batch, dtype=bool), use_ema=use_ema)
    both = model.eps(
        np.concatenate([x_t, x_t]),
        t,
        np.concatenate([cond, cond]),
        np.concatenate([np.zeros(batch, dtype=bool), np.ones(batch, dtype=bool)]),
        use_ema=use_ema,
    )
    eps_cond = nk.slice_rows(both, 0, batch)
    eps_uncond = nk.slice_rows(both, batch, 2 * batch)
    return cfg_noise(eps_cond, eps_uncond, guidance)


def ddim_mean(x_t: np.ndarray, eps: Tensor, a: float, b: float) -> Tensor:
    """Deterministic part of a DDIM step, differentiable in eps."""
    return nk.add(a * x_t, nk.mul(b, eps))


# =============================================================================
# SAMPLING
# =============================================================================

@dataclass
class SampleConfig:
    """How to run the reverse chain."""
    n_steps: int = 50
    guidance: float = 7.0
    eta: float = 0.0
    record_trajectory: bool = False
    seed: int | None = None
    n_samples: int = 1
    use_ema: bool = True

    def __post_init__(self):
        if self.n_steps < 1:
            raise UsageError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.guidance < 0:
            raise UsageError(f"guidance must be >= 0, got {self.guidance}")
        if not 0.0 <= self.eta <= 1.0:
            raise UsageError(f"eta must lie in [0, 1], got {self.eta}")


@dataclass
class TrajectoryBatch:
    """
    Recorded reverse chains, one row per sample, steps ordered from t=T down.

    For step i the chain moved from states[i] (at timesteps[i]) to
    next_states[i] (at prev_timesteps[i]) with Gaussian mean means[i] and
    variance variances[i] per coordinate.
    """
    cond: np.ndarray | None
    guidance: float
    eta: float
    timesteps: np.ndarray
    prev_timesteps: np.ndarray
    states: np.ndarray
    means: np.ndarray
    next_states: np.ndarray
    variances: np.ndarray
    final: np.ndarray

    @property
    def size(self) -> int:
        return self.final.shape[0]

    @property
    def n_steps(self) -> int:
        return self.timesteps.shape[0]

    def stochastic_steps(self) -> np.ndarray:
        return np.flatnonzero(self.variances > 0)

    def select(self, rows: np.ndarray) -> TrajectoryBatch:
        return TrajectoryBatch(
            cond=None if self.cond is None else self.cond[rows],
            guidance=self.guidance,
            eta=self.eta,
            timesteps=self.timesteps,
            prev_timesteps=self.prev_timesteps,
            states=self.states[:, rows],
            means=self.means[:, rows],
            next_states=self.next_states[:, rows],
            variances=self.variances,
            final=self.final[rows],
        )


@dataclass
class SampleResult:
    samples: np.ndarray
    trajectory: TrajectoryBatch | None = None


def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Strictly decreasing subsequence of 1..T starting at T."""
    if not 1 <= n_steps <= T:
        raise UsageError(f"n_steps must lie in 1..{T}, got {n_steps}")
    return np.floor(np.linspace(T, 1, n_steps)).astype(np.int64)


def draw_noise(
    n: int,
    n_steps: int,
    dim: int,
    seed: int | None,
    rng: np.random.Generator | None,
) -> np.ndarray:
    """
    Every normal draw a chain needs: slot 0 is x_T, slot i+1 feeds step i.

    With a seed each sample owns an independent stream spawned from
    (seed, sample index); otherwise all draws come from rng.
    """
    if seed is not None:
        children = np.random.SeedSequence(seed).spawn(n)
        if not children:
            return np.zeros((0, n_steps + 1, dim))
        return np.stack([np.random.default_rng(c).standard_normal((n_steps + 1, dim)) for c in children])
    if rng is None:
        raise UsageError("sampling needs a seed or a random generator")
    return rng.standard_normal((n, n_steps + 1, dim))


def sample(
    model: DiffusionModel,
    cond: np.ndarray | None,
    config: SampleConfig,
    rng: np.random.Generator | None = None,
) -> SampleResult:
    """
    Run DDIM from x_T ~ N(0, I), with guidance when a condition is given.

    Returns:
        SampleResult with (n, data_dim) samples and, when requested, the
        recorded trajectory

    Raises:
        UsageError: If a non-zero guidance is requested with a condition on
            an unconditional model.
    """
    if cond is not None:
        cond = np.asarray(cond, dtype=np.float64)
        if not model.conditional:
            if config.guidance != 0:
                raise UsageError("conditional sampling needs a conditional model")
            n = cond.shape[0]
            cond = None
        else:
            if cond.ndim != 2 or cond.shape[1] != model.cond_dim:
                raise ShapeError(f"condition batch must have shape (n, {model.cond_dim}), got {cond.shape}")
            n = cond.shape[0]
    else:
        n = config.n_samples

    timesteps = ddim_timesteps(model.schedule.T, config.n_steps)
    prev_timesteps = np.append(timesteps[1:], 0)
    noise = draw_noise(n, len(timesteps), model.data_dim, config.seed, rng)
    x = noise[:, 0]

    record = config.record_trajectory
    states, means, next_states, variances = [], [], [], []
    with nk.no_grad():
        for i, (t, t_prev) in enumerate(zip(timesteps, prev_timesteps)):
            a, b, sigma = ddim_coefficients(int(t), int(t_prev), config.eta, model.schedule)
            eps = guided_eps(model, x, int(t), cond, config.guidance, config.use_ema)
            mean = ddim_mean(x, eps, a, b).data
            x_next = mean + sigma * noise[:, i + 1]
            if record:
                states.append(x)
                means.append(mean)
                next_states.append(x_next)
                variances.append(sigma * sigma)
            x = x_next

    trajectory = None
    if record:
        trajectory = TrajectoryBatch(
            cond=cond,
            guidance=config.guidance,
            eta=config.eta,
            timesteps=timesteps,
            prev_timesteps=prev_timesteps,
            states=np.stack(states),
            means=np.stack(means),
            next_states=np.stack(next_states),
            variances=np.array(variances),
            final=x,
        )
    return SampleResult(samples=x, trajectory=trajectory)


# =============================================================================
# TRAINING
# =============================================================================

def denoising_update(
    model: DiffusionModel,
    x0: np.ndarray,
    cond: np.ndarray | None,
    drop_prob: float,
    rng: np.random.Generator,
    grad_clip: float,
    lr: float,
) -> tuple[float, float]:
    """
    One optimizer step on the denoising loss.

    Returns:
        (loss, gradient norm before clipping)

    Raises:
        NumericalError: On a non-finite loss.
    """
    optimizer = model.ensure_optimizer(lr)
    params = model.params.tensors
    nk.zero_grad(params)
    loss = denoising_loss(model, x0, cond, drop_prob, rng)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite denoising loss at step {model.step}")
    nk.backprop(loss)
    grads = nk.collect_grads(params)
    norm = nk.clip_global_norm(grads, grad_clip)
    nk.adam_step(params, grads, optimizer)
    model.update_ema()
    model.step += 1
    return value, norm


def train_unconditional(
    model: DiffusionModel,
    data: TabularDataset | np.ndarray,
    steps: int,
    batch_size: int,
    rng: np.random.Generator,
    lr: float = 1e-3,
    grad_clip: float = 1.0,
    on_step: Callable[[int, float], None] | None = None,
    progress: bool = False,
) -> list[float]:
    """
    Pretrain an unconditional model on (already normalized) data.

    Returns:
        Loss per step

    Raises:
        DataError: On an empty dataset.
        NumericalError: On a non-finite loss (names the step).
    """
    points = data.points if isinstance(data, TabularDataset) else np.asarray(data, dtype=np.float64)
    if points.shape[0] == 0:
        raise DataError("cannot train on an empty dataset")
    if points.shape[1] != model.data_dim:
        raise ShapeError(f"data has {points.shape[1]} features, model expects {model.data_dim}")

    losses = []
    for step in tqdm(range(steps), desc="pretrain", disable=not progress, leave=False):
        rows = rng.integers(0, points.shape[0], size=batch_size)
        try:
            loss, norm = denoising_update(model, points[rows], None, 0.0, rng, grad_clip, lr)
        except NumericalError as e:
            raise NumericalError(f"pretraining stopped at step {step}: {e}") from None
        losses.append(loss)
        logger.debug("pretrain step %d loss %.6f grad_norm %.4f", step, loss, norm)
        if on_step:
            on_step(step, loss)
    if losses:
        logger.info("pretraining finished: %d steps, final loss %.6f", steps, losses[-1])
    return losses


# =============================================================================
# CHECKPOINTS
# =============================================================================

def model_to_checkpoint(model: DiffusionModel) -> Checkpoint:
    optimizer_meta = None
    optimizer_blocks = None
    if model.optimizer is not None:
        o = model.optimizer
        optimizer_meta = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "step": o.step}
        optimizer_blocks = {}
        for name in model.params.tensors:
            if name in o.m:
                optimizer_blocks[f"m/{name}"] = o.m[name]
                optimizer_blocks[f"v/{name}"] = o.v[name]
    metadata = {
        "role": model.role,
        "step": model.step,
        "denoiser": model.config.to_dict(),
        "schedule": model.schedule.to_dict(),
        "ema_decay": model.ema_decay,
        "optimizer": optimizer_meta,
        "normalizer": None if model.normalizer is None else model.normalizer.to_dict(),
        "cond_normalizer": None if model.cond_normalizer is None else model.cond_normalizer.to_dict(),
    }
    return Checkpoint(
        metadata=metadata,
        blocks=model.params.arrays(),
        ema_blocks=None if model.ema_params is None else model.ema_params.arrays(),
        optimizer_blocks=optimizer_blocks,
    )


def model_from_checkpoint(checkpoint: Checkpoint) -> DiffusionModel:
    meta = checkpoint.metadata
    try:
        config = DenoiserConfig.from_dict(meta["denoiser"])
        schedule = NoiseSchedule.from_dict(meta["schedule"])
    except (KeyError, TypeError) as e:
        raise DataError(f"checkpoint metadata is incomplete: {e}") from None

    def params_from(blocks: dict[str, np.ndarray]) -> DenoiserParams:
        return DenoiserParams(config, {name: nk.parameter(a, name) for name, a in blocks.items()})

    optimizer = None
    if meta.get("optimizer"):
        o = meta["optimizer"]
        blocks = checkpoint.optimizer_blocks or {}
        try:
            optimizer = AdamState(
                lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"],
                m={k[2:]: v.copy() for k, v in blocks.items() if k.startswith("m/")},
                v={k[2:]: v.copy() for k, v in blocks.items() if k.startswith("v/")},
            )
        except (KeyError, TypeError) as e:
            raise DataError(f"checkpoint optimizer state is incomplete: {e}") from None
    return DiffusionModel(
        params=params_from(checkpoint.blocks),
        schedule=schedule,
        ema_params=None if checkpoint.ema_blocks is None else params_from(checkpoint.ema_blocks),
        ema_decay=meta.get("ema_decay", 0.999),
        optimizer=optimizer,
        normalizer=Normalizer.from_dict(meta["normalizer"]) if meta.get("normalizer") else None,
        cond_normalizer=Normalizer.from_dict(meta["cond_normalizer"]) if meta.get("cond_normalizer") else None,
        role=meta.get("role", "anchor"),
        step=meta.get("step", 0),
    )


def save_model(path, model: DiffusionModel) -> None:
    save_checkpoint(path, model_to_checkpoint(model))


def load_model(path) -> DiffusionModel:
    return model_from_checkpoint(load_checkpoint(path))
