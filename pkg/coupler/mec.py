"""
Minimum-entropy coupling of two diffusion models.

Two conditional models, theta for X given Y and phi for Y given X, start
from pretrained unconditional anchors. Each training phase samples from one
conditional model with trajectory recording, scores the generated pairs
with the other model's negative log-likelihood (the reward, lower is
better), applies a clipped policy-gradient update plus a penalty pulling
the conditional model towards its anchor, and finally trains the other
model on the generated pairs so the two factorizations describe the same
joint distribution.

A small discrete fixture checks that the two conditional-entropy gradients
agree once the marginal constraint is respected.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import softmax
from tqdm import tqdm

from . import numkit as nk
from .data import TabularDataset
from .denoiser import init_conditional_from_unconditional
from .diffusion import (
    DiffusionModel,
    SampleConfig,
    TrajectoryBatch,
    ddim_coefficients,
    ddim_mean,
    denoising_loss,
    estimate_nll,
    guided_eps,
    sample,
)
from .errors import DataError, NumericalError, ShapeError, UsageError
from .metrics import nn_project
from .numkit import Tensor


logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


# =============================================================================
# CONFIGURATION AND STATE
# =============================================================================

@dataclass
class RLConfig:
    """Fine-tuning hyperparameters shared by both phases."""
    lambda_x: float = 1e-3
    lambda_y: float = 1e-3
    k_reward: int = 3
    policy_updates: int = 4
    ratio_clip: float = 1e-4
    grad_accum: int = 12
    grad_clip: float = 1.0
    guidance_train: float = 7.0
    buffer_capacity: int = 0
    total_steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    eta: float = 1.0
    ddim_steps: int = 50
    consistency_updates: int = 4
    drop_prob: float = 0.1
    use_baseline: bool = True
    baseline_momentum: float = 0.9
    stratified_t: bool = False
    reward_use_ema: bool = False
    project_train: bool = False

    def __post_init__(self):
        if self.lambda_x < 0 or self.lambda_y < 0:
            raise UsageError("anchor weights must be >= 0")
        if self.policy_updates < 1 or self.k_reward < 1 or self.grad_accum < 1:
            raise UsageError("policy_updates, k_reward and grad_accum must be >= 1")
        if not self.ratio_clip > 0:
            raise UsageError(f"ratio_clip must be > 0, got {self.ratio_clip}")
        if self.batch_size < 1 or self.total_steps < 0 or self.consistency_updates < 0:
            raise UsageError("batch_size must be >= 1, total_steps and consistency_updates >= 0")
        if self.buffer_capacity < 0:
            raise UsageError("buffer_capacity must be >= 0 (0 means 50 x batch_size)")
        if not 0.0 <= self.baseline_momentum < 1.0:
            raise UsageError(f"baseline_momentum must lie in [0, 1), got {self.baseline_momentum}")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise UsageError(f"drop_prob must lie in [0, 1], got {self.drop_prob}")

    @property
    def capacity(self) -> int:
        return self.buffer_capacity or 50 * self.batch_size

    def sample_config(self) -> SampleConfig:
        return SampleConfig(
            n_steps=self.ddim_steps,
            guidance=self.guidance_train,
            eta=self.eta,
            record_trajectory=True,
            use_ema=False,
        )


@dataclass
class CouplingPair:
    """The two conditional models and their frozen unconditional anchors."""
    theta: DiffusionModel
    phi: DiffusionModel
    theta_anchor: DiffusionModel
    phi_anchor: DiffusionModel

    def __post_init__(self):
        if not (self.theta.conditional and self.phi.conditional):
            raise UsageError("theta and phi must be conditional models")
        if self.theta_anchor.conditional or self.phi_anchor.conditional:
            raise UsageError("anchors must be unconditional models")
        dim_x, dim_y = self.theta_anchor.data_dim, self.phi_anchor.data_dim
        if (self.theta.data_dim, self.theta.cond_dim) != (dim_x, dim_y):
            raise ShapeError(f"theta must model {dim_x} features given {dim_y}")
        if (self.phi.data_dim, self.phi.cond_dim) != (dim_y, dim_x):
            raise ShapeError(f"phi must model {dim_y} features given {dim_x}")

    @classmethod
    def from_anchors(cls, theta_anchor: DiffusionModel, phi_anchor: DiffusionModel) -> CouplingPair:
        """Build both conditional models from the pretrained anchors."""
        def conditional(anchor: DiffusionModel, other: DiffusionModel, role: str) -> DiffusionModel:
            model = DiffusionModel(
                params=init_conditional_from_unconditional(anchor.params, other.data_dim),
                schedule=anchor.schedule,
                ema_decay=anchor.ema_decay,
                normalizer=anchor.normalizer,
                cond_normalizer=other.normalizer,
                role=role,
            )
            if anchor.ema_params is not None:
                model.ema_params = init_conditional_from_unconditional(anchor.ema_params, other.data_dim)
            return model

        return cls(
            theta=conditional(theta_anchor, phi_anchor, "theta"),
            phi=conditional(phi_anchor, theta_anchor, "phi"),
            theta_anchor=theta_anchor,
            phi_anchor=phi_anchor,
        )


class ReplayBuffer:
    """
    FIFO store of generated pairs.

    Each entry is (generated, observed): a sample from the phase's model and
    the condition it was drawn for.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise UsageError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: deque[tuple[np.ndarray, np.ndarray]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def add(self, generated: np.ndarray, observed: np.ndarray) -> None:
        if generated.shape[0] != observed.shape[0]:
            raise ShapeError("generated and observed batches differ in length")
        for g, o in zip(generated, observed):
            self._entries.append((g.copy(), o.copy()))

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """n pairs drawn uniformly with replacement."""
        if not self._entries:
            raise DataError("replay buffer is empty")
        rows = rng.integers(0, len(self._entries), size=n)
        generated = np.stack([self._entries[i][0] for i in rows])
        observed = np.stack([self._entries[i][1] for i in rows])
        return generated, observed


@dataclass
class RunningBaseline:
    """Exponential running mean of batch-mean rewards."""
    momentum: float = 0.9
    value: float | None = None

    def update(self, rewards: np.ndarray) -> float:
        batch_mean = float(np.mean(rewards))
        if self.value is None:
            self.value = batch_mean
        else:
            self.value = self.momentum * self.value + (1.0 - self.momentum) * batch_mean
        return self.value


@dataclass
class RewardRecord:
    """Raw rewards (nats, higher is worse), the baseline, and advantages."""
    rewards: np.ndarray
    baseline: float
    advantages: np.ndarray

    @classmethod
    def build(cls, rewards: np.ndarray, baseline: RunningBaseline | None) -> RewardRecord:
        if baseline is None:
            return cls(rewards, 0.0, rewards.copy())
        value = baseline.update(rewards)
        return cls(rewards, value, rewards - value)

    @property
    def stderr(self) -> float:
        n = self.rewards.size
        return float(np.std(self.rewards, ddof=1) / np.sqrt(n)) if n > 1 else 0.0


@dataclass
class PolicyUpdateStats:
    surrogate: float
    kl: float
    grad_norm: float
    clip_fraction: float


@dataclass
class StepDiagnostics:
    """One record per phase call; what the CLI writes to the training log."""
    step: int
    phase: str
    reward_mean: float
    reward_stderr: float
    baseline: float
    surrogate: float
    kl: float
    consistency_loss: float
    grad_norm: float
    clip_fraction: float
    buffer_size: int

    def to_row(self) -> dict:
        return asdict(self)


@dataclass
class CouplingResult:
    pair: CouplingPair
    log: list[StepDiagnostics] = field(default_factory=list)


# =============================================================================
# REWARD AND LOG-PROBABILITIES
# =============================================================================

def reward(
    other_model: DiffusionModel,
    observed: np.ndarray,
    generated: np.ndarray,
    k: int,
    rng: np.random.Generator,
    stratified: bool = False,
    use_ema: bool = False,
) -> np.ndarray:
    """
    Negative log-likelihood of the observed side given the generated side.

    other_model is the specular model: in the theta phase, phi scores the
    observed y given the generated x. One value per pair.
    """
    if not other_model.conditional:
        raise ShapeError("reward needs a conditional model")
    if observed.ndim != 2 or observed.shape[1] != other_model.data_dim:
        raise ShapeError(f"observed batch must have {other_model.data_dim} columns, got shape {observed.shape}")
    if generated.ndim != 2 or generated.shape[1] != other_model.cond_dim:
        raise ShapeError(f"generated batch must have {other_model.cond_dim} columns, got shape {generated.shape}")
    if observed.shape[0] != generated.shape[0]:
        raise ShapeError("observed and generated batches differ in length")
    return estimate_nll(other_model, observed, generated, k, rng, stratified=stratified, use_ema=use_ema)


def gaussian_log_density(x: np.ndarray, mean, variance: float) -> Tensor:
    """Row-wise log N(x; mean, variance I)."""
    d = x.shape[1]
    sq = nk.square_norm(nk.sub(x, mean), axis=1)
    return nk.sub(-0.5 * d * (LOG_2PI + np.log(variance)), nk.div_const(sq, 2.0 * variance))


def _rows(traj: TrajectoryBatch, rows: np.ndarray | None) -> TrajectoryBatch:
    return traj if rows is None else traj.select(rows)


def step_log_probs(model: DiffusionModel, traj: TrajectoryBatch, rows: np.ndarray | None = None) -> Tensor:
    """
    log p(x_prev | x_t, cond) under the model's current parameters.

    One row per stochastic step, one column per trajectory; deterministic
    steps carry no density and are left out.
    """
    traj = _rows(traj, rows)
    out = []
    for i in traj.stochastic_steps():
        t, t_prev = int(traj.timesteps[i]), int(traj.prev_timesteps[i])
        a, b, _ = ddim_coefficients(t, t_prev, traj.eta, model.schedule)
        eps = guided_eps(model, traj.states[i], t, traj.cond, traj.guidance)
        mean = ddim_mean(traj.states[i], eps, a, b)
        out.append(gaussian_log_density(traj.next_states[i], mean, float(traj.variances[i])))
    if not out:
        return Tensor(np.zeros((0, traj.size)))
    return nk.stack(out, axis=0)


def recorded_log_probs(traj: TrajectoryBatch, rows: np.ndarray | None = None) -> np.ndarray:
    """The same densities under the sampling-time means."""
    traj = _rows(traj, rows)
    steps = traj.stochastic_steps()
    if steps.size == 0:
        return np.zeros((0, traj.size))
    with nk.no_grad():
        return np.stack([
            gaussian_log_density(traj.next_states[i], Tensor(traj.means[i]), float(traj.variances[i])).data
            for i in steps
        ])


def trajectory_log_prob(model: DiffusionModel, traj: TrajectoryBatch) -> Tensor:
    """Sum over steps of log p(x_prev | x_t, cond); differentiable in the model's parameters."""
    return nk.sum(step_log_probs(model, traj), axis=0)


def importance_ratios(model: DiffusionModel, traj: TrajectoryBatch) -> np.ndarray:
    """Per-step ratios of current to sampling-time densities."""
    with nk.no_grad():
        current = step_log_probs(model, traj).data
    return np.exp(current - recorded_log_probs(traj))


# =============================================================================
# POLICY UPDATE
# =============================================================================

def kl_anchor_loss(
    model: DiffusionModel,
    anchor: DiffusionModel,
    traj: TrajectoryBatch,
    weight: float,
    rows: np.ndarray | None = None,
) -> Tensor:
    """
    weight * mean ||eps_model(x_t, cond, t) - eps_anchor(x_t, t)||^2 over recorded states.

    The anchor is evaluated unconditionally and held constant; the model sees
    its condition at full strength.
    """
    traj = _rows(traj, rows)
    steps, n, d = traj.states.shape
    x_t = traj.states.reshape(steps * n, d)
    t = np.repeat(traj.timesteps, n)
    with nk.no_grad():
        target = anchor.eps(x_t, t).data
    cond = None if traj.cond is None else np.tile(traj.cond, (steps, 1))
    predicted = model.eps(x_t, t, cond)
    return nk.mul(weight, nk.mean(nk.square_norm(nk.sub(predicted, target), axis=1)))


def kl_anchor_gradient(
    model: DiffusionModel,
    anchor: DiffusionModel,
    traj: TrajectoryBatch,
    weight: float,
) -> dict[str, np.ndarray]:
    """Gradient of kl_anchor_loss by parameter name (exact zeros when weight is 0)."""
    params = model.params.tensors
    if weight == 0:
        return {name: np.zeros_like(p.data) for name, p in params.items()}
    nk.zero_grad(params)
    nk.backprop(kl_anchor_loss(model, anchor, traj, weight))
    grads = {name: g.copy() for name, g in nk.collect_grads(params).items()}
    nk.zero_grad(params)
    return grads


def clipped_surrogate(
    model: DiffusionModel,
    traj: TrajectoryBatch,
    advantages: np.ndarray,
    ratio_clip: float,
    rows: np.ndarray | None = None,
) -> tuple[Tensor, float]:
    """
    Pessimistic clipped objective for a cost.

    Mean over trajectories and stochastic steps of
    max(A * ratio, A * clip(ratio, 1 - eps, 1 + eps)).

    Returns:
        (surrogate tensor, fraction of ratios outside the clip interval)
    """
    log_new = step_log_probs(model, traj, rows)
    if log_new.shape[0] == 0:
        return Tensor(0.0), 0.0
    log_old = recorded_log_probs(traj, rows)
    adv = advantages if rows is None else advantages[rows]
    adv = np.broadcast_to(adv[None, :], log_new.shape)
    ratio = nk.exp(nk.sub(log_new, log_old))
    clipped = nk.clip(ratio, 1.0 - ratio_clip, 1.0 + ratio_clip)
    objective = nk.mean(nk.maximum(nk.mul(ratio, adv), nk.mul(clipped, adv)))
    outside = float(np.mean(np.abs(ratio.data - 1.0) > ratio_clip))
    return objective, outside


def policy_gradient_update(
    model: DiffusionModel,
    anchor: DiffusionModel,
    traj: TrajectoryBatch,
    rewards: RewardRecord,
    cfg: RLConfig,
    weight: float,
) -> PolicyUpdateStats:
    """
    cfg.policy_updates Adam steps on the clipped surrogate plus the anchor penalty.

    Each step accumulates gradients over cfg.grad_accum micro-batches of
    trajectories, clips the global norm at cfg.grad_clip and applies Adam.
    The training loop rolls out cfg.grad_accum * cfg.batch_size trajectories
    per phase, so each micro-batch is one independently sampled batch.

    Raises:
        NumericalError: If the surrogate or the penalty is not finite.
    """
    params = model.params.tensors
    optimizer = model.ensure_optimizer(cfg.lr)
    n = traj.size
    chunks = np.array_split(np.arange(n), min(cfg.grad_accum, n))

    surrogate_total = kl_total = norm_total = clip_total = 0.0
    for update in range(cfg.policy_updates):
        nk.zero_grad(params)
        surrogate_value = kl_value = clip_value = 0.0
        for rows in chunks:
            share = rows.size / n
            surrogate, outside = clipped_surrogate(model, traj, rewards.advantages, cfg.ratio_clip, rows)
            loss = surrogate
            kl = None
            if weight > 0:
                kl = kl_anchor_loss(model, anchor, traj, weight, rows)
                loss = nk.add(surrogate, kl)
            if not np.isfinite(loss.item()):
                raise NumericalError(
                    f"non-finite policy objective in update {update} "
                    f"(surrogate {surrogate.item()}, anchor {None if kl is None else kl.item()})"
                )
            nk.backprop(nk.mul(share, loss))
            surrogate_value += share * surrogate.item()
            kl_value += share * (0.0 if kl is None else kl.item())
            clip_value += share * outside
        grads = nk.collect_grads(params)
        norm = nk.clip_global_norm(grads, cfg.grad_clip)
        nk.adam_step(params, grads, optimizer)
        nk.zero_grad(params)
        model.update_ema()
        model.step += 1

        surrogate_total += surrogate_value
        kl_total += kl_value
        norm_total += norm
        clip_total += clip_value

    k = cfg.policy_updates
    return PolicyUpdateStats(surrogate_total / k, kl_total / k, norm_total / k, clip_total / k)


# =============================================================================
# JOINT CONSISTENCY
# =============================================================================

def draw_pairs(
    buffer: ReplayBuffer,
    n: int,
    rng: np.random.Generator,
    fresh: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    A training batch of (generated, observed) pairs.

    With a fresh batch, half the rows come from it (without replacement) and
    the rest from the buffer; otherwise everything comes from the buffer.
    """
    if fresh is None or fresh[0].shape[0] == 0:
        return buffer.sample(n, rng)
    n_fresh = min((n + 1) // 2, fresh[0].shape[0])
    picked = rng.choice(fresh[0].shape[0], size=n_fresh, replace=False)
    generated, observed = fresh[0][picked], fresh[1][picked]
    if n - n_fresh > 0:
        g, o = buffer.sample(n - n_fresh, rng)
        generated = np.concatenate([generated, g])
        observed = np.concatenate([observed, o])
    return generated, observed


def consistency_step(
    other_model: DiffusionModel,
    generated: np.ndarray,
    observed: np.ndarray,
    cfg: RLConfig,
    rng: np.random.Generator,
) -> float:
    """
    One denoising step teaching the specular model observed given generated.

    Returns:
        The loss before the update.
    """
    params = other_model.params.tensors
    optimizer = other_model.ensure_optimizer(cfg.lr)
    nk.zero_grad(params)
    loss = denoising_loss(other_model, observed, generated, cfg.drop_prob, rng)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite consistency loss for {other_model.role}")
    nk.backprop(loss)
    grads = nk.collect_grads(params)
    nk.clip_global_norm(grads, cfg.grad_clip)
    nk.adam_step(params, grads, optimizer)
    nk.zero_grad(params)
    other_model.update_ema()
    other_model.step += 1
    return value


def joint_consistency_update(
    other_model: DiffusionModel,
    buffer: ReplayBuffer,
    cfg: RLConfig,
    rng: np.random.Generator,
    fresh: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[float]:
    """
    cfg.consistency_updates denoising steps on generated pairs.

    Raises:
        DataError: If there is nothing to train on.
    """
    if len(buffer) == 0 and (fresh is None or fresh[0].shape[0] == 0):
        raise DataError("joint consistency update needs generated pairs; the buffer is empty")
    losses = []
    for _ in range(cfg.consistency_updates):
        generated, observed = draw_pairs(buffer, cfg.batch_size, rng, fresh)
        losses.append(consistency_step(other_model, generated, observed, cfg, rng))
    return losses


# =============================================================================
# TRAINING
# =============================================================================

def mec_training_step(
    cond_batch: np.ndarray,
    model: DiffusionModel,
    anchor: DiffusionModel,
    other_model: DiffusionModel,
    buffer: ReplayBuffer,
    cfg: RLConfig,
    rng: np.random.Generator,
    weight: float,
    baseline: RunningBaseline | None = None,
    step: int = 0,
    phase: str = "theta",
    project_onto: np.ndarray | None = None,
) -> StepDiagnostics:
    """
    One phase: sample, score, update the policy, then update the specular model.

    With project_onto, every generated row is replaced by its nearest row of
    that dataset before it is scored and stored, so the reward and the
    consistency pairs only ever see real data points. The trajectory densities
    still refer to the unprojected chain.
    """
    traj = sample(model, cond_batch, cfg.sample_config(), rng).trajectory
    generated = traj.final if project_onto is None else nn_project(traj.final, project_onto)
    raw = reward(other_model, cond_batch, generated, cfg.k_reward, rng, cfg.stratified_t, cfg.reward_use_ema)
    if not np.all(np.isfinite(raw)):
        raise NumericalError(f"non-finite reward at step {step} ({phase} phase)")
    record = RewardRecord.build(raw, baseline)

    try:
        stats = policy_gradient_update(model, anchor, traj, record, cfg, weight)
    except NumericalError as e:
        raise NumericalError(f"step {step} ({phase} phase): {e}") from None

    buffer.add(generated, cond_batch)
    losses = joint_consistency_update(other_model, buffer, cfg, rng, fresh=(generated, cond_batch))

    return StepDiagnostics(
        step=step,
        phase=phase,
        reward_mean=float(np.mean(raw)),
        reward_stderr=record.stderr,
        baseline=record.baseline,
        surrogate=stats.surrogate,
        kl=stats.kl,
        consistency_loss=float(np.mean(losses)) if losses else 0.0,
        grad_norm=stats.grad_norm,
        clip_fraction=stats.clip_fraction,
        buffer_size=len(buffer),
    )


def _points(data: TabularDataset | np.ndarray) -> np.ndarray:
    points = data.points if isinstance(data, TabularDataset) else np.asarray(data, dtype=np.float64)
    if points.shape[0] == 0:
        raise DataError("cannot couple an empty dataset")
    return points


def mec_training_loop(
    pair: CouplingPair,
    data_x: TabularDataset | np.ndarray,
    data_y: TabularDataset | np.ndarray,
    cfg: RLConfig,
    rng: np.random.Generator,
    on_step: Callable[[StepDiagnostics], None] | None = None,
    progress: bool = False,
) -> CouplingResult:
    """
    Alternate theta and phi phases for cfg.total_steps iterations.

    Data must already be normalized. Each iteration runs the theta phase on
    cfg.grad_accum batches of conditions from Y, then the phi phase on as many
    from X; the returned log
    holds one record per phase, strictly interleaved.
    """
    x = _points(data_x)
    y = _points(data_y)
    if x.shape[1] != pair.theta.data_dim or y.shape[1] != pair.phi.data_dim:
        raise ShapeError(
            f"data dimensions ({x.shape[1]}, {y.shape[1]}) do not match the models "
            f"({pair.theta.data_dim}, {pair.phi.data_dim})"
        )

    result = CouplingResult(pair)
    if cfg.total_steps == 0:
        return result

    buffers = {"theta": ReplayBuffer(cfg.capacity), "phi": ReplayBuffer(cfg.capacity)}
    baselines = {
        phase: RunningBaseline(cfg.baseline_momentum) if cfg.use_baseline else None
        for phase in ("theta", "phi")
    }
    # (phase, policy, anchor, specular model, conditions, generated-side data, anchor weight)
    phases = (
        ("theta", pair.theta, pair.theta_anchor, pair.phi, y, x, cfg.lambda_x),
        ("phi", pair.phi, pair.phi_anchor, pair.theta, x, y, cfg.lambda_y),
    )
    rollouts = cfg.batch_size * cfg.grad_accum

    for step in tqdm(range(cfg.total_steps), desc="couple", disable=not progress, leave=False):
        for phase, model, anchor, other, cond_data, own_data, weight in phases:
            cond_batch = cond_data[rng.integers(0, cond_data.shape[0], size=rollouts)]
            record = mec_training_step(
                cond_batch, model, anchor, other, buffers[phase], cfg, rng,
                weight, baselines[phase], step, phase,
                project_onto=own_data if cfg.project_train else None,
            )
            result.log.append(record)
            logger.debug(
                "step %d %s reward %.4f +- %.4f kl %.3g consistency %.4f clip %.2f",
                step, phase, record.reward_mean, record.reward_stderr, record.kl,
                record.consistency_loss, record.clip_fraction,
            )
            if on_step:
                on_step(record)

    last = result.log[-2:]
    logger.info(
        "coupling finished after %d steps: reward theta %.4f, phi %.4f",
        cfg.total_steps, last[0].reward_mean, last[1].reward_mean,
    )
    return result


# =============================================================================
# DISCRETE GRADIENT-SWAP CHECK
# =============================================================================

def _swap_fixture(m: int, n: int, rng: np.random.Generator, independent: bool) -> tuple[np.ndarray, np.ndarray]:
    """Logits of p(x|y) (m x n, one softmax per column) and p_Y."""
    if independent:
        return np.zeros((m, n)), np.full(n, 1.0 / n)
    p_y = rng.dirichlet(np.ones(n))
    # Tilt towards later x so the induced X marginal is clearly non-uniform.
    logits = rng.normal(size=(m, n)) + np.linspace(0.0, 2.0, m)[:, None]
    return logits, p_y


def _expected_cost_gradient(cond: np.ndarray, p_y: np.ndarray, cost: np.ndarray) -> np.ndarray:
    """d/dlogits of sum_{x,y} p_Y(y) p(x|y) cost(x,y) with cost held fixed."""
    centred = cost - np.sum(cond * cost, axis=0, keepdims=True)
    return p_y[None, :] * cond * centred


def verify_gradient_swap(
    m: int,
    n: int,
    rng: np.random.Generator,
    constrained: bool = True,
    independent: bool = False,
) -> float:
    """
    Largest elementwise gap between the two conditional-entropy gradients.

    p(x|y) is a table of column softmaxes, the joint is p(x|y) p_Y(y), the
    data X marginal is the one this joint induces, and p(y|x) is the exact
    reverse conditional, held fixed while differentiating. The first
    gradient is that of E[-log p(x|y)], the second that of E[-log p(y|x)].
    With constrained=True both are projected onto directions that keep the
    X marginal fixed, which is where the two must agree; without the
    projection they differ whenever that marginal is not uniform.
    """
    if not (1 <= m <= 5 and 1 <= n <= 5):
        raise UsageError(f"fixture supports 1..5 outcomes per side, got {m} x {n}")
    logits, p_y = _swap_fixture(m, n, rng, independent)
    cond = softmax(logits, axis=0)
    joint = cond * p_y[None, :]
    p_x = joint.sum(axis=1)
    reverse = joint / p_x[:, None]

    grad_forward = _expected_cost_gradient(cond, p_y, -np.log(cond))
    grad_reverse = _expected_cost_gradient(cond, p_y, -np.log(reverse))
    gap = (grad_forward - grad_reverse).reshape(-1)

    if constrained:
        # Jacobian of p_X with respect to the flattened logits.
        jac = np.zeros((m, m * n))
        for x in range(m):
            indicator = np.zeros((m, 1))
            indicator[x] = 1.0
            jac[x] = (p_y[None, :] * cond * (indicator - cond[x][None, :])).reshape(-1)
        projector = np.eye(m * n) - np.linalg.pinv(jac) @ jac
        gap = projector @ gap
    return float(np.max(np.abs(gap)))
