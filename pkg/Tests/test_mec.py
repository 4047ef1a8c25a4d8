"""
Tests for coupling two diffusion models: rewards, trajectory densities,
the clipped policy update, the anchor penalty, joint consistency and the
alternating training loop.
"""

from dataclasses import replace

import numpy as np
import pytest

from coupler import mec, numkit as nk
from coupler.diffusion import SampleConfig, ddim_coefficients, denoising_loss, sample
from coupler.errors import DataError, NumericalError, ShapeError, UsageError
from coupler.mec import (
    LOG_2PI,
    CouplingPair,
    ReplayBuffer,
    RewardRecord,
    RLConfig,
    RunningBaseline,
    StepDiagnostics,
    clipped_surrogate,
    consistency_step,
    draw_pairs,
    gaussian_log_density,
    importance_ratios,
    joint_consistency_update,
    kl_anchor_gradient,
    kl_anchor_loss,
    mec_training_loop,
    mec_training_step,
    policy_gradient_update,
    reward,
    trajectory_log_prob,
    verify_gradient_swap,
)


def _trajectory(model, n=5, seed=0, guidance=3.0, steps=4):
    cond = np.random.default_rng(seed).normal(size=(n, model.cond_dim))
    config = SampleConfig(n_steps=steps, guidance=guidance, eta=1.0, seed=seed, record_trajectory=True)
    return sample(model, cond, config).trajectory


def _perturb(model, seed=0, scale=0.3):
    """Move the zero-initialized conditioning maps so the condition matters."""
    rng = np.random.default_rng(seed)
    for name, tensor in model.params.tensors.items():
        if name.startswith(("hint.", "inject")):
            tensor.data[...] = scale * rng.normal(size=tensor.shape)


def _snapshot(model):
    return {name: value.copy() for name, value in model.params.arrays().items()}


class TestRLConfig:
    """Fine-tuning hyperparameters."""

    def test_defaults(self, reference_values):
        ref = reference_values["rl_defaults"]
        cfg = RLConfig()
        assert cfg.k_reward == ref["k_reward"]
        assert cfg.policy_updates == ref["policy_updates"]
        assert cfg.ratio_clip == ref["ratio_clip"]
        assert cfg.lambda_x == cfg.lambda_y == ref["lambda"]
        assert cfg.grad_accum == ref["grad_accum"]
        assert cfg.grad_clip == ref["grad_clip"]
        assert cfg.guidance_train == ref["guidance_train"]
        assert cfg.batch_size == ref["batch_size"]
        assert cfg.total_steps == ref["total_steps"]

    def test_capacity_defaults_to_fifty_batches(self):
        assert RLConfig(batch_size=4).capacity == 200
        assert RLConfig(batch_size=4, buffer_capacity=7).capacity == 7

    def test_sample_config_records_trajectories(self):
        config = RLConfig(ddim_steps=9, guidance_train=2.5, eta=0.5).sample_config()
        assert config.record_trajectory
        assert (config.n_steps, config.guidance, config.eta) == (9, 2.5, 0.5)
        assert not config.use_ema

    @pytest.mark.parametrize("kwargs", [
        {"lambda_x": -1.0},
        {"k_reward": 0},
        {"policy_updates": 0},
        {"grad_accum": 0},
        {"ratio_clip": 0.0},
        {"batch_size": 0},
        {"total_steps": -1},
        {"buffer_capacity": -5},
        {"baseline_momentum": 1.0},
        {"drop_prob": 1.5},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(UsageError):
            RLConfig(**kwargs)


class TestCouplingPair:
    """Construction from anchors."""

    def test_roles_and_dimensions(self, fresh_pair):
        assert (fresh_pair.theta.role, fresh_pair.phi.role) == ("theta", "phi")
        assert (fresh_pair.theta.data_dim, fresh_pair.theta.cond_dim) == (2, 3)
        assert (fresh_pair.phi.data_dim, fresh_pair.phi.cond_dim) == (3, 2)

    def test_anchors_are_not_shared(self, fresh_pair):
        fresh_pair.theta.params["in.w"].data[...] += 1.0
        assert not np.array_equal(fresh_pair.theta.params["in.w"].data, fresh_pair.theta_anchor.params["in.w"].data)

    def test_ema_weights_start_from_the_anchor_ema(self, make_model):
        theta_anchor, phi_anchor = make_model(2, seed=1), make_model(3, seed=2)
        for anchor in (theta_anchor, phi_anchor):
            anchor.enable_ema()
            for tensor in anchor.ema_params.tensors.values():
                tensor.data[...] += 0.1
        pair = CouplingPair.from_anchors(theta_anchor, phi_anchor)
        x_t = np.random.default_rng(0).normal(size=(4, 2))
        cond = np.random.default_rng(1).normal(size=(4, 3))
        np.testing.assert_allclose(
            pair.theta.eps(x_t, 5, cond, use_ema=True).data,
            theta_anchor.eps(x_t, 5, use_ema=True).data,
            atol=1e-12,
        )
        assert not np.allclose(pair.theta.eps(x_t, 5, cond).data, pair.theta.eps(x_t, 5, cond, use_ema=True).data)

    def test_mismatched_models_rejected(self, fresh_pair):
        with pytest.raises(ShapeError):
            CouplingPair(fresh_pair.phi, fresh_pair.theta, fresh_pair.theta_anchor, fresh_pair.phi_anchor)

    def test_unconditional_policy_rejected(self, fresh_pair):
        with pytest.raises(UsageError):
            CouplingPair(fresh_pair.theta_anchor, fresh_pair.phi, fresh_pair.theta_anchor, fresh_pair.phi_anchor)


class TestReplayBuffer:
    """FIFO store of generated pairs."""

    def test_evicts_oldest(self, rng):
        buffer = ReplayBuffer(3)
        buffer.add(np.arange(5.0)[:, None], np.arange(5.0)[:, None] * 10)
        assert len(buffer) == 3
        generated, observed = buffer.sample(200, rng)
        assert set(generated[:, 0]) == {2.0, 3.0, 4.0}
        np.testing.assert_array_equal(observed, generated * 10)

    def test_stores_copies(self, rng):
        buffer = ReplayBuffer(2)
        batch = np.ones((1, 2))
        buffer.add(batch, batch)
        batch[...] = 7.0
        generated, _ = buffer.sample(1, rng)
        np.testing.assert_array_equal(generated, [[1.0, 1.0]])

    def test_empty_buffer_cannot_sample(self, rng):
        with pytest.raises(DataError):
            ReplayBuffer(2).sample(1, rng)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            ReplayBuffer(2).add(np.ones((2, 1)), np.ones((3, 1)))

    def test_zero_capacity(self):
        with pytest.raises(UsageError):
            ReplayBuffer(0)


class TestBaseline:
    """Running-mean baseline and advantages."""

    def test_first_batch_sets_baseline(self):
        baseline = RunningBaseline(0.9)
        assert baseline.update(np.array([1.0, 3.0])) == 2.0
        assert baseline.update(np.array([12.0])) == pytest.approx(0.9 * 2.0 + 0.1 * 12.0)

    def test_constant_rewards_give_zero_advantage(self):
        record = RewardRecord.build(np.full(6, 4.2), RunningBaseline())
        np.testing.assert_array_equal(record.advantages, np.zeros(6))
        assert record.stderr == 0.0

    def test_without_baseline_advantages_are_rewards(self):
        rewards = np.array([1.0, 2.0])
        record = RewardRecord.build(rewards, None)
        np.testing.assert_array_equal(record.advantages, rewards)
        assert record.baseline == 0.0

    def test_stderr(self):
        record = RewardRecord.build(np.array([1.0, 3.0]), None)
        assert record.stderr == pytest.approx(np.sqrt(2.0) / np.sqrt(2.0))


class TestReward:
    """Negative log-likelihood under the specular model."""

    def test_exact_noise_predictor_scores_zero(self, fresh_pair, point_oracle, rng):
        point = np.array([0.1, -0.4, 2.0])
        oracle = point_oracle(fresh_pair.phi, point)
        observed = np.tile(point, (6, 1))
        values = reward(oracle, observed, rng.normal(size=(6, 2)), 3, rng)
        np.testing.assert_allclose(values, 0.0, atol=1e-8)

    def test_matched_pairs_score_better_than_shuffled(self, fresh_pair, paired_oracle, rng):
        matrix = rng.normal(size=(3, 2))
        oracle = paired_oracle(fresh_pair.phi, matrix)
        x = rng.normal(size=(200, 2))
        y = x @ matrix.T
        matched = reward(oracle, y, x, 3, np.random.default_rng(0))
        shuffled = reward(oracle, y, x[rng.permutation(200)], 3, np.random.default_rng(0))
        np.testing.assert_allclose(matched, 0.0, atol=1e-8)
        assert shuffled.mean() > matched.mean() + 3 * shuffled.std() / np.sqrt(200)

    @pytest.mark.parametrize("observed_shape,generated_shape", [
        ((4, 2), (4, 2)),
        ((4, 3), (4, 3)),
        ((4, 3), (5, 2)),
        ((3,), (4, 2)),
    ])
    def test_shape_errors(self, fresh_pair, rng, observed_shape, generated_shape):
        with pytest.raises(ShapeError):
            reward(fresh_pair.phi, np.zeros(observed_shape), np.zeros(generated_shape), 2, rng)

    def test_needs_conditional_model(self, fresh_pair, rng):
        with pytest.raises(ShapeError):
            reward(fresh_pair.phi_anchor, np.zeros((2, 3)), np.zeros((2, 2)), 2, rng)

    def test_standard_normal_log_density_at_zero(self):
        value = gaussian_log_density(np.zeros((1, 1)), np.zeros((1, 1)), 1.0).item()
        assert value == pytest.approx(-0.5 * LOG_2PI)


class TestTrajectoryDensities:
    """Per-step Gaussian log-densities and importance ratios."""

    def test_ratio_is_exactly_one_before_any_update(self, fresh_pair):
        _perturb(fresh_pair.theta)
        traj = _trajectory(fresh_pair.theta)
        ratios = importance_ratios(fresh_pair.theta, traj)
        assert ratios.shape == (3, 5)
        np.testing.assert_array_equal(ratios, np.ones((3, 5)))

    def test_log_prob_gradient_matches_finite_difference(self, fresh_pair):
        model = fresh_pair.theta
        _perturb(model)
        traj = _trajectory(model)
        target = model.params["out.b"]

        def value():
            with nk.no_grad():
                return nk.sum(trajectory_log_prob(model, traj)).item()

        nk.zero_grad(model.params.tensors)
        nk.backprop(nk.sum(trajectory_log_prob(model, traj)))
        np.testing.assert_allclose(target.grad, nk.finite_difference(value, target), rtol=1e-5, atol=1e-6)

    def test_deterministic_chain_has_no_density(self, fresh_pair):
        config = SampleConfig(n_steps=3, eta=0.0, seed=0, record_trajectory=True)
        traj = sample(fresh_pair.theta, np.zeros((2, 3)), config).trajectory
        assert trajectory_log_prob(fresh_pair.theta, traj).shape == (2,)
        surrogate, clipped = clipped_surrogate(fresh_pair.theta, traj, np.ones(2), 0.1)
        assert surrogate.item() == 0.0 and clipped == 0.0


class TestAnchorPenalty:
    """Noise-matching penalty towards the unconditional anchor."""

    def test_zero_for_fresh_model(self, fresh_pair):
        traj = _trajectory(fresh_pair.theta)
        assert kl_anchor_loss(fresh_pair.theta, fresh_pair.theta_anchor, traj, 1.0).item() == 0.0

    def test_zero_weight_gives_exact_zero_gradient(self, fresh_pair):
        _perturb(fresh_pair.theta)
        traj = _trajectory(fresh_pair.theta)
        grads = kl_anchor_gradient(fresh_pair.theta, fresh_pair.theta_anchor, traj, 0.0)
        for value in grads.values():
            np.testing.assert_array_equal(value, 0.0)

    def test_gradient_is_linear_in_weight(self, fresh_pair):
        _perturb(fresh_pair.theta)
        traj = _trajectory(fresh_pair.theta)
        single = kl_anchor_gradient(fresh_pair.theta, fresh_pair.theta_anchor, traj, 1e-3)
        double = kl_anchor_gradient(fresh_pair.theta, fresh_pair.theta_anchor, traj, 2e-3)
        assert any(np.any(v != 0) for v in single.values())
        for name in single:
            np.testing.assert_array_equal(double[name], 2.0 * single[name])

    def test_anchor_receives_no_gradient(self, fresh_pair):
        _perturb(fresh_pair.theta)
        traj = _trajectory(fresh_pair.theta)
        kl_anchor_gradient(fresh_pair.theta, fresh_pair.theta_anchor, traj, 1.0)
        assert all(t.grad is None for t in fresh_pair.theta_anchor.params.tensors.values())


class TestPolicyUpdate:
    """Clipped policy-gradient steps."""

    def test_zero_advantages_without_penalty_leave_parameters(self, fresh_pair, small_rl):
        model = fresh_pair.theta
        _perturb(model)
        traj = _trajectory(model)
        before = _snapshot(model)
        record = RewardRecord.build(np.full(traj.size, 3.0), RunningBaseline())
        stats = policy_gradient_update(model, fresh_pair.theta_anchor, traj, record, small_rl, weight=0.0)
        for name, value in model.params.arrays().items():
            np.testing.assert_array_equal(value, before[name])
        assert stats.grad_norm == 0.0 and stats.kl == 0.0

    def test_non_finite_advantage_raises(self, fresh_pair, small_rl):
        traj = _trajectory(fresh_pair.theta)
        record = RewardRecord(np.full(traj.size, np.nan), 0.0, np.full(traj.size, np.nan))
        with pytest.raises(NumericalError):
            policy_gradient_update(fresh_pair.theta, fresh_pair.theta_anchor, traj, record, small_rl, weight=0.0)

    def test_update_moves_parameters_and_counts_steps(self, fresh_pair, small_rl):
        model = fresh_pair.theta
        _perturb(model)
        traj = _trajectory(model)
        before = _snapshot(model)
        record = RewardRecord.build(np.linspace(-1.0, 1.0, traj.size), None)
        stats = policy_gradient_update(model, fresh_pair.theta_anchor, traj, record, small_rl, weight=1e-3)
        assert model.step == small_rl.policy_updates
        assert any(not np.array_equal(model.params[name].data, before[name]) for name in before)
        assert stats.grad_norm > 0.0
        assert 0.0 <= stats.clip_fraction <= 1.0

    def test_surrogate_at_unchanged_parameters_is_mean_advantage(self, fresh_pair):
        _perturb(fresh_pair.theta)
        traj = _trajectory(fresh_pair.theta)
        advantages = np.array([1.0, -2.0, 0.5, 3.0, 0.0])
        surrogate, clipped = clipped_surrogate(fresh_pair.theta, traj, advantages, 1e-4)
        assert surrogate.item() == pytest.approx(advantages.mean())
        assert clipped == 0.0

    def test_surrogate_gradient_matches_reinforce_expectation(self, make_model):
        # One stochastic step whose mean moves by b per unit of the output bias;
        # for the cost ||x'||^2 the exact gradient given x_T is 2 b mu.
        model = make_model(seed=4)
        config = SampleConfig(n_steps=2, guidance=0.0, eta=1.0, n_samples=10_000, seed=0,
                              record_trajectory=True, use_ema=False)
        traj = sample(model, None, config).trajectory
        assert traj.stochastic_steps().tolist() == [0]
        _, b, _ = ddim_coefficients(int(traj.timesteps[0]), int(traj.prev_timesteps[0]), 1.0, model.schedule)
        mu, x_prev, variance = traj.means[0], traj.next_states[0], float(traj.variances[0])
        costs = np.sum(x_prev ** 2, axis=1)

        nk.zero_grad(model.params.tensors)
        surrogate, _ = clipped_surrogate(model, traj, costs, 1e-4)
        nk.backprop(surrogate)
        gradient = model.params["out.b"].grad

        per_sample = costs[:, None] * b * (x_prev - mu) / variance
        stderr = per_sample.std(axis=0) / np.sqrt(traj.size)
        expected = np.mean(2.0 * b * mu, axis=0)
        assert np.all(np.abs(gradient - expected) < 3 * stderr)


class TestJointConsistency:
    """Specular model trained on generated pairs."""

    def test_empty_buffer_without_fresh_pairs(self, fresh_pair, small_rl, rng):
        with pytest.raises(DataError):
            joint_consistency_update(fresh_pair.phi, ReplayBuffer(4), small_rl, rng)

    def test_step_loss_is_the_denoising_loss(self, fresh_pair, small_rl):
        generated = np.random.default_rng(0).normal(size=(4, 2))
        observed = np.random.default_rng(1).normal(size=(4, 3))
        reference = fresh_pair.phi.copy()
        expected = denoising_loss(reference, observed, generated, small_rl.drop_prob, np.random.default_rng(7)).item()
        value = consistency_step(fresh_pair.phi, generated, observed, small_rl, np.random.default_rng(7))
        assert value == expected
        assert fresh_pair.phi.step == 1

    def test_draw_pairs_mixes_fresh_and_buffered(self, rng):
        buffer = ReplayBuffer(10)
        buffer.add(np.zeros((5, 1)), np.zeros((5, 1)))
        fresh = (np.ones((3, 1)), np.ones((3, 1)))
        generated, observed = draw_pairs(buffer, 4, rng, fresh)
        np.testing.assert_array_equal(generated[:, 0], [1.0, 1.0, 0.0, 0.0])
        np.testing.assert_array_equal(generated, observed)

    def test_draw_pairs_from_fresh_only(self, rng):
        fresh = (np.arange(4.0)[:, None], np.arange(4.0)[:, None])
        generated, _ = draw_pairs(ReplayBuffer(2), 1, rng, fresh)
        assert generated.shape == (1, 1)

    def test_update_runs_requested_steps(self, fresh_pair, small_rl, rng):
        buffer = ReplayBuffer(8)
        buffer.add(rng.normal(size=(4, 2)), rng.normal(size=(4, 3)))
        losses = joint_consistency_update(fresh_pair.phi, buffer, small_rl, rng)
        assert len(losses) == small_rl.consistency_updates
        assert all(np.isfinite(losses))


class TestTrainingStep:
    """One phase of the alternating loop."""

    def test_theta_phase(self, fresh_pair, small_rl, rng):
        buffer = ReplayBuffer(small_rl.capacity)
        cond_batch = rng.normal(size=(small_rl.batch_size, 3))
        record = mec_training_step(
            cond_batch, fresh_pair.theta, fresh_pair.theta_anchor, fresh_pair.phi,
            buffer, small_rl, rng, small_rl.lambda_x, RunningBaseline(), step=0, phase="theta",
        )
        assert isinstance(record, StepDiagnostics)
        assert record.phase == "theta" and record.buffer_size == small_rl.batch_size
        assert np.isfinite(record.reward_mean) and record.reward_mean > 0
        assert record.baseline == pytest.approx(record.reward_mean)
        assert fresh_pair.phi.step == small_rl.consistency_updates
        assert set(record.to_row()) >= {"step", "phase", "reward_mean", "kl", "buffer_size"}


class TestTrainingLoop:
    """Alternating theta and phi phases."""

    def test_zero_steps_return_immediately(self, fresh_pair, rng):
        result = mec_training_loop(fresh_pair, np.zeros((3, 2)), np.zeros((3, 3)), RLConfig(total_steps=0), rng)
        assert result.log == []
        assert result.pair is fresh_pair

    def test_phases_interleave_and_anchors_stay_frozen(self, fresh_pair, small_rl, rng):
        anchors = (_snapshot(fresh_pair.theta_anchor), _snapshot(fresh_pair.phi_anchor))
        seen = []
        result = mec_training_loop(
            fresh_pair, rng.normal(size=(20, 2)), rng.normal(size=(20, 3)), small_rl, rng, on_step=seen.append,
        )
        assert [r.phase for r in result.log] == ["theta", "phi"] * small_rl.total_steps
        assert [r.step for r in result.log] == [0, 0, 1, 1]
        assert seen == result.log
        for anchor, before in zip((fresh_pair.theta_anchor, fresh_pair.phi_anchor), anchors):
            for name, value in anchor.params.arrays().items():
                np.testing.assert_array_equal(value, before[name])

    def test_each_phase_rolls_out_one_batch_per_accumulation_step(self, fresh_pair, small_rl, rng):
        result = mec_training_loop(fresh_pair, rng.normal(size=(20, 2)), rng.normal(size=(20, 3)), small_rl, rng)
        rollouts = small_rl.batch_size * small_rl.grad_accum
        assert [r.buffer_size for r in result.log[:2]] == [rollouts, rollouts]

    def test_projected_rollouts_are_dataset_rows(self, fresh_pair, small_rl, rng, monkeypatch):
        x, y = rng.normal(size=(7, 2)), rng.normal(size=(9, 3))
        scored = []

        def record_reward(other_model, observed, generated, *args):
            scored.append(generated.copy())
            return np.zeros(generated.shape[0])

        monkeypatch.setattr(mec, "reward", record_reward)
        small_rl.project_train = True
        mec_training_loop(fresh_pair, x, y, small_rl, rng)
        assert len(scored) == 2 * small_rl.total_steps
        for generated, data in zip(scored, (x, y, x, y)):
            rows = {tuple(row) for row in data}
            assert all(tuple(row) in rows for row in generated)

    def test_dimension_mismatch(self, fresh_pair, small_rl, rng):
        with pytest.raises(ShapeError):
            mec_training_loop(fresh_pair, np.zeros((3, 3)), np.zeros((3, 2)), small_rl, rng)

    def test_empty_data(self, fresh_pair, small_rl, rng):
        with pytest.raises(DataError):
            mec_training_loop(fresh_pair, np.zeros((0, 2)), np.zeros((3, 3)), small_rl, rng)


class TestGradientSwap:
    """Conditional-entropy gradients agree under the marginal constraint."""

    @pytest.mark.parametrize("m,n", [(2, 2), (3, 4), (5, 5)])
    def test_independent_fixture_agrees_everywhere(self, m, n):
        assert verify_gradient_swap(m, n, np.random.default_rng(0), independent=True) < 1e-10

    @pytest.mark.parametrize("seed", range(20))
    def test_constrained_gradients_agree(self, seed):
        rng = np.random.default_rng(seed)
        m, n = (int(v) for v in rng.integers(1, 6, size=2))
        assert verify_gradient_swap(m, n, rng) < 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_unconstrained_gradients_differ(self, seed):
        assert verify_gradient_swap(3, 3, np.random.default_rng(seed), constrained=False) > 1e-3

    @pytest.mark.parametrize("m,n", [(0, 2), (2, 6)])
    def test_size_limits(self, m, n):
        with pytest.raises(UsageError):
            verify_gradient_swap(m, n, np.random.default_rng(0))


def _pretrained_anchors(pair_data, seed=0):
    """Anchors at default size, each trained for 5000 steps on 90% of its side."""
    from coupler.config import RunConfig
    from coupler.data import fit_normalizer, split_dataset
    from coupler.denoiser import init_params
    from coupler.diffusion import DiffusionModel, train_unconditional

    config = RunConfig()
    rng = np.random.default_rng(seed)
    anchors, splits = [], []
    for data in (pair_data.x, pair_data.y):
        train, held_out = split_dataset(data, 0.1, seed)
        normalizer = fit_normalizer(train)
        model = DiffusionModel(
            init_params(config.model.denoiser(data.dim), rng),
            config.schedule.build(),
            ema_decay=config.train.ema_decay,
            normalizer=normalizer,
        )
        model.enable_ema()
        train_unconditional(model, normalizer.apply(train.points), 5000, config.train.batch_size, rng,
                            lr=config.train.lr)
        anchors.append(model)
        splits.append((train, held_out))
    return anchors, splits


def _theta_rewards(pair, y_cond, cfg, seed):
    """Rewards of the theta phase on fixed conditions, with fixed sampling and scoring noise."""
    generated = sample(pair.theta, y_cond, replace(cfg.sample_config(), seed=seed)).samples
    return reward(pair.phi, y_cond, generated, cfg.k_reward, np.random.default_rng(seed))


@pytest.fixture(scope="module")
def gmm_run():
    """Rotated two-component mixture: pretrain, then couple for 2000 steps with default settings."""
    from coupler.data import SyntheticSpec, synth_coupled

    pair_data = synth_coupled(SyntheticSpec(n_samples=5000, seed=0))
    anchors, splits = _pretrained_anchors(pair_data)
    (x_train, x_held), (y_train, y_held) = splits
    cfg = RLConfig()
    y_eval = anchors[1].normalizer.apply(y_held.points)

    before = _theta_rewards(CouplingPair.from_anchors(*anchors), y_eval, cfg, seed=11)
    result = mec_training_loop(
        CouplingPair.from_anchors(*anchors),
        anchors[0].normalizer.apply(x_train.points),
        anchors[1].normalizer.apply(y_train.points),
        cfg, np.random.default_rng(0),
    )
    after = _theta_rewards(result.pair, y_eval, cfg, seed=11)
    return {"pair": result.pair, "anchors": anchors, "x_held": x_held, "y_held": y_held,
            "y_train": y_train, "before": before, "after": after}


@pytest.mark.slow
class TestCouplingEndToEnd:
    """Desk-scale coupling of a rotated mixture at default hyperparameters."""

    def test_reward_decreases_from_initialization(self, gmm_run):
        before, after = gmm_run["before"], gmm_run["after"]
        stderr = np.sqrt(before.var(ddof=1) / before.size + after.var(ddof=1) / after.size)
        assert before.mean() - after.mean() > 3 * stderr

    def test_translations_keep_clusters_apart(self, gmm_run):
        from coupler.metrics import majority_vote, mapping_purity, nearest_indices

        pair, x_held, y_train = gmm_run["pair"], gmm_run["x_held"], gmm_run["y_train"]
        x_cond = pair.phi.cond_normalizer.apply(x_held.points)
        generated = sample(pair.phi, x_cond, SampleConfig(seed=0)).samples
        reference = pair.phi.normalizer.apply(y_train.points)
        mapped = majority_vote(y_train.labels[nearest_indices(generated, reference, 5)])
        assert mapping_purity(x_held.labels, mapped).value >= 0.9

    def test_marginal_drift_is_bounded(self, gmm_run):
        from coupler.metrics import marginal_drift

        pair, theta_anchor = gmm_run["pair"], gmm_run["anchors"][0]
        held_out = theta_anchor.normalizer.apply(gmm_run["x_held"].points)
        assert marginal_drift(pair.theta, theta_anchor, held_out) <= 2.0

    def test_quantized_entropy_is_not_below_the_oracle(self, gmm_run):
        from coupler.metrics import oracle_gap

        pair, y_held = gmm_run["pair"], gmm_run["y_held"]
        y_cond = pair.theta.cond_normalizer.apply(y_held.points)
        generated = sample(pair.theta, y_cond, SampleConfig(seed=1)).samples
        gap = oracle_gap(generated, y_cond, bins=4)
        assert gap.learned >= gap.oracle - 0.1


@pytest.mark.slow
def test_linear_map_coupling_aligns_rows():
    from coupler.data import SyntheticSpec, synth_coupled
    from coupler.metrics import PairedEval, foscttm

    pair_data = synth_coupled(SyntheticSpec(generator="linear_map", dim=8, n_samples=5000, noise=0.1, seed=0))
    anchors, splits = _pretrained_anchors(pair_data)
    (x_train, _), (y_train, _) = splits
    result = mec_training_loop(
        CouplingPair.from_anchors(*anchors),
        anchors[0].normalizer.apply(x_train.points),
        anchors[1].normalizer.apply(y_train.points),
        RLConfig(), np.random.default_rng(0),
    )
    phi = result.pair.phi
    rows = np.arange(500)
    generated = sample(phi, phi.cond_normalizer.apply(pair_data.x.points[rows]), SampleConfig(seed=0)).samples
    truth = phi.normalizer.apply(pair_data.y.points[pair_data.correspondence[rows]])
    assert foscttm(PairedEval(generated, truth, np.arange(rows.size))).value < 0.25


@pytest.mark.slow
def test_trained_specular_model_prefers_matched_pairs():
    from coupler.data import SyntheticSpec, fit_normalizer, synth_coupled
    from coupler.denoiser import DenoiserConfig, init_params
    from coupler.diffusion import DiffusionModel, denoising_update, make_linear_schedule

    pair_data = synth_coupled(SyntheticSpec(n_samples=4000, shuffle=False, seed=0))
    x = fit_normalizer(pair_data.x).apply(pair_data.x.points)
    y = fit_normalizer(pair_data.y).apply(pair_data.y.points)
    rng = np.random.default_rng(0)
    phi = DiffusionModel(init_params(DenoiserConfig(2, 2, [64, 64], 16), rng), make_linear_schedule(100, 1e-3, 0.1))
    for _ in range(3000):
        rows = rng.integers(0, 3500, size=128)
        denoising_update(phi, y[rows], x[rows], 0.1, rng, 1.0, 2e-3)

    held = np.arange(3500, 4000)
    matched = reward(phi, y[held], x[held], 3, np.random.default_rng(1))
    shuffled = reward(phi, y[held], x[rng.permutation(held)], 3, np.random.default_rng(1))
    stderr = np.sqrt(matched.var(ddof=1) / matched.size + shuffled.var(ddof=1) / shuffled.size)
    assert shuffled.mean() - matched.mean() > 3 * stderr
