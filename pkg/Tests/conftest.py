"""
Pytest configuration and shared fixtures.

Models here are desk-scale: a short noise schedule and narrow MLPs, so the
whole fast suite runs in seconds.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from coupler.denoiser import DenoiserConfig, init_params
from coupler.diffusion import DiffusionModel, make_linear_schedule
from coupler.mec import CouplingPair, RLConfig
from coupler.numkit import Tensor


SMALL_T = 20


class PointOracle(DiffusionModel):
    """Recovers the exact noise for data concentrated on one point."""

    def __init__(self, base: DiffusionModel, point):
        super().__init__(params=base.params, schedule=base.schedule)
        self.point = np.asarray(point, dtype=np.float64)

    def eps(self, x_t, t, cond=None, null_mask=None, use_ema=False):
        x_t = np.asarray(x_t, dtype=np.float64)
        ab = self.schedule.alpha_bar(np.broadcast_to(np.asarray(t), (x_t.shape[0],)))[:, None]
        return Tensor((x_t - np.sqrt(ab) * self.point) / np.sqrt(1.0 - ab))


class ZeroModel(DiffusionModel):
    """Always predicts zero noise."""

    def __init__(self, base: DiffusionModel):
        super().__init__(params=base.params, schedule=base.schedule)

    def eps(self, x_t, t, cond=None, null_mask=None, use_ema=False):
        return Tensor(np.zeros(np.shape(x_t)))


class GaussianOracle(DiffusionModel):
    """Exact noise predictor for data drawn from N(0, std^2 I)."""

    def __init__(self, base: DiffusionModel, std: float):
        super().__init__(params=base.params, schedule=base.schedule)
        self.std = float(std)

    def eps(self, x_t, t, cond=None, null_mask=None, use_ema=False):
        x_t = np.asarray(x_t, dtype=np.float64)
        ab = self.schedule.alpha_bar(np.broadcast_to(np.asarray(t), (x_t.shape[0],)))[:, None]
        return Tensor(np.sqrt(1.0 - ab) * x_t / (ab * self.std ** 2 + 1.0 - ab))


class PairedOracle(DiffusionModel):
    """Conditional model of data that is an exact linear image of its condition."""

    def __init__(self, base: DiffusionModel, matrix):
        super().__init__(params=base.params, schedule=base.schedule)
        self.matrix = np.asarray(matrix, dtype=np.float64)

    def eps(self, x_t, t, cond=None, null_mask=None, use_ema=False):
        x_t = np.asarray(x_t, dtype=np.float64)
        ab = self.schedule.alpha_bar(np.broadcast_to(np.asarray(t), (x_t.shape[0],)))[:, None]
        target = np.asarray(cond, dtype=np.float64) @ self.matrix.T
        return Tensor((x_t - np.sqrt(ab) * target) / np.sqrt(1.0 - ab))


@pytest.fixture
def fixtures_dir() -> Path:
    """Path to the fixtures directory."""
    return Path(__file__).parent / "fixtures"


@pytest.fixture
def reference_values(fixtures_dir: Path) -> dict:
    """Regression constants from reference_values.json."""
    with open(fixtures_dir / "reference_values.json") as f:
        return json.load(f)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def make_model():
    """Factory for small random models."""
    def build(data_dim=2, cond_dim=None, seed=0, T=SMALL_T, hidden=(8, 8), time_embed_dim=8):
        config = DenoiserConfig(data_dim, cond_dim, list(hidden), time_embed_dim)
        params = init_params(config, np.random.default_rng(seed))
        return DiffusionModel(params=params, schedule=make_linear_schedule(T, 1e-3, 0.2))
    return build


@pytest.fixture
def fresh_pair(make_model) -> CouplingPair:
    """Conditional models freshly built from two random anchors (X in 2D, Y in 3D)."""
    return CouplingPair.from_anchors(make_model(2, seed=1), make_model(3, seed=2))


@pytest.fixture
def small_rl() -> RLConfig:
    return RLConfig(
        batch_size=4,
        ddim_steps=4,
        grad_accum=2,
        policy_updates=2,
        consistency_updates=2,
        k_reward=2,
        guidance_train=2.0,
        lr=1e-3,
        total_steps=2,
    )


@pytest.fixture
def point_oracle():
    return PointOracle


@pytest.fixture
def zero_model():
    return ZeroModel


@pytest.fixture
def gaussian_oracle():
    return GaussianOracle


@pytest.fixture
def paired_oracle():
    return PairedOracle
