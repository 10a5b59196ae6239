import math

import numpy as np
import pytest
from scipy import stats as sps

from randbilliard import (ArcProfile, ChainConfig, FlatProfile, HiddenLaw, MovingWallProfile,
                          detailed_balance_statistic, estimate_P_phi, run_chain, run_chain_arrays,
                          sample_scatter, sample_stationary, scatter_many)
from randbilliard import scattering
from randbilliard.errors import DomainError, ResampleBudgetExceeded
from randbilliard.rng import stream
from randbilliard.scattering import deterministic_exits
from randbilliard.stats import CosineAngle, MBSpeed, angle_from_normal, ks_test
from randbilliard.testfunctions import Constant, RadialBump

ARC = ArcProfile(1, 3)
WALL = MovingWallProfile(1, 1, 1, ArcProfile(1, 3))     # angle-figure parameters, sigma^2 = 1/2
WALL_HIDDEN = HiddenLaw(1, 0.5)
V45 = np.array([math.sqrt(0.5), -math.sqrt(0.5)])


def test_hidden_law_validation():
    with pytest.raises(DomainError):
        HiddenLaw(-1, 1.0)
    with pytest.raises(DomainError):
        HiddenLaw(2, 0.0)
    assert HiddenLaw.none().k == 0


def test_dimension_mismatch_rejected():
    with pytest.raises(DomainError):
        sample_scatter(ARC, HiddenLaw(1, 1.0), V45, stream(0))
    with pytest.raises(DomainError):
        sample_scatter(ARC, HiddenLaw.none(), np.array([0.1, 0.2]), stream(0))


# ---------------------------------------------------------- stationary laws

def test_stationary_cosine_law_sampler():
    V = sample_stationary(HiddenLaw.none(), 2, 100_000, stream(1))
    assert np.allclose(np.linalg.norm(V, axis=1), 1)
    assert ks_test(angle_from_normal(V), CosineAngle().cdf).passed(0.01)


def test_stationary_mb_sampler():
    V = sample_stationary(WALL_HIDDEN, 2, 100_000, stream(2))
    assert np.all(V[:, -1] < 0)
    assert ks_test(np.linalg.norm(V, axis=1), MBSpeed(2, 0.5).cdf).passed(0.01)
    assert ks_test(angle_from_normal(V), CosineAngle().cdf).passed(0.01)
    # tangential coordinate is N(0, sigma^2), normal coordinate Rayleigh(sigma)
    assert ks_test(V[:, 0], sps.norm(scale=math.sqrt(0.5)).cdf).passed(0.01)
    assert ks_test(-V[:, 1], sps.rayleigh(scale=math.sqrt(0.5)).cdf).passed(0.01)


def test_stationary_three_dimensional_cosine_law():
    # projection of the cosine law to the unit disc is uniform: |vbar|^2 ~ U(0, 1)
    V = sample_stationary(HiddenLaw.none(), 3, 100_000, stream(3))
    r2 = np.sum(V[:, :2] ** 2, axis=1)
    assert ks_test(r2, lambda x: np.clip(x, 0, 1)).passed(0.01)


# ------------------------------------------------------------ scattering

def test_flat_profile_returns_velocity_exactly():
    v = np.array([0.3, -0.7])
    V, coll = sample_scatter(FlatProfile([1.0]), HiddenLaw.none(), v, stream(0))
    assert np.array_equal(V, v) and coll == 1


def test_speed_conserved_without_hidden_coordinates():
    V0 = sample_stationary(HiddenLaw.none(), 2, 20_000, stream(4), speed=2.5)
    V1, _, _ = scatter_many(ArcProfile(1, 1.3), HiddenLaw.none(), V0, stream(5))
    assert np.allclose(np.linalg.norm(V1, axis=1), 2.5, rtol=1e-10, atol=0)
    assert np.all(V1[:, -1] < 0)


def test_exit_angle_matches_deterministic_pushforward():
    N = 10**6
    V, _, _ = scatter_many(ARC, HiddenLaw.none(), np.tile(V45, (N, 1)), stream(6))
    grid = (np.arange(N) + 0.5) / N
    Vg, _, status = deterministic_exits(ARC, V45, grid[:, None])
    assert np.all(status == 0)
    d = sps.ks_2samp(angle_from_normal(V), angle_from_normal(Vg)).statistic
    assert d < 0.005


def test_resample_budget(monkeypatch):
    def always_fail(self, V, rbar, w):
        N = len(V)
        return np.full((N, V.shape[1]), np.nan), np.zeros(N, dtype=np.int64), np.full(N, 3)

    monkeypatch.setattr(scattering._Batch, "run", always_fail)
    with pytest.raises(ResampleBudgetExceeded):
        scatter_many(ARC, HiddenLaw.none(), V45[None], stream(0), max_resamples=5)


def test_failed_events_are_redrawn_whole(monkeypatch):
    original = scattering._Batch.run
    calls = []

    def flaky(self, V, rbar, w):
        out, coll, status = original(self, V, rbar, w)
        if not calls:
            status = status.copy()
            status[::2] = 3
        calls.append((rbar.copy(), w.copy()))
        return out, coll, status

    monkeypatch.setattr(scattering._Batch, "run", flaky)
    V, _, res = scatter_many(WALL, WALL_HIDDEN, np.tile([0.1, -1.0], (10, 1)), stream(1))
    assert res.tolist() == [1, 0] * 5
    # the retry draws fresh entry points *and* hidden velocities
    assert calls[1][0].shape == (5, 2) and calls[1][1].shape == (5, 1)
    assert not np.allclose(calls[1][1][:, 0], calls[0][1][::2, 0])


# ------------------------------------------------------------------ chains

def test_flat_chain_is_constant():
    v0 = np.array([0.2, -0.9])
    run = run_chain_arrays(ChainConfig(FlatProfile([1.0]), HiddenLaw.none(), v0, 100))
    assert np.all(run.v == v0)


def test_chain_generator_and_determinism():
    cfg = ChainConfig(WALL, WALL_HIDDEN, np.array([0.1, -1.0]), 500, seed=42)
    a = list(run_chain(cfg))
    b = list(run_chain(cfg))
    assert len(a) == 501 and a[0].step == 0
    assert all(np.array_equal(x.v, y.v) and x.collisions == y.collisions for x, y in zip(a, b))
    assert all(s.v[-1] < 0 for s in a)
    c = run_chain_arrays(ChainConfig(WALL, WALL_HIDDEN, np.array([0.1, -1.0]), 500, seed=43))
    assert not np.array_equal(c.v, np.array([s.v for s in a]))


def test_chain_block_boundaries_do_not_change_output():
    base = dict(profile=WALL, hidden=WALL_HIDDEN, initial_v=np.array([0.1, -1.0]), steps=1000, seed=5)
    a = run_chain_arrays(ChainConfig(**base))
    b = run_chain_arrays(ChainConfig(**base, block=7))
    assert np.array_equal(a.v, b.v)


def test_example_trajectory_parameters_run():
    prof = MovingWallProfile(1, 80, 1, ArcProfile(1, 4))
    hidden = HiddenLaw(1, 80.0)     # sigma^2 = (m0/m1) sigma0^2 / a1^2 with sigma0 = 1
    run = run_chain_arrays(ChainConfig(prof, hidden, np.array([0.0, -8.0]), 10_000, seed=0))
    speed = np.linalg.norm(run.v, axis=1)
    assert np.all(np.isfinite(speed)) and np.all(speed > 0)
    assert np.all(run.v[:, -1] < 0)


def test_chain_rejects_upward_start():
    with pytest.raises(DomainError):
        run_chain_arrays(ChainConfig(ARC, HiddenLaw.none(), np.array([0.1, 0.5]), 10))


# ------------------------------------------------------------- P phi

def test_P_constant_is_one():
    mean, se = estimate_P_phi(WALL, WALL_HIDDEN, [0.2, -1.0], Constant(1.0), 1000)
    assert mean == 1.0 and se == 0.0


def test_P_on_flat_profile_is_identity():
    phi = RadialBump([0.3, -0.8], 0.5)
    v = np.array([0.2, -0.7])
    mean, se = estimate_P_phi(FlatProfile([1.0]), HiddenLaw.none(), v, phi, 1000)
    assert mean == pytest.approx(float(phi(v)), abs=1e-15) and se == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("sampler", ["mc", "rqmc"])
def test_P_matches_quadrature_oracle(sampler):
    phi = RadialBump([0.5, -0.85], 0.4)
    N = 10**6
    Vg, _, _ = deterministic_exits(ARC, V45, ((np.arange(N) + 0.5) / N)[:, None])
    exact = float(np.mean(phi(Vg)))
    mean, se = estimate_P_phi(ARC, HiddenLaw.none(), V45, phi, N, seed=3, sampler=sampler)
    assert abs(mean - exact) < 3 * se + 1e-12
    assert se > 0


def test_P_requires_positive_samples():
    with pytest.raises(DomainError):
        estimate_P_phi(ARC, HiddenLaw.none(), V45, Constant(), 0, sampler="rqmc")


# ---------------------------------------------------- stationarity & balance

def test_one_step_preserves_cosine_law():
    N = 10**6
    V0 = sample_stationary(HiddenLaw.none(), 2, N, stream(7))
    V1, _, _ = scatter_many(ARC, HiddenLaw.none(), V0, stream(8))
    assert ks_test(angle_from_normal(V1), CosineAngle().cdf).passed(0.01)


def test_one_step_preserves_mb_law():
    N = 10**6
    V0 = sample_stationary(WALL_HIDDEN, 2, N, stream(9))
    V1, _, _ = scatter_many(WALL, WALL_HIDDEN, V0, stream(10))
    assert ks_test(angle_from_normal(V1), CosineAngle().cdf).passed(0.01)
    assert ks_test(np.linalg.norm(V1, axis=1), MBSpeed(2, 0.5).cdf).passed(0.01)


def test_detailed_balance():
    f = RadialBump([math.sin(0.4), -math.cos(0.4)], 0.5)
    g = RadialBump([math.sin(-0.2), -math.cos(-0.2)], 0.5)
    stat = detailed_balance_statistic(ARC, HiddenLaw.none(), f, g, 10**6, seed=1)
    assert stat.statistic < 3 * stat.std_error
    same = detailed_balance_statistic(ARC, HiddenLaw.none(), f, f, 10_000)
    assert same.statistic == 0.0
    flat = detailed_balance_statistic(FlatProfile([1.0]), HiddenLaw.none(), f, g, 10_000)
    assert flat.statistic <= 3 * flat.std_error + 1e-15


def test_detailed_balance_with_hidden_velocity():
    f = RadialBump([0.4, -0.6], 0.5)
    g = RadialBump([-0.3, -0.9], 0.6)
    stat = detailed_balance_statistic(WALL, WALL_HIDDEN, f, g, 500_000, seed=2)
    assert stat.statistic < 3 * stat.std_error
