import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from randbilliard import (EulerConfig, HiddenLaw, ScatterMatrices, chain_vs_sde_compare,
                          constant_model, flat_family, laguerre1d_model, laguerre_model,
                          legendre_model, mb_model, normalized_laguerre_model,
                          second_order_coefficients, simulate_ensemble, simulate_path, tent_family)
from randbilliard.diffusion import em_step
from randbilliard.errors import DomainError, StuckAtBoundary
from randbilliard.operators import first_order_coefficients
from randbilliard.rng import stream
from randbilliard.stats import MBFull, UniformBall, ks_test

EX3 = ScatterMatrices(np.diag([1.5, 0.5, 0.0]), 1, 1 / 3)


def _legendre_coefficients(lams, v):
    """Second-order coefficients and drift of ``2 sum lam_i [(1-|v|^2) d_ii - 2 v_i d_i]``."""
    lams = np.asarray(lams, dtype=float)
    return 2 * (1 - v @ v) * np.diag(lams), -4 * lams * v


# ------------------------------------------------------------------- em_step

def test_em_step_examples():
    assert np.array_equal(em_step(legendre_model([2.5, 1.0]), [0.0, 0.0], 0.01, [0.0, 0.0]), [0.0, 0.0])
    v = em_step(normalized_laguerre_model(), [10.0], 0.001, [0.0])
    assert v[0] == pytest.approx(9.9901, abs=1e-12)


def test_em_step_uses_scaled_increment():
    model = laguerre_model(0.5, 1.0)
    v = em_step(model, [2.0], 0.04, [1.0])
    b = model.diffusion_map([2.0])[0, 0]
    assert v[0] == pytest.approx(2.0 + (0.5 - 2.0) * 0.04 + b * 0.2, rel=1e-14)


# ------------------------------------------------- generator consistency

def test_mb_diffusion_matches_generator():
    model = mb_model(EX3)
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = np.array([rng.normal(), -rng.uniform(0.1, 3)])
        a = second_order_coefficients(EX3, v)
        b = model.paper_diffusion(v)
        assert np.allclose(b @ b.T, a / 2, atol=1e-9, rtol=0)
        B = model.diffusion_map(v)
        assert np.allclose(B @ B.T, 2 * a, atol=1e-9, rtol=0)
        assert np.allclose(model.drift(v), first_order_coefficients(EX3, v), atol=1e-12)


def test_mb_paper_diffusion_columns():
    # b(v) u = v_m S u - <S v, u> e_m + Tr(C Lambda)^{1/2} u_m e_m with S = Lambda_obs^{1/2}
    model = mb_model(EX3)
    v = np.array([0.4, -1.3])
    S = np.diag([math.sqrt(0.5), 0.0])
    for u in np.eye(2):
        expected = v[-1] * S @ u
        expected[-1] += -(S @ v) @ u + math.sqrt(0.5) * u[-1]
        assert np.allclose(model.paper_diffusion(v) @ u, expected, atol=1e-14)


def test_mb_paper_drift_form():
    model = mb_model(EX3)
    v = np.array([0.4, -1.3])
    q = 0.5 * 0.4**2
    expected = np.array([-2 * 0.5 * 0.4, (1 / v[1] - 3 * v[1]) * (q + 0.5)])
    assert np.allclose(model.paper_drift(v), expected, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 5), st.floats(0.1, 5), st.floats(-0.7, 0.7), st.floats(-0.7, 0.7))
def test_legendre_model_matches_generator(l1, l2, x, y):
    v = np.array([x, y])
    model = legendre_model([l1, l2])
    a, beta = _legendre_coefficients([l1, l2], v)
    B = model.diffusion_map(v)
    assert np.allclose(B @ B.T, 2 * a, atol=1e-12)
    assert np.allclose(model.drift(v), beta, atol=1e-12)
    # the customary written form: [2 (1 - |v|^2) Lambda]^{1/2}
    b = model.paper_diffusion(v)
    assert np.allclose(b @ b.T, a, atol=1e-12)
    # the drift always points into the disc
    assert model.drift(v) @ v < 0 or np.allclose(v, 0)


def test_laguerre_models():
    m = laguerre1d_model(2, 0.25, 1.5)
    c = 2 * 2 * 0.25 * 1.5
    assert m.drift([0.8])[0] == pytest.approx(c * (1 / 0.8 - 0.8 / 1.5), rel=1e-14)
    assert m.paper_diffusion([0.8])[0, 0] == pytest.approx(math.sqrt(c), rel=1e-14)
    assert m.diffusion_map([0.8])[0, 0] ** 2 == pytest.approx(2 * c, rel=1e-14)
    n = normalized_laguerre_model()
    assert n.drift([2.0])[0] == pytest.approx(0.5 - 2.0)
    # written form "dV = (1/V - V) dt + dB"; the simulated noise is sqrt(2) so that the
    # stationary law is v exp(-v^2/2), whose mean is sqrt(pi/2)
    assert n.paper_diffusion([2.0])[0, 0] == pytest.approx(1.0)
    assert n.diffusion_map([2.0])[0, 0] == pytest.approx(math.sqrt(2))


def test_degenerate_models_rejected():
    with pytest.raises(DomainError):
        legendre_model([0.0, 0.0])
    with pytest.raises(DomainError):
        mb_model(ScatterMatrices(np.zeros((3, 3)), 1, 1.0))
    with pytest.raises(DomainError):
        mb_model(ScatterMatrices(np.diag([0.5, 0.0]), 0))
    with pytest.raises(DomainError):
        laguerre_model(0.0, 1.0)


# --------------------------------------------------------------- paths

def test_legendre_path_stays_in_disc():
    path = simulate_path(legendre_model([2.5, 1.0]), EulerConfig(1e-4, 50_000, np.zeros(2), seed=3))
    assert path.states.shape == (50_001, 2)
    assert np.all(np.sum(path.states**2, axis=1) <= 1)
    assert path.times[-1] == pytest.approx(5.0)


def test_mb_path_stays_in_half_plane():
    path = simulate_path(mb_model(EX3), EulerConfig(1e-3, 20_000, np.array([0.0, -1.0]), seed=4))
    assert np.all(path.states[:, -1] < 0)
    assert np.all(np.isfinite(path.states))


def test_laguerre_path_stays_positive_and_records():
    path = simulate_path(normalized_laguerre_model(),
                         EulerConfig(1e-3, 10_000, np.array([10.0]), seed=0, record_every=10))
    assert path.states.shape == (1001, 1)
    assert np.all(path.states > 0)
    assert path.times[1] == pytest.approx(0.01)


def test_paths_are_deterministic_and_block_independent():
    model = legendre_model([2.5, 1.0])
    cfg = EulerConfig(1e-3, 5000, np.array([0.1, 0.2]), seed=9)
    a = simulate_path(model, cfg)
    b = simulate_path(model, cfg)
    c = simulate_path(model, EulerConfig(1e-3, 5000, np.array([0.1, 0.2]), seed=9, block=777))
    d = simulate_path(model, EulerConfig(1e-3, 5000, np.array([0.1, 0.2]), seed=10))
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.states, c.states)
    assert not np.array_equal(a.states, d.states)


def test_initial_state_must_be_inside():
    with pytest.raises(DomainError):
        simulate_path(legendre_model([1.0, 1.0]), EulerConfig(1e-3, 10, np.array([0.6, 0.8])))
    with pytest.raises(DomainError):
        simulate_path(normalized_laguerre_model(), EulerConfig(1e-3, 10, np.array([0.0])))


def test_stuck_at_boundary():
    with pytest.raises(StuckAtBoundary):
        simulate_path(legendre_model([1.0]),
                      EulerConfig(100.0, 5, np.array([0.5]), max_retries=1, max_halvings=0))


def test_constant_model_does_not_move():
    path = simulate_path(constant_model(2), EulerConfig(0.1, 100, np.array([0.3, -0.4])))
    assert np.all(path.states == [0.3, -0.4])


# -------------------------------------------------- stationarity of laws

def test_laguerre_preserves_speed_law():
    rng = stream(1)
    s2 = 1.0
    V0 = sps.rayleigh(scale=math.sqrt(s2)).rvs(3000, random_state=rng)[:, None]
    X = simulate_ensemble(laguerre_model(0.5, s2), V0, 1e-3, 500, seed=2)
    assert ks_test(X[:, 0], sps.rayleigh(scale=math.sqrt(s2)).cdf).passed(0.01)


def test_mb_diffusion_preserves_mb_law():
    law = MBFull(2, 1 / 3)
    V0 = law.sample(stream(3), 3000)
    X = simulate_ensemble(mb_model(EX3), V0, 1e-3, 500, seed=4)
    assert ks_test(X[:, 0], law.marginal_cdf(0)).passed(0.01)
    assert ks_test(X[:, 1], law.marginal_cdf(1)).passed(0.01)


def test_legendre_preserves_uniform_law():
    V0 = UniformBall(2).sample(stream(50), 3000)
    X = simulate_ensemble(legendre_model([2.5, 1.0]), V0, 1e-4, 2000, seed=0)
    assert ks_test(np.linalg.norm(X, axis=1), UniformBall(2).radius_cdf).passed(0.01)
    ang = np.arctan2(X[:, 1], X[:, 0])
    assert ks_test(ang, lambda a: (a + math.pi) / (2 * math.pi)).passed(0.01)


# ------------------------------------------------------- chain vs SDE

def test_chain_vs_sde_flat_profile_is_exact():
    r = chain_vs_sde_compare(flat_family(1), HiddenLaw.none(), constant_model(2), 0.2, 200,
                             [0.04, 0.01], initial=[0.1, -0.9], seed=1)
    assert all(row["ks_max"] == 0 and row["mean_diff"] == 0 and row["cov_diff"] == 0
               for row in r["rows"])
    assert [row["steps"] for row in r["rows"]] == [5, 20]


def test_chain_vs_sde_random_elastic_distance_decreases():
    r = chain_vs_sde_compare(tent_family(1, heat_bath=False), HiddenLaw.none(), legendre_model([1.0]),
                             0.2, 1000, [0.04, 0.01, 0.0025], initial=[0.0], seed=1)
    ks = [row["ks_max"] for row in r["rows"]]
    assert ks[0] > ks[1] > ks[2]
