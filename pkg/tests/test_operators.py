import math

import numpy as np
import pytest
from scipy import integrate

from randbilliard import (ArcProfile, FlatProfile, MovingWallProfile, ScatterMatrices, TentProfile,
                          adjoint_pairings, arc_family, compute_A, ellipticity_symbol, flat_family,
                          flatness, generator_convergence, kbig_apply, laguerre_apply,
                          laguerre_sturm_liouville_apply, lambda_from_family, legendre_apply,
                          mb_dstar_d_apply, mb_laplacian_apply, moving_wall_family,
                          second_order_coefficients, tent_family)
from randbilliard.errors import BudgetExceeded, DomainError
from randbilliard.operators import _gauss_grid, first_order_coefficients, mb_gradient_apply
from randbilliard.scattering import HiddenLaw
from randbilliard.testfunctions import (Constant, PolyBump, Product, Projected, Quadratic,
                                        RadialBump, TestFunction)

# matrices of the two-dimensional MB example: Lambda = diag(3/2 hidden, 1/2, 0), sigma^2 = 1/3
EX3 = ScatterMatrices(np.diag([1.5, 0.5, 0.0]), 1, 1 / 3)


def _random_matrices(rng, k, m):
    d = k + m
    L = np.zeros((d, d))
    H = rng.normal(size=(k, k))
    L[:k, :k] = H @ H.T + 0.2 * np.eye(k)
    B = rng.normal(size=(m - 1, m - 1))
    L[k:d - 1, k:d - 1] = B @ B.T + 0.1 * np.eye(m - 1)
    return ScatterMatrices(L, k, float(rng.uniform(0.2, 3.0)))


def _random_pair(rng, m):
    """A polynomial bump centred in the lower half-space and a point in its support."""
    c = rng.normal(size=m)
    c[-1] = -rng.uniform(0.8, 2.0)
    r = rng.uniform(0.3, 0.7)
    A = rng.normal(size=(m, m))
    phi = PolyBump(c, r, A + A.T, rng.normal(size=m), 1.0)
    u = rng.normal(size=m)
    v = c + rng.uniform(0, 0.9) * r * u / np.linalg.norm(u)
    return phi, v


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


# ---------------------------------------------------------- test functions

FUNCS = [RadialBump([0.1, -0.5], 0.7), PolyBump([0.0, -1.0, 0.3], 0.8, np.eye(3), [1, 0, -1]),
         Projected(RadialBump([0.2], 0.9), [0]),
         Product(RadialBump([0.0, -1.0], 1.0), Quadratic([0.0, 0.0], b=[1.0, 2.0]))]


@pytest.mark.parametrize("phi", FUNCS, ids=lambda f: type(f).__name__)
def test_test_function_derivatives_match_finite_differences(phi):
    rng = np.random.default_rng(0)
    d = 3 if isinstance(phi, PolyBump) else 2
    centre = phi.support[0] if hasattr(phi, "support") and len(phi.support[0]) == d else np.zeros(d)
    v = centre + 0.3 * rng.normal(size=(50, d))
    eps = 1e-5
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        fd_g = (phi(v + e) - phi(v - e)) / (2 * eps)
        fd_h = (phi.grad(v + e) - phi.grad(v - e)) / (2 * eps)
        assert np.allclose(phi.grad(v)[:, i], fd_g, atol=1e-4)
        assert np.allclose(phi.hess(v)[:, :, i], fd_h, atol=1e-4)


def test_bump_vanishes_outside_support():
    phi = RadialBump([0.0, -1.0], 0.5)
    v = np.array([[0.6, -1.0], [0.0, -0.4], [0.0, -1.51]])
    assert np.all(phi(v) == 0) and np.all(phi.grad(v) == 0) and np.all(phi.hess(v) == 0)


# ---------------------------------------------------------------- matrix A

def test_A_flat_is_zero():
    assert np.array_equal(compute_A(FlatProfile([1.0])), np.zeros((2, 2)))


@pytest.mark.parametrize("k", [1, 2])
def test_A_tent_equal_masses(k):
    m = 0.1
    A = compute_A(TentProfile(m, np.ones(k)))
    expected = np.zeros((k + 1, k + 1))
    expected[:k, :k] = np.eye(k) * (m / (m + 1)) / k
    assert np.allclose(A, expected, atol=1e-9)


def test_A_moving_wall_matches_monte_carlo_oracle():
    prof = MovingWallProfile(1, 80, 1, ArcProfile(1, 4))
    A = compute_A(prof)
    rng = np.random.default_rng(11)
    N, eps = 2_000_000, 1e-6
    x = rng.random((N, 2)) - 0.5
    x = x[~prof.singular(x, 1e-5)]
    g = np.stack([(prof.height(x + e) - prof.height(x - e)) / (2 * eps)
                  for e in (np.array([eps, 0]), np.array([0, eps]))], axis=1)
    nb = g / np.sqrt(1 + np.sum(g * g, axis=1, keepdims=True))
    outer = nb[:, :, None] * nb[:, None, :]
    mc, se = outer.mean(0), outer.std(0) / math.sqrt(len(x))
    assert np.all(np.abs(A[:2, :2] - mc) <= 5 * se + 1e-9)
    assert abs(A[0, 1]) < 1e-10
    # leading-order diagonal form
    assert A[0, 0] == pytest.approx(1 / 80, rel=0.05)
    f2, _ = integrate.quad(lambda s: s * s / (16 - s * s), -0.5, 0.5)
    assert A[1, 1] == pytest.approx(f2, rel=0.05)


@pytest.mark.parametrize("prof", [ArcProfile(1, 3), TentProfile(0.2, [1.0, 2.0]),
                                  MovingWallProfile(1, 80, 1, ArcProfile(1, 4))], ids=repr)
def test_A_is_symmetric_psd_and_bounded_by_flatness(prof):
    A = compute_A(prof)
    assert np.array_equal(A, A.T)
    assert np.linalg.eigvalsh(A).min() >= -1e-15
    assert np.linalg.norm(A, 2) <= flatness(prof) + 1e-12


def test_trace_CA_equals_sigma2_trace_hidden_block():
    A = compute_A(MovingWallProfile(1, 80, 1, ArcProfile(1, 4)))
    M = ScatterMatrices(A / 0.02, 1, 0.7, A=A)
    C = M.C
    assert np.trace(C @ A) == pytest.approx(0.7 * A[0, 0], rel=1e-12)


def test_A_needs_enough_quadrature_points():
    with pytest.raises(DomainError):
        compute_A(ArcProfile(1, 3), 999)


# ---------------------------------------------------------------- Lambda

def test_lambda_moving_wall_family():
    lam, fit = lambda_from_family(moving_wall_family(1.0), return_fit=True)
    assert np.allclose(lam, np.diag([0.5, 1 / 6, 0.0]))
    assert np.allclose(fit.extrapolated, lam, atol=1e-3)


def test_lambda_tent_family():
    lam, fit = lambda_from_family(tent_family(2), return_fit=True)
    assert np.allclose(lam, np.diag([0.5, 0.5, 0.0]))
    assert np.allclose(fit.extrapolated, lam, atol=1e-3)


def test_lambda_flat_family():
    assert np.array_equal(lambda_from_family(flat_family(1)), np.zeros((2, 2)))


def test_lambda_needs_three_decreasing_values():
    with pytest.raises(DomainError):
        lambda_from_family(arc_family(), [0.01, 0.02, 0.005])
    with pytest.raises(DomainError):
        lambda_from_family(arc_family(), [0.02, 0.01])


def test_matrices_reject_non_adapted_lambda():
    L = np.array([[1.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 0.0]])
    M = ScatterMatrices(L, 1, 1.0)
    with pytest.raises(DomainError):
        mb_laplacian_apply(M, RadialBump([0.0, -1.0], 0.5), [0.0, -1.0])
    with pytest.raises(DomainError):
        ScatterMatrices(np.eye(2), 0)          # nonzero normal row


# ------------------------------------------------------------- generator

def test_generator_constant_is_zero():
    assert mb_laplacian_apply(EX3, Constant(2.0), [0.3, -0.8]) == 0.0


def test_generator_rejects_zero_normal_component():
    with pytest.raises(DomainError):
        mb_laplacian_apply(EX3, RadialBump([0.0, -1.0], 2.0), [0.3, 0.0])


def test_generator_matches_two_dimensional_example_term_by_term():
    rng = np.random.default_rng(3)
    for v in np.column_stack([rng.normal(size=20), -rng.uniform(0.2, 2, size=20)]):
        v1, v2 = v
        a = second_order_coefficients(EX3, v)
        b = first_order_coefficients(EX3, v)
        assert b[0] == pytest.approx(-2 * v1, abs=1e-12)
        assert b[1] == pytest.approx(-4 * v2 + (1 + v1**2) / v2, rel=1e-12)
        assert a[0, 0] == pytest.approx(v2**2, rel=1e-12)
        assert 2 * a[0, 1] == pytest.approx(-2 * v1 * v2, rel=1e-12)
        # the general formula gives (1 + v1^2), not (1 + v1), in front of Phi_22
        assert a[1, 1] == pytest.approx(1 + v1**2, rel=1e-12)


@pytest.mark.parametrize("k,m", [(1, 2), (1, 3), (2, 2), (2, 3)])
def test_three_operator_forms_agree(k, m):
    rng = np.random.default_rng(100 * k + m)
    for _ in range(25):
        M = _random_matrices(rng, k, m)
        phi, v = _random_pair(rng, m)
        general = float(mb_laplacian_apply(M, phi, v))
        coords = float(kbig_apply(M, phi, v))
        dstar = float(mb_dstar_d_apply(M, phi, v))
        assert _rel(general, coords) < 1e-9
        assert _rel(general, dstar) < 1e-9


def test_one_dimensional_reduction_to_laguerre():
    rng = np.random.default_rng(5)
    for _ in range(100):
        lam, s2 = rng.uniform(0.1, 2), rng.uniform(0.2, 3)
        M = ScatterMatrices(np.diag([lam, 0.0]), 1, s2)
        c, r = rng.uniform(0.5, 3), rng.uniform(0.2, 0.5)
        s = c + rng.uniform(-0.9, 0.9) * r
        phi_speed = RadialBump([c], r)          # function of the speed s = -v
        phi_vel = RadialBump([-c], r)
        a = float(mb_laplacian_apply(M, phi_vel, [-s]))
        b = float(laguerre_apply(lam, s2, phi_speed, s))
        assert a == pytest.approx(b, rel=1e-10, abs=1e-12)
        D = mb_gradient_apply(M, phi_vel, np.array([-s]))
        assert D[-1] == pytest.approx(math.sqrt(2 * lam * s2) * phi_vel.grad(np.array([-s]))[0],
                                      rel=1e-12, abs=1e-15)
        assert float(mb_dstar_d_apply(M, phi_vel, np.array([-s]))) == pytest.approx(b, rel=1e-9,
                                                                                     abs=1e-12)


class _OnSphere(TestFunction):
    """``Phi(v) = Psi(vbar / |v|)``: constant along rays, a function on the hemisphere."""

    def __init__(self, psi, n):
        self.psi, self.n = psi, n

    def _jac(self, v):
        r = np.linalg.norm(v)
        m = v.size
        J = np.zeros((self.n, m))
        T = np.zeros((self.n, m, m))
        for i in range(self.n):
            J[i, i] += 1 / r
            J[i] -= v[i] * v / r**3
            for j in range(m):
                for l in range(m):
                    T[i, j, l] = (-((i == j) * v[l] + (i == l) * v[j] + (j == l) * v[i]) / r**3
                                  + 3 * v[i] * v[j] * v[l] / r**5)
        return v[:self.n] / r, J, T

    def value(self, v):
        return self.psi(np.asarray(v)[:self.n] / np.linalg.norm(v))

    def grad(self, v):
        u, J, _ = self._jac(np.asarray(v, dtype=float))
        return self.psi.grad(u) @ J

    def hess(self, v):
        u, J, T = self._jac(np.asarray(v, dtype=float))
        return J.T @ self.psi.hess(u) @ J + np.einsum("i,ijl->jl", self.psi.grad(u), T)


@pytest.mark.parametrize("n", [1, 2])
def test_constant_speed_reduction_to_legendre(n):
    rng = np.random.default_rng(7 + n)
    for _ in range(100):
        lams = rng.uniform(0.1, 3, size=n)
        M = ScatterMatrices(np.diag(np.append(lams, 0.0)), 0)
        u = rng.uniform(-0.6, 0.6, size=n)
        psi = RadialBump(u + rng.uniform(-0.1, 0.1, size=n), 0.35)
        v = np.append(u, -math.sqrt(1 - u @ u))
        a = float(mb_laplacian_apply(M, _OnSphere(psi, n), v))
        b = float(legendre_apply(lams, psi, u))
        assert a == pytest.approx(b, rel=1e-10, abs=1e-10)


# -------------------------------------------------------------- Laguerre

def test_laguerre_sturm_liouville_form():
    rng = np.random.default_rng(8)
    for _ in range(100):
        lam, s2 = rng.uniform(0.1, 2), rng.uniform(0.2, 3)
        c, r = rng.uniform(0.6, 3), rng.uniform(0.2, 0.5)
        phi = RadialBump([c], r)
        v = c + rng.uniform(-0.95, 0.95) * r
        assert float(laguerre_apply(lam, s2, phi, v)) == pytest.approx(
            float(laguerre_sturm_liouville_apply(lam, s2, phi, v)), rel=1e-10, abs=1e-12)


def test_laguerre_locally_constant_gives_zero():
    assert float(laguerre_apply(1.0, 1.0, Constant(), 0.7)) == 0.0
    with pytest.raises(DomainError):
        laguerre_apply(1.0, 1.0, Constant(), -0.5)


@pytest.mark.parametrize("s2", [0.5, 1.0, 2.0])
def test_laguerre_integrates_to_zero_against_stationary_law(s2):
    phi = RadialBump([1.2], 0.6)

    def integrand(v):
        eta = v * math.exp(-v * v / (2 * s2)) / s2
        return float(laguerre_apply(0.7, s2, phi, np.array(v))) * eta

    val, _ = integrate.quad(integrand, 0.6, 1.8, epsabs=1e-13, epsrel=1e-12, limit=200)
    assert abs(val) < 1e-8


# -------------------------------------------------------------- Legendre

def test_legendre_one_dimensional_half_is_standard_operator():
    phi = RadialBump([0.1], 0.6)
    for v in np.linspace(-0.45, 0.65, 12):
        x = np.array([v])
        d1, d2 = phi.grad(x)[0], phi.hess(x)[0, 0]
        assert float(legendre_apply([0.5], phi, x)) == pytest.approx((1 - v * v) * d2 - 2 * v * d1,
                                                                     rel=1e-13, abs=1e-15)


def test_legendre_linear_function():
    lams = [2.5, 1.0]
    v = np.array([0.3, -0.2])
    phi = Quadratic(v, b=[1.0, 0.0], c=0.3)       # equals v_1 near v
    assert float(legendre_apply(lams, phi, v)) == pytest.approx(-4 * 2.5 * 0.3, rel=1e-14)


def test_legendre_rejects_points_outside_ball():
    with pytest.raises(DomainError):
        legendre_apply([1.0, 1.0], Constant(), [0.8, 0.6])


def test_legendre_integrates_to_zero_on_ball():
    phi = RadialBump([0.2, -0.1], 0.6)
    pts, wts = _gauss_grid([-0.4, -0.7], [0.8, 0.5])
    inside = np.sum(pts * pts, axis=1) < 1        # the integrand vanishes off the support
    val = float(legendre_apply([2.5, 1.0], phi, pts[inside]) @ wts[inside])
    assert abs(val) < 1e-8


# ------------------------------------------------- identities and symmetry

@pytest.mark.parametrize("k,m", [(0, 2), (1, 2), (1, 3), (2, 3)])
def test_square_norm_identity(k, m):
    rng = np.random.default_rng(k + 10 * m)
    M = _random_matrices(rng, k, m) if k else ScatterMatrices(
        np.diag(np.append(rng.uniform(0.1, 2, m - 1), 0.0)), 0)
    phi = Quadratic(np.zeros(m), A=2 * np.eye(m))       # |v|^2
    trL = float(np.trace(M.Lambda))
    tr_obs = float(np.trace(M.lambda_obs))
    for _ in range(20):
        v = rng.normal(size=m)
        v[-1] = -abs(v[-1]) - 0.1
        lhs = float(mb_laplacian_apply(M, phi, v)) / 4
        rhs = 2 * M.trace_CLambda + v[-1] ** 2 * (tr_obs - trL)
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)
    if k == 0:
        assert float(mb_laplacian_apply(M, phi, v)) == pytest.approx(0.0, abs=1e-12)


def test_ellipticity_symbol_positive_and_matches_coefficients():
    rng = np.random.default_rng(12)
    M = _random_matrices(rng, 1, 3)
    v = rng.normal(size=(10_000, 3))
    v[:, -1] = -np.abs(v[:, -1]) - 1e-3
    xi = rng.normal(size=(10_000, 3))
    assert np.all(ellipticity_symbol(M, v, xi) > 0)
    assert ellipticity_symbol(M, v[0], np.zeros(3)) == 0.0
    for i in range(50):
        a = second_order_coefficients(M, v[i])
        assert float(ellipticity_symbol(M, v[i], xi[i])) == pytest.approx(xi[i] @ a @ xi[i], rel=1e-9)


def test_generator_is_symmetric_and_equals_minus_dstar_d_weakly():
    rng = np.random.default_rng(13)
    M = EX3
    for _ in range(10):
        c1 = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-1.5, -1.0)])
        c2 = c1 + rng.uniform(-0.3, 0.3, size=2)
        phi = PolyBump(c1, 0.5, b=rng.normal(size=2))
        psi = PolyBump(c2, 0.6, b=rng.normal(size=2))
        dd, lp, pl = adjoint_pairings(M, phi, psi)
        assert _rel(lp, pl) < 1e-5
        assert _rel(-dd, lp) < 1e-5


# ---------------------------------------------------- generator convergence

def test_flat_family_generator_is_zero():
    rows = generator_convergence(flat_family(1), HiddenLaw.none(), RadialBump([0.0, -1.0], 0.5),
                                 [[0.1, -1.0]], [0.04, 0.01], n0=1.0)
    assert all(abs(r["estimate"]) < 1e-12 and r["analytic"] == 0.0 for r in rows)


def test_generator_convergence_budget_cap():
    with pytest.raises(BudgetExceeded):
        generator_convergence(arc_family(), HiddenLaw.none(), RadialBump([0.0, -1.0], 0.5),
                              [[0.1, -0.99]], [0.04, 0.001], n0=16.0, cap=10**6)


def test_generator_convergence_rejects_increasing_h():
    with pytest.raises(DomainError):
        generator_convergence(arc_family(), HiddenLaw.none(), RadialBump([0.0, -1.0], 0.5),
                              [[0.1, -0.99]], [0.01, 0.04])
