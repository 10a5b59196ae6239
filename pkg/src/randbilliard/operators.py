"""Scattering matrices and the limiting generator.

Conventions: velocities live in ``R^{n+1}``; the first ``k`` coordinates are
hidden and the last ``m = n + 1 - k`` observable, the last one being the
normal direction ``e``.  Operators act on functions of the observable part
``v`` in the half-space ``v_m < 0``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetExceeded, DomainError, NoConvergence
from .families import ProfileFamily
from .geometry import SurfaceProfile, flatness
from .scattering import HiddenLaw, estimate_P_phi
from .testfunctions import Quadratic, TestFunction


def _psd_sqrt(M, tol=1e-12):
    w, U = np.linalg.eigh(0.5 * (M + M.T))
    if w.size and w.min() < -tol * max(1.0, abs(w).max()):
        raise DomainError("matrix is not positive semidefinite")
    return (U * np.sqrt(np.clip(w, 0, None))) @ U.T


def _check_sym_psd(M, name):
    if not np.allclose(M, M.T, atol=1e-12, rtol=0):
        raise DomainError(f"{name} is not symmetric")
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    if w.size and w.min() < -1e-12 * max(1.0, abs(w).max()):
        raise DomainError(f"{name} is not positive semidefinite")


@dataclass
class ScatterMatrices:
    """``A = E[nbar (x) nbar]``, hidden covariance ``C`` and ``Lambda = lim A/h``."""

    Lambda: np.ndarray
    k: int
    sigma2: float = 0.0
    A: np.ndarray | None = None
    C: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.Lambda, dtype=float))
        self.Lambda = 0.5 * (L + L.T) if np.allclose(L, L.T, atol=1e-12, rtol=0) else L
        _check_sym_psd(self.Lambda, "Lambda")
        d = self.Lambda.shape[0]
        if not 0 <= self.k < d:
            raise DomainError(f"need 0 <= k < n+1 = {d}")
        if np.any(np.abs(self.Lambda[-1]) > 1e-12):
            raise DomainError("Lambda must vanish in the normal direction")
        if self.C is None:
            self.C = np.zeros((d, d))
            self.C[:self.k, :self.k] = self.sigma2 * np.eye(self.k)
        self.C = np.asarray(self.C, dtype=float)
        _check_sym_psd(self.C, "C")
        if np.any(np.abs(self.C[self.k:]) > 1e-12):
            raise DomainError("C must be supported on the hidden block")
        if self.A is not None:
            self.A = np.asarray(self.A, dtype=float)
            _check_sym_psd(self.A, "A")
        if self.trace_Lambda_wedge > 0:
            self.sigma2 = self.trace_CLambda / self.trace_Lambda_wedge

    @classmethod
    def from_profile(cls, profile: SurfaceProfile, hidden: HiddenLaw, *, h=None,
                     quadrature_points=1000):
        """Finite-h proxy ``Lambda ~ A/h`` from a single profile."""
        A = compute_A(profile, quadrature_points)
        h = flatness(profile) if h is None else h
        return cls(A / h if h > 0 else np.zeros_like(A), hidden.k, hidden.sigma2, A=A,
                   info={"h": h, "lambda_source": "A/h"})

    @classmethod
    def from_family(cls, family: ProfileFamily, hidden: HiddenLaw, h_sequence=None, **kw):
        lam = lambda_from_family(family, h_sequence, **kw)
        return cls(lam, hidden.k, hidden.sigma2, info={"lambda_source": family.name})

    @property
    def n1(self):
        return self.Lambda.shape[0]

    @property
    def m(self):
        return self.n1 - self.k

    @property
    def lambda_obs(self):
        return self.Lambda[self.k:, self.k:]

    @property
    def trace_Lambda_wedge(self):
        return float(np.trace(self.Lambda[:self.k, :self.k]))

    @property
    def trace_CLambda(self):
        return float(np.trace(self.C @ self.Lambda))

    @property
    def adapted(self):
        return bool(np.all(np.abs(self.Lambda[:self.k, self.k:]) <= 1e-10))

    def require_adapted(self):
        if not self.adapted:
            raise DomainError("Lambda is not adapted to the hidden/observable split")

    def to_dict(self):
        return {"A": None if self.A is None else self.A.tolist(), "C": self.C.tolist(),
                "Lambda": self.Lambda.tolist(), "k": self.k, "m": self.m,
                "trace_CLambda": self.trace_CLambda, "trace_Lambda_wedge": self.trace_Lambda_wedge,
                "trace_Lambda": float(np.trace(self.Lambda)), "sigma2": self.sigma2,
                "adapted": self.adapted, **self.info}


# ---------------------------------------------------------------- matrix A

def _A_on_grid(profile, N, chunk=1 << 20):
    n = profile.dim
    axes = [(np.arange(N) + 0.5) / N * a - a / 2 for a in profile.lattice.periods]
    acc = np.zeros((n, n))
    count = 0
    total = N**n
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk))
        pts = np.stack([axes[i][(idx // N**(n - 1 - i)) % N] for i in range(n)], axis=-1)
        ok = ~profile.singular(pts)
        g = profile.gradient(pts[ok])
        nb = g / np.sqrt(1 + np.sum(g * g, axis=1, keepdims=True))
        acc += nb.T @ nb
        count += int(ok.sum())
    return acc / count


def compute_A(profile: SurfaceProfile, quadrature_points=1000, *, tol=1e-9, max_points=1 << 24,
              return_info=False):
    """``A = int nbar (x) nbar`` by tensor midpoint quadrature with refinement.

    The grid is doubled per dimension until successive estimates differ by
    less than ``tol`` or the total point count would exceed ``max_points``.
    """
    if quadrature_points < 1000:
        raise DomainError("need at least 1000 quadrature points per dimension")
    n = profile.dim
    N = int(quadrature_points)
    est = _A_on_grid(profile, N)
    change = math.inf
    while (2 * N) ** n <= max_points:
        new = _A_on_grid(profile, 2 * N)
        change = float(np.abs(new - est).max())
        est, N = new, 2 * N
        if change < tol:
            break
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = 0.5 * (est + est.T)
    info = {"points_per_dim": N, "last_change": change}
    return (A, info) if return_info else A


@dataclass
class LambdaFit:
    extrapolated: np.ndarray
    residual: float
    spread: float
    analytic: np.ndarray | None
    h: np.ndarray
    ratios: np.ndarray

    @property
    def value(self):
        return self.extrapolated if self.analytic is None else self.analytic


DEFAULT_H = (0.04, 0.02, 0.01, 0.005)


def fit_lambda(family: ProfileFamily, h_sequence=None, quadrature_points=1000, max_points=1 << 22):
    hs = np.asarray(DEFAULT_H if h_sequence is None else h_sequence, dtype=float)
    if hs.size < 3 or np.any(np.diff(hs) >= 0) or np.any(hs <= 0):
        raise DomainError("h_sequence must be positive, strictly decreasing, length >= 3")
    ratios = np.array([compute_A(family(h), quadrature_points, max_points=max_points) / h
                       for h in hs])
    flat = ratios.reshape(len(hs), -1)
    coef = np.polyfit(hs, flat, 1)
    resid = flat - (np.outer(hs, coef[0]) + coef[1])
    residual = float(np.abs(resid).max())
    # extrapolations from consecutive pairs
    pairs = np.array([(hs[i] * flat[i + 1] - hs[i + 1] * flat[i]) / (hs[i] - hs[i + 1])
                      for i in range(len(hs) - 1)])
    spread = float(np.abs(np.diff(pairs, axis=0)).max())
    extrap = coef[1].reshape(ratios.shape[1:])
    extrap = 0.5 * (extrap + extrap.T)
    return LambdaFit(extrap, residual, spread, family.analytic_lambda, hs, ratios)


def lambda_from_family(family: ProfileFamily, h_sequence=None, quadrature_points=1000, *,
                       max_points=1 << 22, return_fit=False):
    """``Lambda = lim_{h->0} A(h)/h`` by linear extrapolation in ``h``.

    For families with a closed-form limit that value is returned after a
    cross-check against the extrapolation.
    """
    fit = fit_lambda(family, h_sequence, quadrature_points, max_points)
    if fit.spread > 10 * max(fit.residual, 1e-9):
        raise NoConvergence(f"pairwise extrapolations spread {fit.spread:.3g} "
                            f"exceeds 10x fit residual {fit.residual:.3g}")
    if fit.analytic is not None:
        gap = float(np.abs(fit.analytic - fit.extrapolated).max())
        if gap > 10 * max(fit.residual, fit.spread) + 1e-3:
            warnings.warn(f"analytic Lambda differs from extrapolation by {gap:.3g}")
    return (fit.value, fit) if return_fit else fit.value


# ------------------------------------------------------------- generators

def _prep(matrices: ScatterMatrices):
    matrices.require_adapted()
    Lv = matrices.lambda_obs
    return Lv, float(np.trace(matrices.Lambda)), matrices.trace_CLambda


def _derivs(phi, v):
    v = np.asarray(v, dtype=float)
    return v, phi.grad(v), phi.hess(v)


def _check_half_space(v):
    if np.any(v[..., -1] == 0):
        raise DomainError("v_m must be nonzero")


def mb_laplacian_apply(matrices: ScatterMatrices, phi: TestFunction, v):
    """Limit generator of the scattering chain (general four-term form).

    ``L Phi = -4<Lambda grad, v> + (2/v_m)[<Lambda v, v> + Tr(C Lambda) - Tr(Lambda) v_m^2] Phi_m
    + 2 v_m [v_m Tr(Lambda H) - 2 <Lambda H e, v>] + 2 (<Lambda v, v> + Tr(C Lambda)) Phi_mm``
    """
    Lv, trL, tcl = _prep(matrices)
    v, g, H = _derivs(phi, v)
    if v.shape[-1] != matrices.m:
        raise DomainError(f"v must have {matrices.m} components")
    _check_half_space(v)
    vm = v[..., -1]
    Lvv = v @ Lv.T
    q = np.sum(Lvv * v, axis=-1)
    LH = np.einsum("ij,...jk->...ik", Lv, H)
    out = -4 * np.sum(g * Lvv, axis=-1)
    out += 2 / vm * (q + tcl - trL * vm**2) * g[..., -1]
    out += 2 * vm * (vm * np.trace(LH, axis1=-2, axis2=-1) - 2 * np.sum(LH[..., :, -1] * v, axis=-1))
    out += 2 * (q + tcl) * H[..., -1, -1]
    return out


def kbig_apply(matrices: ScatterMatrices, phi: TestFunction, v):
    """Same operator in eigen-coordinates of ``Lambda^obs`` (requires k >= 1)."""
    Lv, trL, tcl = _prep(matrices)
    if matrices.k < 1 or matrices.trace_Lambda_wedge <= 0 or tcl <= 0:
        raise DomainError("coordinate form needs hidden coordinates with Tr(C Lambda) > 0")
    sigma2 = tcl / matrices.trace_Lambda_wedge
    v, g, H = _derivs(phi, v)
    _check_half_space(v)
    m = v.shape[-1]
    lam, U = np.linalg.eigh(Lv[:m - 1, :m - 1])
    R = np.eye(m)
    R[:m - 1, :m - 1] = U.T          # rotate the tangential coordinates
    x = v @ R.T
    gx = g @ R.T
    Hx = np.einsum("ij,...jk,lk->...il", R, H, R)
    xm = x[..., -1]
    s = np.sum(lam * x[..., :m - 1] ** 2, axis=-1)
    tr_obs = lam.sum()
    half = (s + tcl) * ((1 / xm - xm / sigma2) * gx[..., -1] + Hx[..., -1, -1])
    for i in range(m - 1):
        Li = (-2 * x[..., i] * gx[..., i] + xm**2 * Hx[..., i, i]
              - 2 * x[..., i] * xm * Hx[..., i, -1])
        if tr_obs > 0:
            Li = Li - (1 - s / (sigma2 * tr_obs)) * xm * gx[..., -1]
        half = half + lam[i] * Li
    return 2 * half


def laguerre_apply(lam, sigma2, phi: TestFunction, v):
    """``2 lam sigma2 [(1/v - v/sigma2) Phi' + Phi'']`` for speeds ``v > 0``."""
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0):
        raise DomainError("Laguerre form needs v > 0")
    x = v[..., None]
    d1 = phi.grad(x)[..., 0]
    d2 = phi.hess(x)[..., 0, 0]
    return 2 * lam * sigma2 * ((1 / v - v / sigma2) * d1 + d2)


def laguerre_sturm_liouville_apply(lam, sigma2, phi: TestFunction, v):
    """``2 lam sigma2 (1/rho) (rho Phi')'`` with ``rho = v exp(-v^2/2 sigma2) / sigma2``."""
    v = np.asarray(v, dtype=float)
    x = v[..., None]
    d1 = phi.grad(x)[..., 0]
    d2 = phi.hess(x)[..., 0, 0]
    rho = v * np.exp(-v * v / (2 * sigma2)) / sigma2
    drho = (1 - v * v / sigma2) * np.exp(-v * v / (2 * sigma2)) / sigma2
    return 2 * lam * sigma2 * (drho * d1 + rho * d2) / rho


def legendre_apply(lambdas, phi: TestFunction, v):
    """``2 sum_i lam_i [(1 - |v|^2) Phi_ii - 2 v_i Phi_i]`` on the open unit ball."""
    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
    v = np.asarray(v, dtype=float)
    r2 = np.sum(v * v, axis=-1)
    if np.any(r2 >= 1):
        raise DomainError("Legendre form needs |v| < 1")
    g, H = phi.grad(v), phi.hess(v)
    Hd = np.diagonal(H, axis1=-2, axis2=-1)
    return 2 * np.sum(lambdas * ((1 - r2)[..., None] * Hd - 2 * v * g), axis=-1)


def mb_gradient_apply(matrices: ScatterMatrices, phi: TestFunction, v):
    """``D Phi = sqrt2 [S (v_m grad Phi - Phi_m v) + Tr(C Lambda)^{1/2} Phi_m e]``, ``S = Lambda_obs^{1/2}``."""
    Lv, _, tcl = _prep(matrices)
    S = _psd_sqrt(Lv)
    v = np.asarray(v, dtype=float)
    g = phi.grad(v)
    gm = g[..., -1:]
    out = (v[..., -1:] * g - gm * v) @ S.T
    out[..., -1] += math.sqrt(tcl) * gm[..., 0]
    return math.sqrt(2) * out


def _log_density_grad(v, sigma2):
    out = -v / sigma2
    out[..., -1] += 1 / v[..., -1]
    return out


def mb_divergence_apply(matrices: ScatterMatrices, field, jacobian, v):
    """Formal adjoint ``D* Xi`` with respect to the Maxwell-Boltzmann density.

    ``field`` and ``jacobian`` are the values ``Xi(v)`` and ``dXi/dv(v)``
    (``jacobian[..., a, j] = d Xi_a / d v_j``).  Obtained by integrating by
    parts against ``rho = |v_m| exp(-|v|^2/2 sigma2)``.
    """
    Lv, _, tcl = _prep(matrices)
    if not matrices.sigma2 > 0:
        raise DomainError("adjoint needs a Gaussian hidden law (sigma2 > 0)")
    S = _psd_sqrt(Lv)
    v = np.asarray(v, dtype=float)
    M = jacobian + field[..., :, None] * _log_density_grad(v, matrices.sigma2)[..., None, :]
    SM = np.einsum("ij,...jk->...ik", S, M)
    vm = v[..., -1]
    out = -vm * np.trace(SM, axis1=-2, axis2=-1) + np.sum(v * SM[..., :, -1], axis=-1)
    out -= math.sqrt(tcl) * M[..., -1, -1]
    return math.sqrt(2) * out


def mb_dstar_d_apply(matrices: ScatterMatrices, phi: TestFunction, v):
    """``-D* D Phi`` evaluated pointwise from the analytic Jacobian of ``D Phi``."""
    Lv, _, tcl = _prep(matrices)
    S = _psd_sqrt(Lv)
    v = np.asarray(v, dtype=float)
    g, H = phi.grad(v), phi.hess(v)
    m = v.shape[-1]
    gm, vm = g[..., -1], v[..., -1]
    Hm = H[..., -1, :]
    # inner[a, j] = d/dv_j (v_m g_a - g_m v_a)
    inner = (vm[..., None, None] * H - v[..., :, None] * Hm[..., None, :]
             - gm[..., None, None] * np.eye(m))
    inner[..., :, -1] += g
    J = np.einsum("ij,...jk->...ik", S, inner)
    J[..., -1, :] += math.sqrt(tcl) * Hm
    J *= math.sqrt(2)
    Xi = mb_gradient_apply(matrices, phi, v)
    return -mb_divergence_apply(matrices, Xi, J, v)


def second_order_coefficients(matrices: ScatterMatrices, v):
    """Matrix ``a(v)`` with ``L = sum a_ij d_i d_j + first order``, via quadratic probes."""
    v = np.asarray(v, dtype=float)
    m = v.size
    a = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            E = np.zeros((m, m))
            E[i, j] += 1
            E[j, i] += 1
            # Phi(u) = (u - v)_i (u - v)_j has zero gradient at v
            a[i, j] = 0.5 * float(mb_laplacian_apply(matrices, Quadratic(v, E), v))
    return a


def first_order_coefficients(matrices: ScatterMatrices, v):
    """Drift ``beta(v)`` with ``L (u_i) = beta_i`` for linear probes."""
    v = np.asarray(v, dtype=float)
    m = v.size
    return np.array([float(mb_laplacian_apply(matrices, Quadratic(v, b=np.eye(m)[i]), v))
                     for i in range(m)])


def ellipticity_symbol(matrices: ScatterMatrices, v, xi):
    """``2 sum_i lam_i (v_m xi_i - v_i xi_m)^2 + 2 sigma^2 Tr(Lambda^hid) xi_m^2`` (basis free)."""
    Lv, _, tcl = _prep(matrices)
    v = np.asarray(v, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if np.any(v[..., -1] >= 0):
        raise DomainError("symbol is defined for v_m < 0")
    u = v[..., -1:] * xi - xi[..., -1:] * v
    return 2 * np.einsum("...i,ij,...j->...", u, Lv, u) + 2 * tcl * xi[..., -1] ** 2


def mb_density(v, sigma2):
    """Unnormalized post-collision Maxwell-Boltzmann density ``|v_m| exp(-|v|^2/2 sigma2)``."""
    v = np.asarray(v, dtype=float)
    return np.abs(v[..., -1]) * np.exp(-np.sum(v * v, axis=-1) / (2 * sigma2))


def _gauss_grid(lo, hi, panels=24, order=16):
    x, w = np.polynomial.legendre.leggauss(order)
    axes, weights = [], []
    for a, b in zip(lo, hi):
        edges = np.linspace(a, b, panels + 1)
        mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
        axes.append((mid[:, None] + half[:, None] * x).ravel())
        weights.append((half[:, None] * w).ravel())
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))
    wts = np.prod(np.stack(np.meshgrid(*weights, indexing="ij"), axis=-1).reshape(-1, len(lo)),
                  axis=1)
    return pts, wts


def adjoint_pairings(matrices: ScatterMatrices, phi, psi, *, panels=24, order=16):
    """Quadrature of ``<D Phi, D Psi>``, ``<L Phi, Psi>`` and ``<Phi, L Psi>`` in ``L^2(rho)``.

    Integrates over the intersection of the support boxes, which must lie
    in the open half-space.
    """
    (c1, r1), (c2, r2) = phi.support, psi.support
    lo = np.maximum(c1 - r1, c2 - r2)
    hi = np.minimum(c1 + r1, c2 + r2)
    if np.any(hi <= lo):
        return 0.0, 0.0, 0.0
    if hi[-1] >= 0:
        raise DomainError("supports must lie in the open lower half-space")
    pts, wts = _gauss_grid(lo, hi, panels, order)
    rho = mb_density(pts, matrices.sigma2) * wts
    dd = np.sum(mb_gradient_apply(matrices, phi, pts) * mb_gradient_apply(matrices, psi, pts), axis=1)
    lp = mb_laplacian_apply(matrices, phi, pts) * psi(pts)
    pl = phi(pts) * mb_laplacian_apply(matrices, psi, pts)
    return float(dd @ rho), float(lp @ rho), float(pl @ rho)


# ----------------------------------------------------- generator convergence

def _analytic_value(matrices, phi, v):
    return float(mb_laplacian_apply(matrices, phi, np.asarray(v, dtype=float)))


def generator_convergence(family: ProfileFamily, hidden: HiddenLaw, phi: TestFunction, probes,
                          h_sequence, n0=16.0, *, sampler="rqmc", replicates=16, seed=0,
                          cap=10**9, denominator="h", quadrature_points=1000):
    """Compare ``(P_h Phi - Phi)(v)/h`` with ``L Phi(v)`` along a family.

    Samples per estimate grow as ``N(h) = n0 / h^2``.  With
    ``denominator="trace_A"`` the difference quotient uses ``Tr A(h)`` and
    the limit is ``L Phi / Tr(Lambda)``.  Returns a list of row dicts.
    """
    hs = np.asarray(h_sequence, dtype=float)
    if np.any(np.diff(hs) >= 0):
        raise DomainError("h_sequence must be strictly decreasing")
    if family.k != hidden.k:
        raise DomainError("family and hidden law disagree on k")
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    lam = family.analytic_lambda if family.analytic_lambda is not None else \
        lambda_from_family(family, quadrature_points=quadrature_points)
    matrices = ScatterMatrices(lam, hidden.k, hidden.sigma2)
    for h in hs:
        if n0 / h**2 > cap:
            raise BudgetExceeded(f"N(h={h}) = {n0 / h**2:.3g} exceeds cap {cap:.3g}")
    rows = []
    for p, v in enumerate(probes):
        exact = _analytic_value(matrices, phi, v)
        if denominator == "trace_A":
            exact /= float(np.trace(lam))
        for i, h in enumerate(hs):
            N = int(math.ceil(n0 / h**2))
            prof = family(h)
            mean, se = estimate_P_phi(prof, hidden, v, phi, N, seed=seed + 7919 * p + i,
                                      sampler=sampler, replicates=replicates)
            if denominator == "h":
                den = h
            elif denominator == "trace_A":
                den = float(np.trace(compute_A(prof, quadrature_points)))
            else:
                raise DomainError(f"unknown denominator {denominator!r}")
            est = (mean - float(phi(v))) / den if den > 0 else 0.0
            rows.append({"probe": p, "h": float(h), "estimate": est, "analytic": exact,
                         "abs_error": abs(est - exact), "std_error": se / den if den > 0 else 0.0,
                         "samples": N})
    return rows
