"""Periodic boundary profiles over a flat torus.

The billiard table is the region above the graph of a periodic function
``F`` on the torus ``R^n / (a_1 Z x ... x a_n Z)``.  Points of the torus are
represented by their canonical coordinates in ``[-a_i/2, a_i/2)``.

Concrete profiles (flat, circular arc, moving wall, tent) carry a compact
numeric encoding consumed by the compiled flight kernels; any other subclass
of :class:`SurfaceProfile` only needs ``height`` and ``gradient`` and is
handled by the pure-Python reference path.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import optimize

from .errors import DomainError, SingularPoint

# kernel encodings
FLAT, ARC, MOVING_WALL, TENT = 0, 1, 2, 3

SINGULAR_TOL = 1e-12


def _wrap(x, a):
    y = x - a * np.floor(x / a + 0.5)
    y = np.where(y >= 0.5 * a, y - a, y)
    return np.where(y < -0.5 * a, y + a, y)


class TorusLattice:
    """Rectangular lattice ``a_1 Z x ... x a_n Z``."""

    def __init__(self, periods):
        periods = np.atleast_1d(np.asarray(periods, dtype=float))
        if periods.ndim != 1 or periods.size == 0:
            raise DomainError("periods must be a non-empty vector")
        if not np.all(np.isfinite(periods)) or np.any(periods <= 0):
            raise DomainError(f"periods must be positive, got {periods}")
        self.periods = periods

    @property
    def dim(self):
        return self.periods.size

    @property
    def volume(self):
        return float(np.prod(self.periods))

    def canonicalize(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DomainError(f"expected trailing dimension {self.dim}, got {x.shape}")
        return _wrap(x, self.periods)

    def distance(self, x, y):
        """Euclidean distance on the torus."""
        d = self.canonicalize(np.asarray(x, float) - np.asarray(y, float))
        return np.linalg.norm(d, axis=-1)

    def __repr__(self):
        return f"TorusLattice({self.periods.tolist()})"


def canonicalize(lattice: TorusLattice, x):
    """Representative of ``x`` modulo the lattice, in ``[-a_i/2, a_i/2)``."""
    return lattice.canonicalize(x)


class SurfaceProfile:
    """A lattice-periodic, piecewise smooth, Lipschitz boundary function.

    Subclasses implement :meth:`height` and :meth:`gradient` for arrays of
    points with trailing dimension ``n``.  ``singular`` should flag points
    within ``tol`` of a kink; the default assumes a smooth profile.
    """

    lattice: TorusLattice
    #: invariant under x -> -x (required by the detailed-balance theory)
    symmetric: bool = False

    @property
    def dim(self):
        return self.lattice.dim

    def height(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def singular(self, x, tol=SINGULAR_TOL):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1], dtype=bool)

    def analytic_flatness(self):
        """Exact ``sup |grad F|^2`` if known in closed form, else None."""
        return None

    def sup_height(self):
        """An upper bound for ``sup F`` (exact for the concrete profiles)."""
        return _grid_extreme(self, lambda x: self.height(x), 256)[0]

    def lipschitz(self):
        """Lipschitz constant of F, used for safe marching steps."""
        return math.sqrt(flatness(self)) * (1 + 1e-9) + 1e-12

    def kernel_spec(self):
        """``(kind, params)`` for the compiled kernels, or None."""
        return None

    def scaled(self, s):
        return ScaledProfile(self, s)


class FlatProfile(SurfaceProfile):
    symmetric = True

    def __init__(self, periods=(1.0,)):
        self.lattice = TorusLattice(periods)

    def height(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1])

    def gradient(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def analytic_flatness(self):
        return 0.0

    def sup_height(self):
        return 0.0

    def lipschitz(self):
        return 0.0

    def kernel_spec(self):
        return FLAT, np.zeros(1)

    def __repr__(self):
        return f"FlatProfile({self.lattice.periods.tolist()})"


class ArcProfile(SurfaceProfile):
    """Periodic row of circular arcs of radius ``R`` over period ``a1``.

    ``F(x) = sqrt(R^2 - x^2) - sqrt(R^2 - a1^2/4)`` on ``[-a1/2, a1/2)``;
    ``kappa = a1/R`` is the scale-free curvature.
    """

    symmetric = True

    def __init__(self, a1=1.0, R=3.0):
        a1, R = float(a1), float(R)
        if not (a1 > 0 and R > 0) or a1 / R >= 1:
            raise DomainError(f"need 0 < a1/R < 1, got a1={a1}, R={R}")
        self.a1, self.R = a1, R
        self.offset = math.sqrt(R * R - 0.25 * a1 * a1)
        self.lattice = TorusLattice([a1])

    @property
    def kappa(self):
        return self.a1 / self.R

    def height(self, x):
        y = self.lattice.canonicalize(x)[..., 0]
        return np.sqrt(self.R**2 - y * y) - self.offset

    def gradient(self, x):
        y = self.lattice.canonicalize(x)
        return -y / np.sqrt(self.R**2 - y * y)

    def singular(self, x, tol=SINGULAR_TOL):
        y = self.lattice.canonicalize(x)[..., 0]
        return 0.5 * self.a1 - np.abs(y) < tol

    def analytic_flatness(self):
        k2 = self.kappa**2
        return k2 / (4 - k2)

    def sup_height(self):
        return self.R - self.offset

    def lipschitz(self):
        return 0.5 * self.a1 / self.offset

    def kernel_spec(self):
        return ARC, np.array([self.a1, self.R, self.offset])

    def __repr__(self):
        return f"ArcProfile(a1={self.a1}, R={self.R})"


class MovingWallProfile(SurfaceProfile):
    """Two-mass system: a moving wall ``m0`` and a ball ``m1`` bouncing on an arc.

    ``F(x0, x1) = s|x0| + a1^{-1} f(a1 x1)`` with ``s = sqrt(m1/m0)``,
    ``f`` the one-dimensional inner profile of period ``a1``; the lattice has
    periods ``(tau, 1)`` with ``tau = (a0/a1) sqrt(m0/m1)``.
    """

    symmetric = True

    def __init__(self, a1=1.0, m0=1.0, m1=1.0, inner=None, a0=None):
        if not (m0 > 0 and m1 > 0 and a1 > 0):
            raise DomainError("masses and a1 must be positive")
        if inner is None:
            inner = ArcProfile(a1, 3.0 * a1)
        if inner.dim != 1 or not np.isclose(inner.lattice.periods[0], a1):
            raise DomainError("inner profile must be one-dimensional with period a1")
        if not isinstance(inner, (ArcProfile, FlatProfile)):
            raise DomainError("inner profile must be an ArcProfile or FlatProfile")
        self.a1, self.m0, self.m1 = float(a1), float(m0), float(m1)
        self.a0 = float(a1 if a0 is None else a0)
        self.inner = inner
        self.slope = math.sqrt(m1 / m0)
        self.tau = self.a0 / self.a1 * math.sqrt(m0 / m1)
        self.lattice = TorusLattice([self.tau, 1.0])

    def height(self, x):
        y = self.lattice.canonicalize(x)
        z = self.a1 * y[..., 1:2]
        return self.slope * np.abs(y[..., 0]) + self.inner.height(z) / self.a1

    def gradient(self, x):
        y = self.lattice.canonicalize(x)
        g = np.empty_like(y)
        g[..., 0] = self.slope * np.sign(y[..., 0])
        g[..., 1] = self.inner.gradient(self.a1 * y[..., 1:2])[..., 0]
        return g

    def singular(self, x, tol=SINGULAR_TOL):
        y = self.lattice.canonicalize(x)
        y0 = np.abs(y[..., 0])
        kink0 = (y0 < tol) | (0.5 * self.tau - y0 < tol)
        return kink0 | self.inner.singular(self.a1 * y[..., 1:2], tol)

    def analytic_flatness(self):
        return self.slope**2 + self.inner.analytic_flatness()

    def sup_height(self):
        return 0.5 * self.slope * self.tau + self.inner.sup_height() / self.a1

    def lipschitz(self):
        return math.hypot(self.slope, self.inner.lipschitz())

    def kernel_spec(self):
        if isinstance(self.inner, ArcProfile):
            R, off = self.inner.R, self.inner.offset
        else:
            R, off = 0.0, 0.0
        return MOVING_WALL, np.array([self.slope, self.tau, self.a1, R, off])

    def __repr__(self):
        return (f"MovingWallProfile(a1={self.a1}, m0={self.m0}, m1={self.m1}, "
                f"inner={self.inner!r}, a0={self.a0})")


class TentProfile(SurfaceProfile):
    """Elastic collision of a free mass ``m`` with ``k`` confined masses.

    ``F(x) = max_i sqrt(m/m_i) |x_i|`` on the torus with periods
    ``a_i = 2 sqrt(m_i/M) l``, ``M = m + sum m_i``.
    """

    symmetric = True

    def __init__(self, m, masses, length=1.0):
        masses = np.atleast_1d(np.asarray(masses, dtype=float))
        if m <= 0 or np.any(masses <= 0) or length <= 0:
            raise DomainError("masses and length must be positive")
        self.m, self.masses, self.length = float(m), masses, float(length)
        total = self.m + masses.sum()
        self.slopes = np.sqrt(self.m / masses)
        self.lattice = TorusLattice(2 * np.sqrt(masses / total) * self.length)

    def _sectors(self, x):
        y = self.lattice.canonicalize(x)
        vals = self.slopes * np.abs(y)
        return y, vals

    def height(self, x):
        return self._sectors(x)[1].max(axis=-1)

    def gradient(self, x):
        y, vals = self._sectors(x)
        j = np.argmax(vals, axis=-1)
        g = np.zeros_like(y)
        yj = np.take_along_axis(y, j[..., None], axis=-1)[..., 0]
        np.put_along_axis(g, j[..., None], (self.slopes[j] * np.sign(yj))[..., None], axis=-1)
        return g

    def singular(self, x, tol=SINGULAR_TOL):
        y, vals = self._sectors(x)
        j = np.argmax(vals, axis=-1)
        top = np.take_along_axis(vals, j[..., None], axis=-1)[..., 0]
        yj = np.abs(np.take_along_axis(y, j[..., None], axis=-1)[..., 0])
        sing = (yj < tol) | (0.5 * self.lattice.periods[j] - yj < tol)
        if self.dim > 1:
            second = np.sort(vals, axis=-1)[..., -2]
            sing |= top - second < tol * self.slopes.max()
        return sing

    def analytic_flatness(self):
        return float(np.max(self.m / self.masses))

    def sup_height(self):
        return float(np.max(self.slopes * self.lattice.periods / 2))

    def lipschitz(self):
        return float(self.slopes.max())

    def kernel_spec(self):
        return TENT, self.slopes.copy()

    def __repr__(self):
        return f"TentProfile(m={self.m}, masses={self.masses.tolist()}, length={self.length})"


class ScaledProfile(SurfaceProfile):
    """``s * F`` for a base profile ``F`` (no compiled kernel)."""

    def __init__(self, base: SurfaceProfile, s: float):
        self.base, self.s = base, float(s)
        self.lattice = base.lattice
        self.symmetric = base.symmetric

    def height(self, x):
        return self.s * self.base.height(x)

    def gradient(self, x):
        return self.s * self.base.gradient(x)

    def singular(self, x, tol=SINGULAR_TOL):
        return self.base.singular(x, tol)

    def sup_height(self):
        b = self.base
        return self.s * b.sup_height() if self.s >= 0 else -self.s * -_grid_extreme(
            b, lambda x: -b.height(x), 256)[0]


def normal_vector(profile: SurfaceProfile, x):
    """Unit upward normal ``(e - grad F)/sqrt(1 + |grad F|^2)`` at ``x``.

    Returns a vector of length ``n+1``; raises :class:`SingularPoint` at kinks.
    """
    x = np.asarray(x, dtype=float)
    if np.any(profile.singular(x)):
        raise SingularPoint(f"normal undefined at {x}")
    g = profile.gradient(x)
    nrm = np.sqrt(1.0 + np.sum(g * g, axis=-1, keepdims=True))
    return np.concatenate([-g, np.ones_like(nrm)], axis=-1) / nrm


def _grid(lattice, per_dim):
    axes = [(np.arange(per_dim) + 0.5) / per_dim * a - a / 2 for a in lattice.periods]
    return axes


def _grid_extreme(profile, fun, per_dim, chunk=1 << 20):
    """Maximize ``fun`` over a midpoint grid; returns (value, argmax, per_dim)."""
    n = profile.dim
    axes = _grid(profile.lattice, per_dim)
    best, arg = -np.inf, None
    if n == 1:
        pts = axes[0][:, None]
        vals = fun(pts)
        i = int(np.argmax(vals))
        return float(vals[i]), pts[i], per_dim
    rest = np.stack(np.meshgrid(*axes[1:], indexing="ij"), axis=-1).reshape(-1, n - 1)
    rows = max(1, chunk // len(rest))
    for start in range(0, per_dim, rows):
        x0 = axes[0][start:start + rows]
        pts = np.concatenate([np.repeat(x0, len(rest))[:, None],
                              np.tile(rest, (len(x0), 1))], axis=1)
        vals = fun(pts)
        i = int(np.argmax(vals))
        if vals[i] > best:
            best, arg = float(vals[i]), pts[i].copy()
    return best, arg, per_dim


def flatness(profile: SurfaceProfile, *, grid=10_000, return_info=False):
    """``h = sup |grad F|^2``.

    Closed form when the profile provides one; otherwise a grid maximum
    refined by bounded scalar searches, which is a lower-bound estimate.
    """
    exact = profile.analytic_flatness()
    if exact is not None:
        return (float(exact), {"method": "analytic"}) if return_info else float(exact)

    n = profile.dim
    per_dim = grid if n <= 2 else max(2, int(round(1e8 ** (1 / n))))

    def sq(x):
        g = profile.gradient(x)
        return np.sum(g * g, axis=-1)

    best, arg, _ = _grid_extreme(profile, sq, per_dim)
    # refine coordinate-wise around the grid argmax
    steps = profile.lattice.periods / per_dim
    x = arg.copy()
    for _ in range(2):
        for i in range(n):
            def neg(t, i=i):
                y = x.copy()
                y[i] = t
                return -float(sq(y[None])[0])
            res = optimize.minimize_scalar(neg, bounds=(x[i] - steps[i], x[i] + steps[i]),
                                           method="bounded", options={"xatol": 1e-12})
            if -res.fun > best:
                best, x[i] = -res.fun, res.x
    info = {"method": "grid", "grid_per_dim": per_dim, "argmax": profile.lattice.canonicalize(x).tolist()}
    return (best, info) if return_info else best


def scale_free_curvature_integral(kappa_or_profile, *, points=200_000):
    """``a = int_0^1 f'(s a1)^2 ds``.

    Given a curvature ``kappa`` in (0, 1) (or an ``ArcProfile``) the closed form
    ``kappa^{-1} ln((1 + kappa/2)/(1 - kappa/2)) - 1`` is returned; any other
    one-dimensional profile is integrated by the midpoint rule.
    """
    if isinstance(kappa_or_profile, SurfaceProfile):
        profile = kappa_or_profile
        if profile.dim != 1:
            raise DomainError("scale-free curvature integral needs a 1-D profile")
        if not isinstance(profile, ArcProfile):
            a1 = profile.lattice.periods[0]
            s = (np.arange(points) + 0.5) / points
            g = profile.gradient(((s - 0.5) * a1)[:, None])[:, 0]
            return float(np.mean(g * g))
        k = profile.kappa
    else:
        k = float(kappa_or_profile)
        if not 0 < k < 1:
            raise DomainError("kappa must lie in (0, 1)")
    if k < 1e-3:
        # series avoids cancellation: k^2/12 + k^4/80 + ...
        return k * k / 12 + k**4 / 80 + k**6 / 448
    return math.log((1 + k / 2) / (1 - k / 2)) / k - 1
