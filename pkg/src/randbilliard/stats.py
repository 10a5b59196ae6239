"""Reference laws and goodness-of-fit checks for chain and diffusion output."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy import stats as sps

from .errors import DomainError

K_CRIT = {0.05: float(sps.kstwobign.isf(0.05)), 0.01: float(sps.kstwobign.isf(0.01))}


# ------------------------------------------------------------ reference laws

class ReferenceLaw:
    def pdf(self, x):
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def sample(self, rng, size):
        raise NotImplementedError

    support = (-np.inf, np.inf)


class CosineAngle(ReferenceLaw):
    """Angle with the normal: density ``cos(theta)/2`` on ``[-pi/2, pi/2]``."""

    support = (-math.pi / 2, math.pi / 2)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(np.abs(x) <= math.pi / 2, 0.5 * np.cos(x), 0.0)

    def cdf(self, x):
        x = np.clip(np.asarray(x, dtype=float), -math.pi / 2, math.pi / 2)
        return 0.5 * (1 + np.sin(x))

    def sample(self, rng, size):
        return np.arcsin(2 * rng.random(size) - 1)


@dataclass
class MBSpeed(ReferenceLaw):
    """Speed of the post-collision MB law in ``m`` dimensions: ``s^m exp(-s^2/2 sigma2)``.

    For ``m = 2`` and ``sigma2 = 1/(beta m1)`` the density is
    ``sqrt(2/pi) (m1 beta)^{3/2} s^2 exp(-beta m1 s^2 / 2)``.
    """

    m: int = 2
    sigma2: float = 1.0
    support = (0.0, np.inf)

    def __post_init__(self):
        self._chi = sps.chi(self.m + 1, scale=math.sqrt(self.sigma2))

    def pdf(self, x):
        return self._chi.pdf(x)

    def cdf(self, x):
        return self._chi.cdf(x)

    def sample(self, rng, size):
        return math.sqrt(self.sigma2) * np.linalg.norm(rng.standard_normal((size, self.m + 1)), axis=1)


@dataclass
class MBFull(ReferenceLaw):
    """Post-collision MB density ``|v_m| exp(-|v|^2/2 sigma2)`` on ``{v_m < 0}``."""

    m: int = 2
    sigma2: float = 1.0

    def pdf(self, v):
        v = np.asarray(v, dtype=float)
        norm = self.sigma2 ** ((self.m + 1) / 2) * (2 * math.pi) ** ((self.m - 1) / 2)
        return np.where(v[..., -1] < 0, np.abs(v[..., -1]) * np.exp(-np.sum(v * v, -1) / (2 * self.sigma2)),
                        0.0) / norm

    def marginal_cdf(self, i):
        """CDF of coordinate ``i`` (Gaussian for tangential, Rayleigh for normal)."""
        s = math.sqrt(self.sigma2)
        if i == self.m - 1 or i == -1:
            return lambda x: np.where(np.asarray(x) < 0, np.exp(-np.asarray(x) ** 2 / (2 * self.sigma2)), 1.0)
        return lambda x: special.ndtr(np.asarray(x) / s)

    def sample(self, rng, size):
        from .scattering import HiddenLaw, sample_stationary
        return sample_stationary(HiddenLaw(1, self.sigma2), self.m, size, rng)


@dataclass
class UniformBall(ReferenceLaw):
    n: int = 2

    def pdf(self, v):
        v = np.asarray(v, dtype=float)
        vol = math.pi ** (self.n / 2) / math.gamma(self.n / 2 + 1)
        return np.where(np.sum(v * v, -1) < 1, 1 / vol, 0.0)

    def radius_cdf(self, r):
        return np.clip(np.asarray(r, dtype=float), 0, 1) ** self.n

    def sample(self, rng, size):
        g = rng.standard_normal((size, self.n))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return g * rng.random((size, 1)) ** (1 / self.n)


# ----------------------------------------------------------- GoF reporting

@dataclass
class GoFReport:
    statistic: float
    n: int
    pass_at: dict
    details: dict = field(default_factory=dict)

    def passed(self, alpha=0.01):
        return self.pass_at[alpha]

    def to_dict(self):
        return {"statistic": self.statistic, "n": self.n,
                "pass_at": {str(k): v for k, v in self.pass_at.items()}, "details": self.details}


def ks_test(samples, cdf, *, n_eff=None):
    """One-sample Kolmogorov-Smirnov test with asymptotic critical values.

    ``n_eff`` (effective sample size, e.g. ``n / tau`` for correlated chain
    output) replaces ``n`` when scaling the statistic.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n < 100:
        raise DomainError("KS test needs at least 100 samples")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    D = float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))
    ne = float(n if n_eff is None else min(n_eff, n))
    scaled = math.sqrt(ne) * D
    p = float(sps.kstwobign.sf(scaled))
    return GoFReport(D, n, {a: scaled <= k for a, k in K_CRIT.items()},
                     {"n_eff": ne, "p_value": p,
                      "critical": {str(a): k / math.sqrt(ne) for a, k in K_CRIT.items()}})


def uniform_ball_chi2(samples, radial_bins=5, angular_bins=8, *, n_eff=None):
    """Chi-square test of uniformity on the unit ball with equal-volume bins.

    Radial edges ``r_j = (j/J)^{1/n}``; the angular partition is by azimuth
    in the first two coordinates (sign for ``n = 1``).  With ``n_eff`` the
    statistic is deflated by ``n_eff / n`` to account for correlation.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[0] == 1 and x.shape[1] > 1 and np.ndim(samples) == 1:
        x = x.T
    N, n = x.shape
    if N < 10_000:
        raise DomainError("chi-square uniformity test needs at least 10^4 samples")
    r = np.linalg.norm(x, axis=1)
    if np.any(r > 1 + 1e-12):
        raise DomainError("samples must lie in the closed unit ball")
    J = int(radial_bins)
    ri = np.minimum((r**n * J).astype(int), J - 1)
    if n == 1:
        A = min(int(angular_bins), 2)
        ai = (x[:, 0] >= 0).astype(int) if A == 2 else np.zeros(N, dtype=int)
    else:
        A = int(angular_bins)
        phi = np.arctan2(x[:, 1], x[:, 0])
        ai = np.minimum(((phi + math.pi) / (2 * math.pi) * A).astype(int), A - 1)
    counts = np.bincount(ri * A + ai, minlength=J * A)
    expected = N / (J * A)
    chi2 = float(np.sum((counts - expected) ** 2) / expected)
    ne = float(N if n_eff is None else min(n_eff, N))
    scaled = chi2 * ne / N
    dof = J * A - 1
    p = float(sps.chi2.sf(scaled, dof)) if dof > 0 else 1.0
    return GoFReport(chi2, N, {a: p >= a for a in (0.05, 0.01)},
                     {"dof": dof, "p_value": p, "n_eff": ne, "scaled_statistic": scaled,
                      "counts": counts.tolist(), "expected": expected})


def autocorrelation_time(series):
    """Integrated autocorrelation time with Geyer's initial positive sequence."""
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if n < 1000:
        raise DomainError("autocorrelation time needs at least 1000 points")
    x = x - x.mean()
    var = float(x @ x) / n
    if var == 0:
        warnings.warn("constant series: autocorrelation time set to its length")
        return float(n)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acf = np.fft.irfft(f * np.conj(f), nfft)[:n] / (n * var)
    tau = -1.0
    for k in range(n // 2):
        gamma = acf[2 * k] + acf[2 * k + 1]
        if gamma <= 0:
            break
        tau += 2 * gamma
    return float(max(tau, 1e-12))


def histogram_rows(samples, pdf_or_cdf, bins, *, cdf=True, range_=None):
    """Rows ``(bin_left, bin_right, count, expected)`` against a reference law."""
    x = np.asarray(samples, dtype=float).ravel()
    counts, edges = np.histogram(x, bins=bins, range=range_)
    if cdf:
        expected = x.size * np.diff(pdf_or_cdf(edges))
    else:
        mid = 0.5 * (edges[1:] + edges[:-1])
        expected = x.size * pdf_or_cdf(mid) * np.diff(edges)
    return np.column_stack([edges[:-1], edges[1:], counts, expected])


def angle_from_normal(v):
    """Signed angle between ``-v`` and the normal, in 2D velocity space."""
    v = np.asarray(v, dtype=float)
    return np.arctan2(v[..., 0], -v[..., -1])
