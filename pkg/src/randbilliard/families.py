"""One-parameter families ``h -> profile`` with known limits ``Lambda = lim A/h``."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize

from .errors import DomainError
from .geometry import ArcProfile, FlatProfile, MovingWallProfile, SurfaceProfile, TentProfile


@dataclass(frozen=True)
class ProfileFamily:
    name: str
    build: Callable[[float], SurfaceProfile]
    k: int                                  # number of hidden coordinates
    analytic_lambda: np.ndarray | None = None

    def __call__(self, h) -> SurfaceProfile:
        if not h > 0:
            raise DomainError("flatness h must be positive")
        return self.build(float(h))

    @property
    def dim(self):
        return self(0.01).dim


def flat_family(n=1, k=0):
    return ProfileFamily("flat", lambda h: FlatProfile(np.ones(n)), k, np.zeros((n + 1, n + 1)))


def tent_family(k=1, heat_bath=True, length=1.0):
    """Free mass ``m = h`` against ``k`` unit masses, so that ``h = m/m_i``.

    With ``heat_bath`` the wall velocities are hidden; otherwise every
    velocity is observable (random elastic model).
    """
    lam = np.zeros((k + 1, k + 1))
    lam[:k, :k] = np.eye(k) / k
    return ProfileFamily("tent", lambda h: TentProfile(h, np.ones(k), length),
                         k if heat_bath else 0, lam)


def _arc_kappa(h):
    # h = kappa^2 / (4 - kappa^2)
    return math.sqrt(4 * h / (1 + h))


def arc_family(a1=1.0):
    lam = np.array([[1 / 3, 0.0], [0.0, 0.0]])
    return ProfileFamily("arc", lambda h: ArcProfile(a1, a1 / _arc_kappa(h)), 0, lam)


def _wall_kappa(h, alpha):
    def f(q):
        return alpha * q / 4 + q / (4 - q) - h
    q = optimize.brentq(f, 0.0, 4.0 - 1e-15, xtol=1e-15, rtol=1e-15)
    return math.sqrt(q)


def moving_wall_family(alpha=1.0, a1=1.0):
    """Moving wall over arcs with the coupling ``m1/m0 = alpha kappa^2 / 4``."""
    if alpha <= 0:
        raise DomainError("alpha must be positive")

    def build(h):
        kappa = _wall_kappa(h, alpha)
        return MovingWallProfile(a1, 1.0, alpha * kappa**2 / 4, ArcProfile(a1, a1 / kappa))

    lam = np.diag([alpha / (1 + alpha), 1 / (3 * (1 + alpha)), 0.0])
    return ProfileFamily("moving_wall", build, 1, lam)


FAMILIES = {"flat": flat_family, "tent": tent_family, "arc": arc_family,
            "moving_wall": moving_wall_family}
