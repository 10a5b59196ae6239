"""Random scattering: hidden velocities, random entry points, Markov chains.

A scattering event takes an observable velocity ``v`` in the lower
half-space ``H^m``, draws a uniform entry point ``rbar`` on the torus and a
hidden velocity ``w ~ N(0, sigma^2 I_k)``, flies ``xi = (w, v)`` through the
billiard and returns the observable part ``V`` of the exit velocity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
from scipy import special
from scipy.stats import qmc

from . import _kernels as K
from .billiard import _kernel_args, reference_height, return_map
from .errors import (DomainError, ResampleBudgetExceeded, SingularHit, StalledMarch,
                     TrappedTrajectory)
from .geometry import SurfaceProfile
from .rng import as_generator, stream

_STATUS_NAMES = {K.SINGULAR: "singular", K.TANGENTIAL: "tangential",
                 K.TRAPPED: "trapped", K.STALLED: "stalled"}


@dataclass(frozen=True)
class HiddenLaw:
    """Gaussian law of the ``k`` hidden velocity coordinates."""

    k: int = 0
    sigma2: float = 0.0

    def __post_init__(self):
        if self.k < 0:
            raise DomainError("k must be non-negative")
        if self.k > 0 and not self.sigma2 > 0:
            raise DomainError("hidden variance must be positive when k > 0")

    @classmethod
    def none(cls):
        return cls(0, 0.0)

    def sample(self, rng, size):
        return math.sqrt(self.sigma2) * rng.standard_normal((size, self.k))


def _check_profile(profile, hidden, m):
    if hidden.k + m != profile.dim + 1:
        raise DomainError(f"k + m must equal n + 1 = {profile.dim + 1}, got k={hidden.k}, m={m}")


def _uniform_ball(rng, size, d):
    if d == 0:
        return np.zeros((size, 0))
    g = rng.standard_normal((size, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * rng.random((size, 1)) ** (1.0 / d)


def sample_stationary(hidden: HiddenLaw, m, size, rng, *, speed=1.0):
    """Draw from the stationary law on ``H^m``.

    Without hidden coordinates this is the cosine law on the sphere of the
    given speed (projection to the unit ball uniform); with ``k >= 1`` it is
    the Maxwell-Boltzmann law with density ``~ |v_m| exp(-|v|^2 / 2 sigma^2)``.
    """
    rng = as_generator(rng)
    u = _uniform_ball(rng, size, m - 1)
    direction = np.concatenate([u, -np.sqrt(np.clip(1 - np.sum(u * u, axis=1), 0, None))[:, None]],
                               axis=1)
    if hidden.k == 0:
        return speed * direction
    # |v| / sigma is chi-distributed with m + 1 degrees of freedom
    s = math.sqrt(hidden.sigma2) * np.linalg.norm(rng.standard_normal((size, m + 1)), axis=1)
    return s[:, None] * direction


class _Batch:
    """Kernel arguments for one (profile, hidden) pair."""

    def __init__(self, profile, hidden):
        self.profile, self.hidden = profile, hidden
        self.args = _kernel_args(profile)
        self.c = reference_height(profile)
        self.n = profile.dim

    def run(self, V, rbar, w):
        N, m = V.shape
        out_v = np.empty((N, m))
        coll = np.empty(N, dtype=np.int64)
        status = np.empty(N, dtype=np.int64)
        if self.args is not None:
            kind, params, per, sup_f, lip = self.args
            K.scatter_batch(kind, params, per, sup_f, lip, self.c, self.hidden.k,
                            np.ascontiguousarray(V, dtype=float), np.ascontiguousarray(rbar),
                            np.ascontiguousarray(w), out_v, coll, status)
            return out_v, coll, status
        per = self.profile.lattice.periods
        for j in range(N):
            xi = np.concatenate([w[j], V[j]])
            try:
                res = return_map(self.profile, (rbar[j] - 0.5) * per, xi, c=self.c, engine="python")
            except SingularHit:
                status[j], out_v[j], coll[j] = K.SINGULAR, np.nan, 0
            except TrappedTrajectory:
                status[j], out_v[j], coll[j] = K.TRAPPED, np.nan, 0
            except StalledMarch:
                status[j], out_v[j], coll[j] = K.STALLED, np.nan, 0
            else:
                status[j], out_v[j], coll[j] = K.OK, res.exit_velocity[self.hidden.k:], res.collision_count
        return out_v, coll, status


def deterministic_exits(profile: SurfaceProfile, v, rbar, w=None):
    """Exit velocities for given entry points (unit-cube coordinates) and hidden parts.

    ``v`` is one observable velocity or one per entry point.  Returns
    ``(V, collisions, status)``; failed events have non-zero status.
    """
    rbar = np.atleast_2d(np.asarray(rbar, dtype=float))
    N = rbar.shape[0]
    w = np.zeros((N, 0)) if w is None else np.atleast_2d(np.asarray(w, dtype=float))
    v = np.asarray(v, dtype=float)
    V = np.broadcast_to(v, (N, v.shape[-1])).copy()
    hidden = HiddenLaw(w.shape[1], 1.0 if w.shape[1] else 0.0)
    _check_profile(profile, hidden, V.shape[1])
    out, coll, status = _Batch(profile, hidden).run(V, rbar, w)
    return out, coll, status


def scatter_many(profile, hidden, V, rng, *, max_resamples=100, uniforms=None):
    """Scatter each row of ``V`` once.  Degenerate events are redrawn.

    ``uniforms`` optionally supplies the primary draws as an ``(N, n+k)``
    array in the unit cube (hidden coordinates mapped through the normal
    quantile); redraws always come from ``rng``.
    Returns (V1, collisions, resamples).
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    N, m = V.shape
    _check_profile(profile, hidden, m)
    if np.any(V[:, -1] >= 0):
        raise DomainError("velocities must point downward (v_m < 0)")
    rng = as_generator(rng)
    n, k = profile.dim, hidden.k
    batch = _Batch(profile, hidden)
    if uniforms is None:
        rbar = rng.random((N, n))
        w = hidden.sample(rng, N)
    else:
        rbar = uniforms[:, :n]
        u = np.clip(uniforms[:, n:], 1e-300, 1 - 1e-16)
        w = math.sqrt(hidden.sigma2) * special.ndtri(u) if k else np.zeros((N, 0))
    out, coll, status = batch.run(V, rbar, w)
    resamples = np.zeros(N, dtype=np.int64)
    bad = np.flatnonzero(status != K.OK)
    while bad.size:
        resamples[bad] += 1
        if resamples.max() > max_resamples:
            raise ResampleBudgetExceeded(f"more than {max_resamples} degenerate draws in a row")
        o, c, s = batch.run(V[bad], rng.random((bad.size, n)), hidden.sample(rng, bad.size))
        out[bad], coll[bad] = o, c
        bad = bad[s != K.OK]
    return out, coll, resamples


def sample_scatter(profile, hidden: HiddenLaw, v, rng, *, max_resamples=100, return_resamples=False):
    """One scattering event from observable velocity ``v``: returns ``(V, collisions)``."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    out, coll, res = scatter_many(profile, hidden, v[None], rng, max_resamples=max_resamples)
    if return_resamples:
        return out[0], int(coll[0]), int(res[0])
    return out[0], int(coll[0])


@dataclass
class ChainConfig:
    profile: SurfaceProfile
    hidden: HiddenLaw
    initial_v: np.ndarray
    steps: int
    seed: int = 0
    max_resamples: int = 100
    block: int = 1 << 16


class ChainSample(NamedTuple):
    step: int
    v: np.ndarray
    collisions: int
    resamples: int


@dataclass
class ChainRun:
    """Arrays for a whole chain, including the initial state at step 0."""
    v: np.ndarray
    collisions: np.ndarray
    resamples: np.ndarray
    counts: dict = field(default_factory=dict)

    def samples(self) -> Iterator[ChainSample]:
        for j in range(len(self.v)):
            yield ChainSample(j, self.v[j], int(self.collisions[j]), int(self.resamples[j]))


def run_chain_arrays(config: ChainConfig) -> ChainRun:
    """Run a chain; the output depends only on the config, not on ``block``.

    Entry points, hidden velocities and the spare draws used to redraw
    degenerate events come from three separate streams keyed by the seed.
    """
    profile, hidden = config.profile, config.hidden
    v = np.array(config.initial_v, dtype=float).ravel()
    m = v.size
    _check_profile(profile, hidden, m)
    if not v[-1] < 0:
        raise DomainError("initial velocity must point downward")
    if config.steps < 0:
        raise DomainError("steps must be non-negative")
    r_rng, w_rng, s_rng = stream(config.seed, 0, 0), stream(config.seed, 0, 1), stream(config.seed, 0, 2)
    n, k = profile.dim, hidden.k
    V = np.empty((config.steps + 1, m))
    coll = np.zeros(config.steps + 1, dtype=np.int64)
    res = np.zeros(config.steps + 1, dtype=np.int64)
    V[0] = v
    counts = np.zeros(9, dtype=np.int64)
    args = _kernel_args(profile)
    if args is None:
        for j in range(1, config.steps + 1):
            V[j], coll[j], res[j] = sample_scatter(profile, hidden, V[j - 1], r_rng,
                                                   max_resamples=config.max_resamples,
                                                   return_resamples=True)
        return ChainRun(V, coll, res, {"resampled_events": int((res > 0).sum())})
    kind, params, per, sup_f, lip = args
    c = reference_height(profile)
    n_spare = 64

    def spares():
        return s_rng.random((n_spare, n)), hidden.sample(s_rng, n_spare)

    spare_r, spare_w = spares()
    pos = 0
    j = 1
    while j <= config.steps:
        B = min(config.block, config.steps + 1 - j)
        rbar = r_rng.random((B, n))
        w = hidden.sample(w_rng, B)
        done, resume = 0, -1
        while done < B:
            d, pos, st, r = K.chain_block(kind, params, per, sup_f, lip, c, k, v,
                                          rbar[done:], w[done:], spare_r, spare_w, pos,
                                          config.max_resamples, V[j + done:j + B],
                                          coll[j + done:j + B], res[j + done:j + B], counts, resume)
            done += d
            resume = r if st == K.NEED_SPARES else -1
            if st == K.BUDGET:
                raise ResampleBudgetExceeded(
                    f"more than {config.max_resamples} degenerate draws at step {j + done}")
            if st == K.NEED_SPARES:
                (spare_r, spare_w), pos = spares(), 0
        j += B
    names = {name: int(counts[s]) for s, name in _STATUS_NAMES.items()}
    return ChainRun(V, coll, res, names)


def run_chain(config: ChainConfig) -> Iterator[ChainSample]:
    """Yield ``ChainSample`` for steps ``0..steps`` (step 0 is the initial state)."""
    yield from run_chain_arrays(config).samples()


def _as_samples(samples, replicates):
    if samples <= 0:
        raise DomainError("samples must be positive")
    return max(1, samples // replicates)


def estimate_P_phi(profile, hidden, v, phi, samples, seed=0, *, sampler="mc", replicates=16,
                   return_info=False):
    """Monte Carlo estimate of ``(P Phi)(v) = E[Phi(V)]`` with its standard error.

    ``sampler="rqmc"`` uses scrambled Sobol points over (entry point, hidden
    quantiles) with independent replicates; its standard error is the
    spread of the replicate means.
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    _check_profile(profile, hidden, v.size)
    n, k = profile.dim, hidden.k
    if sampler == "mc":
        rng = stream(seed, 0)
        V, _, res = scatter_many(profile, hidden, np.tile(v, (samples, 1)), rng)
        vals = np.asarray(phi(V), dtype=float)
        mean = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(samples)) if samples > 1 else math.inf
        info = {"samples": samples, "resamples": int(res.sum())}
    elif sampler == "rqmc":
        per_rep = _as_samples(samples, replicates)
        m2 = max(0, math.ceil(math.log2(per_rep)))
        means, total_res = [], 0
        for r in range(replicates):
            rng = stream(seed, 1, r)
            pts = qmc.Sobol(d=n + k, scramble=True, seed=rng).random_base2(m2)
            V, _, res = scatter_many(profile, hidden, np.tile(v, (len(pts), 1)), rng, uniforms=pts)
            means.append(float(np.mean(phi(V))))
            total_res += int(res.sum())
        means = np.array(means)
        mean = float(means.mean())
        se = float(means.std(ddof=1) / math.sqrt(replicates)) if replicates > 1 else math.inf
        info = {"samples": replicates * (1 << m2), "replicates": replicates, "resamples": total_res}
    else:
        raise DomainError(f"unknown sampler {sampler!r}")
    return (mean, se, info) if return_info else (mean, se)


class DetailedBalance(NamedTuple):
    statistic: float
    std_error: float


def detailed_balance_statistic(profile, hidden, f, g, samples, seed=0, *, m=None, speed=1.0):
    """``|E f(V0) g(V1) - E g(V0) f(V1)|`` with ``V0`` stationary, ``V1 = scatter(V0)``."""
    if not profile.symmetric:
        raise DomainError("detailed balance requires a profile symmetric under x -> -x")
    m = profile.dim + 1 - hidden.k if m is None else m
    rng = stream(seed, 0)
    V0 = sample_stationary(hidden, m, samples, rng, speed=speed)
    V1, _, _ = scatter_many(profile, hidden, V0, rng)
    d = f(V0) * g(V1) - g(V0) * f(V1)
    return DetailedBalance(float(abs(d.mean())), float(d.std(ddof=1) / math.sqrt(samples)))
