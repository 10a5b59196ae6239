"""Euler-Maruyama simulation of the limiting diffusions.

Three models are provided: the Maxwell-Boltzmann diffusion on the
half-space (hidden coordinates present), the Legendre diffusion on the unit
ball (no hidden coordinates) and the one-dimensional Laguerre diffusion of
speeds.  Every model is built so that its Ito generator is exactly the limit
operator ``L``: the diffusion map satisfies ``b b^T = 2 a`` where ``a`` is
the second-order coefficient matrix of ``L``.

The customary written forms of these SDEs use a different normalisation of
the noise.  They are kept as ``paper_drift``/``paper_diffusion`` and relate
to the simulated model through ``noise_scale``
(``diffusion_map = noise_scale * paper_diffusion``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import _kernels as K
from .errors import DomainError, StuckAtBoundary
from .operators import ScatterMatrices, _psd_sqrt
from .rng import stream

HALF_SPACE, UNIT_BALL, HALF_LINE, WHOLE = "half_space", "unit_ball", "half_line", "whole"
_DOMAIN_CODES = {HALF_SPACE: K.DOM_HALFSPACE, UNIT_BALL: K.DOM_BALL, HALF_LINE: K.DOM_HALFLINE,
                 WHOLE: K.DOM_WHOLE}


@dataclass
class SDEModel:
    tag: str
    dim: int
    domain: str
    code: int
    Lam: np.ndarray
    S: np.ndarray
    scal: np.ndarray      # (noise_scale, ..., ...) model-specific scalars
    params: dict = field(default_factory=dict)

    @property
    def noise_scale(self):
        return float(self.scal[0])

    def _coeffs(self, v):
        v = np.asarray(v, dtype=float).ravel()
        if v.size != self.dim:
            raise DomainError(f"expected a {self.dim}-vector")
        Z, B = np.empty(self.dim), np.empty((self.dim, self.dim))
        K.sde_coeffs(self.code, self.Lam, self.S, self.scal, v, Z, B)
        return Z, B

    def drift(self, v):
        return self._coeffs(v)[0]

    def diffusion_map(self, v):
        return self._coeffs(v)[1]

    def paper_diffusion(self, v):
        s = self.noise_scale
        return self.diffusion_map(v) / s if s else self.diffusion_map(v)

    def paper_drift(self, v):
        """Drift in the customary written form of the SDE."""
        v = np.asarray(v, dtype=float)
        if self.tag != "mb":
            return self.drift(v)
        Lv, tcl, s2 = self.Lam, self.params["trace_CLambda"], self.params["sigma2"]
        Z = -2 * Lv @ v
        Z[-1] += (1 / v[-1] - v[-1] / s2) * (v @ Lv @ v + tcl)
        return Z

    def in_domain(self, v):
        return bool(K.inside(_DOMAIN_CODES[self.domain], np.asarray(v, dtype=float).ravel()))


def mb_model(matrices: ScatterMatrices):
    """MB-diffusion on ``{v_m < 0}`` with generator ``L`` for the given matrices."""
    matrices.require_adapted()
    Lv = matrices.lambda_obs
    tcl = matrices.trace_CLambda
    if not np.any(Lv) and tcl == 0:
        raise DomainError("Lambda = 0 gives a degenerate (zero) diffusion")
    if matrices.k < 1 or tcl <= 0:
        raise DomainError("MB-diffusion needs hidden coordinates with Tr(C Lambda) > 0")
    m = matrices.m
    scal = np.array([2.0, float(np.trace(matrices.Lambda)), tcl])
    return SDEModel("mb", m, HALF_SPACE, K.SDE_MB, np.ascontiguousarray(Lv), _psd_sqrt(Lv), scal,
                    {"trace_CLambda": tcl, "sigma2": matrices.sigma2,
                     "trace_Lambda": float(np.trace(matrices.Lambda))})


def legendre_model(lambdas):
    """Legendre diffusion on the unit ball: drift ``-4 Lambda v``."""
    lam = np.asarray(lambdas, dtype=float)
    Lam = np.diag(lam) if lam.ndim == 1 else lam
    if not np.any(Lam):
        raise DomainError("Lambda = 0 gives a degenerate (zero) diffusion")
    S = _psd_sqrt(Lam)
    return SDEModel("legendre", Lam.shape[0], UNIT_BALL, K.SDE_LEGENDRE, np.ascontiguousarray(Lam),
                    S, np.array([math.sqrt(2.0), 0.0, 0.0]), {"lambdas": Lam.tolist()})


def laguerre_model(lam, sigma2):
    """Speed diffusion with generator ``2 lam sigma2 [(1/v - v/sigma2) d + d^2]`` on ``v > 0``."""
    if not (lam > 0 and sigma2 > 0):
        raise DomainError("Laguerre model needs lam > 0 and sigma2 > 0")
    c = 2 * lam * sigma2
    return SDEModel("laguerre", 1, HALF_LINE, K.SDE_LAGUERRE, np.zeros((1, 1)), np.zeros((1, 1)),
                    np.array([math.sqrt(2.0), c, float(sigma2)]), {"lam": lam, "sigma2": sigma2})


def laguerre1d_model(k, V0, sigma2):
    """Heat-bath speed model with ``k`` wall masses occupying fraction ``V0`` each."""
    return laguerre_model(k * V0, sigma2)


def normalized_laguerre_model():
    """``dV = (1/V - V) dt + noise`` whose stationary law is ``v exp(-v^2/2)``."""
    return laguerre_model(0.5, 1.0)


def constant_model(d):
    """Zero drift, zero diffusion (reference for the flat profile)."""
    return SDEModel("zero", d, WHOLE, K.SDE_ZERO, np.zeros((d, d)), np.zeros((d, d)),
                    np.zeros(3), {})


def em_step(model: SDEModel, v, dt, gaussian_increment):
    """``v + Z(v) dt + b(v) sqrt(dt) g``."""
    v = np.asarray(v, dtype=float).ravel()
    Z, B = model._coeffs(v)
    return v + Z * dt + B @ (math.sqrt(dt) * np.asarray(gaussian_increment, dtype=float))


@dataclass
class EulerConfig:
    dt: float
    steps: int
    initial: np.ndarray
    seed: int = 0
    max_retries: int = 50
    max_halvings: int = 10
    record_every: int = 1
    block: int = 1 << 18


@dataclass
class Path:
    times: np.ndarray
    states: np.ndarray
    retries: np.ndarray
    time_mean: np.ndarray           # average over every step (not just recorded ones)
    time_second_moment: np.ndarray
    total_retries: int


def simulate_path(model: SDEModel, config: EulerConfig, *, rng=None) -> Path:
    v = np.array(config.initial, dtype=float).ravel()
    d = model.dim
    if v.size != d:
        raise DomainError(f"initial state must have {d} components")
    if not model.in_domain(v):
        raise DomainError("initial state must lie strictly inside the domain")
    if not config.dt > 0 or config.steps < 0 or config.record_every < 1:
        raise DomainError("need dt > 0, steps >= 0, record_every >= 1")
    rng = stream(config.seed, 0) if rng is None else rng
    n_rec = config.steps // config.record_every
    states = np.empty((n_rec + 1, d))
    retries = np.zeros(n_rec + 1, dtype=np.int64)
    states[0] = v
    moments = np.zeros(1 + 2 * d)
    dom = _DOMAIN_CODES[model.domain]
    n_spare = 4096
    spare = rng.standard_normal((n_spare, d))
    spare_pos, rec = 0, 1
    done = 0
    while done < config.steps:
        B = min(config.block, config.steps - done)
        gauss = rng.standard_normal((B, d))
        j = 0
        while j < B:
            dj, spare_pos, rec, st = K.em_block(model.code, dom, model.Lam, model.S, model.scal, v,
                                                config.dt, gauss[j:], spare, spare_pos,
                                                config.max_retries, config.max_halvings,
                                                config.record_every, done + j, states, retries, rec,
                                                moments)
            j += dj
            if st == K.NEED_SPARES:
                spare, spare_pos = rng.standard_normal((n_spare, d)), 0
            elif st == K.STUCK:
                raise StuckAtBoundary(f"step {done + j}: redraws and {config.max_halvings} "
                                      f"halvings failed at v={v}")
        done += B
    cnt = max(moments[0], 1.0)
    times = np.arange(n_rec + 1) * config.record_every * config.dt
    return Path(times, states, retries, moments[1:1 + d] / cnt, moments[1 + d:] / cnt,
                int(retries.sum()))


def simulate_ensemble(model: SDEModel, initial, dt, steps, seed=0, **kw):
    """Endpoints of independent paths, one Philox stream per path."""
    initial = np.atleast_2d(np.asarray(initial, dtype=float))
    out = np.empty_like(initial)
    cfg = EulerConfig(dt, steps, initial[0], seed, record_every=max(1, steps), **kw)
    for p, v0 in enumerate(initial):
        cfg.initial = v0
        out[p] = simulate_path(model, cfg, rng=stream(seed, 2, p)).states[-1]
    return out


# ------------------------------------------------------- chain vs diffusion

def _chain_to_model(family_k, model: SDEModel, V):
    """Map chain velocities to model coordinates."""
    if model.tag == "legendre":
        return V[:, :-1] / np.linalg.norm(V, axis=1, keepdims=True)
    if model.tag == "laguerre":
        return -V
    return V


def _model_to_chain(model: SDEModel, X, speed=1.0):
    if model.tag == "legendre":
        last = -np.sqrt(np.clip(1 - np.sum(X * X, axis=1), 0, None))
        return speed * np.concatenate([X, last[:, None]], axis=1)
    if model.tag == "laguerre":
        return -X
    return X


def chain_vs_sde_compare(family, hidden, model: SDEModel, t_end, n_paths, h_sequence, *,
                         initial, seed=0, sde_dt=None, sde_paths=None):
    """Distance between chain and diffusion marginals at ``t_end``.

    The chain for flatness ``h`` runs ``round(t_end / h)`` steps (one step
    per ``h`` units of diffusion time); both processes start at ``initial``
    (model coordinates).  Returns a dict with the SDE summary and one entry
    per ``h`` with per-coordinate two-sample KS statistics and mean and
    covariance differences.
    """
    from .scattering import scatter_many

    initial = np.asarray(initial, dtype=float).ravel()
    sde_paths = n_paths if sde_paths is None else sde_paths
    sde_dt = min(1e-3, t_end / 100) if sde_dt is None else sde_dt
    steps = max(1, int(round(t_end / sde_dt)))
    X_sde = simulate_ensemble(model, np.tile(initial, (sde_paths, 1)), t_end / steps, steps,
                              seed=seed)
    report = {"t_end": t_end, "n_paths": n_paths, "sde_paths": sde_paths, "sde_dt": t_end / steps,
              "sde_mean": X_sde.mean(0).tolist(), "rows": []}
    v0 = _model_to_chain(model, initial[None])[0]
    for i, h in enumerate(h_sequence):
        prof = family(h)
        rng = stream(seed, 3, i)
        V = np.tile(v0, (n_paths, 1))
        n_steps = max(1, int(round(t_end / h)))
        for _ in range(n_steps):
            V, _, _ = scatter_many(prof, hidden, V, rng)
        X = _chain_to_model(hidden.k, model, V)
        ks = [float(sps.ks_2samp(X[:, j], X_sde[:, j]).statistic) for j in range(X.shape[1])]
        cov_c = np.atleast_2d(np.cov(X.T))
        cov_s = np.atleast_2d(np.cov(X_sde.T))
        report["rows"].append({
            "h": float(h), "steps": n_steps, "ks": ks, "ks_max": max(ks),
            "mean_diff": float(np.abs(X.mean(0) - X_sde.mean(0)).max()),
            "cov_diff": float(np.abs(cov_c - cov_s).max()),
        })
    return report
