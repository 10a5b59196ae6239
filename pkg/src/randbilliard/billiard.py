"""Deterministic billiard flights above a periodic graph.

A flight starts on the reference plane ``x_{n+1} = c`` with a downward
velocity ``xi``, follows straight lines between specular collisions with the
graph of ``F``, and ends when it returns to the plane.  The exit velocity is
reported after reflecting it in the plane, so it points down again.

Hits are located by safe marching: with Lipschitz constant ``L`` the gap
``g = z - F(x)`` can shrink at most at rate ``|xi_{n+1}| + L|xi_bar|``, so a
step ``g / rate`` never tunnels through the surface.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import DomainError, SingularHit, StalledMarch, TrappedTrajectory
from .geometry import SurfaceProfile, normal_vector

_STATUS_ERRORS = {
    K.SINGULAR: (SingularHit, "trajectory hit a kink"),
    K.TANGENTIAL: (SingularHit, "tangential collision"),
    K.TRAPPED: (TrappedTrajectory, "collision cap exceeded"),
    K.STALLED: (StalledMarch, "marching step budget exceeded"),
}


def raise_for_status(status):
    if status in _STATUS_ERRORS:
        exc, msg = _STATUS_ERRORS[status]
        raise exc(msg)


@dataclass
class PhaseState:
    position: np.ndarray  # (n+1,) with last coordinate the height
    velocity: np.ndarray  # (n+1,)


@dataclass(frozen=True)
class NoHit:
    """The trajectory reaches the reference plane after ``exit_time``."""
    exit_time: float


@dataclass
class FlightResult:
    exit_velocity: np.ndarray
    exit_position: np.ndarray
    collision_count: int
    flight_time: float
    first_hit: np.ndarray | None = None
    hits: list = field(default_factory=list)


def reference_height(profile: SurfaceProfile):
    """Height ``c = sup F + 1`` of the reference plane."""
    return profile.sup_height() + 1.0


def reflect(normal, velocity):
    """Specular reflection ``xi - 2<n, xi> n`` in the plane orthogonal to ``normal``."""
    normal = np.asarray(normal, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    nn = np.sum(normal * normal, axis=-1, keepdims=True)
    if np.any(np.abs(nn - 1) > 1e-9):
        raise DomainError("normal must be a unit vector")
    return velocity - 2 * np.sum(normal * velocity, axis=-1, keepdims=True) * normal


def _kernel_args(profile):
    spec = profile.kernel_spec()
    if spec is None:
        return None
    kind, params = spec
    return kind, np.asarray(params, float), profile.lattice.periods, float(profile.sup_height()), \
        float(profile.lipschitz())


def _gap(profile, pos, z, xi, t):
    n = pos.size
    return z + xi[n] * t - float(profile.height((pos + xi[:n] * t)[None])[0])


def _advance_py(profile, pos, z, xi, c, sup_f, lip, tol):
    n = pos.size
    vz = xi[n]
    hs = float(np.linalg.norm(xi[:n]))
    if vz > 0 and vz >= lip * hs:
        return K.NOHIT, (c - z) / vz
    t_exit = (c - z) / vz if vz > 0 else math.inf
    rate_max = abs(vz) + lip * hs
    if rate_max == 0:
        return K.NOHIT, math.inf
    t, g = 0.0, _gap(profile, pos, z, xi, 0.0)
    for _ in range(K.MAX_MARCH):
        if g <= tol:
            return K.HIT, t
        zt = z + vz * t
        if vz > 0 and zt >= sup_f:
            return K.NOHIT, t_exit
        if g < K.SWITCH:
            grad = profile.gradient((pos + xi[:n] * t)[None])[0]
            rate = -vz + float(grad @ xi[:n])
            if rate > 0:
                t_hi = t + 2 * g / rate
                if t_hi < t_exit and _gap(profile, pos, z, xi, t_hi) < 0:
                    return K.HIT, _bisect_py(profile, pos, z, xi, t, t_hi, tol)
            elif g < 1e-4 * K.SWITCH:
                return K.SINGULAR, t
        dt = g / rate_max
        if vz < 0 and zt > sup_f:
            dt = max(dt, (zt - sup_f) / -vz)
        t_new = t + dt
        if t_new >= t_exit:
            return K.NOHIT, t_exit
        g_new = _gap(profile, pos, z, xi, t_new)
        if g_new < 0:
            return K.HIT, _bisect_py(profile, pos, z, xi, t, t_new, tol)
        t, g = t_new, g_new
    return K.STALLED, t


def _bisect_py(profile, pos, z, xi, lo, hi, tol):
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        gm = _gap(profile, pos, z, xi, mid)
        if gm < 0:
            hi = mid
        else:
            lo = mid
            if gm <= tol:
                break
    return lo


def advance_to_boundary(profile: SurfaceProfile, state: PhaseState, *, c=None):
    """Next collision of the free flight from ``state`` with the graph of F.

    Returns ``(hit_x, hit_time)`` with ``hit_x`` canonical, or :class:`NoHit`
    if the trajectory reaches the reference plane first.
    """
    pos = np.asarray(state.position, dtype=float)
    xi = np.asarray(state.velocity, dtype=float)
    n = profile.dim
    if pos.size != n + 1 or xi.size != n + 1:
        raise DomainError("state must live in R^{n+1}")
    c = reference_height(profile) if c is None else float(c)
    z = pos[n]
    if z < float(profile.height(pos[:n][None])[0]):
        raise DomainError("start point lies below the boundary")
    tol = 1e-13 * max(1.0, abs(c))
    status, t = _advance_py(profile, pos[:n].copy(), z, xi, c, profile.sup_height(),
                            profile.lipschitz(), tol)
    if status == K.NOHIT:
        return NoHit(t)
    raise_for_status(status)
    return profile.lattice.canonicalize(pos[:n] + xi[:n] * t), t


def _flight_py(profile, x0, xi, c):
    n = profile.dim
    pos, z, xi = np.array(x0, dtype=float), c, np.array(xi, dtype=float)
    sup_f, lip = profile.sup_height(), profile.lipschitz()
    tol = 1e-13 * max(1.0, abs(c))
    hits, ftime = [], 0.0
    while True:
        status, t = _advance_py(profile, pos, z, xi, c, sup_f, lip, tol)
        if status == K.NOHIT:
            pos = pos + xi[:n] * t
            ftime += t
            break
        raise_for_status(status)
        pos = pos + xi[:n] * t
        z += xi[n] * t
        ftime += t
        if profile.singular(pos[None], K.KINK_TOL)[0]:
            raise SingularHit("trajectory hit a kink")
        nv = normal_vector(profile, pos[None])[0]
        dot = float(nv @ xi)
        if dot > -K.KINK_TOL * np.linalg.norm(xi):
            raise SingularHit("tangential collision")
        xi = xi - 2 * dot * nv
        hits.append(profile.lattice.canonicalize(pos))
        if len(hits) > K.MAX_COLLISIONS:
            raise TrappedTrajectory("collision cap exceeded")
        pos = pos + K.NUDGE * xi[:n]
        z += K.NUDGE * xi[n]
        ftime += K.NUDGE
        if z < float(profile.height(pos[None])[0]):
            raise SingularHit("nudge landed below the boundary")
    vel = xi.copy()
    vel[n] = -vel[n]
    return FlightResult(vel, profile.lattice.canonicalize(pos), len(hits), ftime,
                        hits[0] if hits else None, hits)


def return_map(profile: SurfaceProfile, entry_x, xi, *, c=None, engine="auto"):
    """Follow the trajectory entering at ``(entry_x, c)`` with velocity ``xi``.

    ``engine`` is "kernel" (compiled, concrete profiles only), "python"
    (reference implementation, any profile) or "auto".
    """
    n = profile.dim
    entry_x = np.atleast_1d(np.asarray(entry_x, dtype=float))
    xi = np.asarray(xi, dtype=float)
    if entry_x.size != n or xi.size != n + 1:
        raise DomainError("entry point must be in R^n and velocity in R^{n+1}")
    if not xi[n] < 0:
        raise DomainError("entry velocity must point downward")
    c = reference_height(profile) if c is None else float(c)
    args = _kernel_args(profile) if engine != "python" else None
    if args is None:
        if engine == "kernel":
            raise DomainError(f"{profile!r} has no compiled kernel")
        return _flight_py(profile, entry_x, xi, c)
    kind, params, per, sup_f, lip = args
    vel, pos, hit = np.empty(n + 1), np.empty(n), np.empty(n)
    status, coll, ftime = K.flight(kind, params, per, sup_f, lip, c, entry_x.copy(), xi.copy(),
                                   vel, pos, hit)
    raise_for_status(status)
    return FlightResult(vel, pos, int(coll), float(ftime), hit if coll else None)


def jacobian_det_rbar(profile: SurfaceProfile, x, xi):
    """Jacobian determinant of the hit point -> entry point map.

    ``rbar(x) = x + (c - F(x)) xi_bar / xi_{n+1}`` has derivative
    ``I - (xi_bar / xi_{n+1}) grad F^T`` whose determinant is
    ``1 - <grad F(x), xi_bar> / xi_{n+1}``.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if np.any(xi[..., -1] == 0):
        raise DomainError("velocity must have a vertical component")
    g = profile.gradient(x)
    return 1.0 - np.sum(g * xi[..., :-1], axis=-1) / xi[..., -1]


def single_collision_exit(normal, v, w=None):
    """Exit velocity of a single-collision flight, in closed form.

    ``normal`` is the unit normal at the hit point (length ``n+1``), ``v`` the
    observable part of the incoming velocity (length ``m``) and ``w`` the
    hidden part (length ``k = n+1-m``).  Returns ``V = v + 2 zeta_1 - 2 zeta_2``.
    """
    normal = np.asarray(normal, dtype=float)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    w = np.zeros(0) if w is None else np.atleast_1d(np.asarray(w, dtype=float))
    k, m = w.size, v.size
    if k + m != normal.size:
        raise DomainError("dimensions of normal, v and w are inconsistent")
    nbar = normal.copy()
    ne = nbar[-1]
    nbar[-1] = 0.0
    nv = nbar[k:]                     # observable part of the horizontal normal
    ve = v[-1]
    e = np.zeros(m)
    e[-1] = 1.0
    nb_v = float(nbar[k:] @ v)
    nb_w = float(nbar[:k] @ w)
    zeta1 = ne * (nb_v * e + nb_w * e - ve * nv)
    zeta2 = nb_v * nv + nb_w * nv + float(nbar @ nbar) * ve * e
    return v + 2 * zeta1 - 2 * zeta2


def single_collision_radius(v, h):
    """``W(v, h) = -|v| + |v_m| / (4 sqrt(h))``: hidden speeds below this
    guarantee exactly one collision when ``h <= (3/4)^2``."""
    v = np.asarray(v, dtype=float)
    return -np.linalg.norm(v, axis=-1) + np.abs(v[..., -1]) / (4 * math.sqrt(h))
