"""Compiled inner loops: profile evaluation, billiard flights, chains, EM steps.

Profiles are passed as ``(kind, params, periods)`` triples (see
``geometry.SurfaceProfile.kernel_spec``).  All randomness is generated by
the caller and handed in as arrays, so results do not depend on threading.
"""
import math

import numpy as np
from numba import njit, prange

FLAT, ARC, MOVING_WALL, TENT = 0, 1, 2, 3

# flight status codes
OK, NOHIT, HIT, SINGULAR, TANGENTIAL, TRAPPED, STALLED, NEED_SPARES, BUDGET = range(9)

MAX_COLLISIONS = 1_000_000
MAX_MARCH = 10_000_000
KINK_TOL = 1e-12
NUDGE = 1e-10
SWITCH = 1e-9


@njit(cache=True)
def wrap(x, a):
    y = x - a * math.floor(x / a + 0.5)
    if y >= 0.5 * a:
        y -= a
    elif y < -0.5 * a:
        y += a
    return y


@njit(cache=True)
def height(kind, p, per, x):
    if kind == FLAT:
        return 0.0
    if kind == ARC:
        y = wrap(x[0], per[0])
        return math.sqrt(p[1] * p[1] - y * y) - p[2]
    if kind == MOVING_WALL:
        y0 = wrap(x[0], per[0])
        val = p[0] * abs(y0)
        if p[3] > 0.0:
            z = p[2] * wrap(x[1], per[1])
            val += (math.sqrt(p[3] * p[3] - z * z) - p[4]) / p[2]
        return val
    best = 0.0
    for i in range(x.shape[0]):
        v = p[i] * abs(wrap(x[i], per[i]))
        if v > best:
            best = v
    return best


@njit(cache=True)
def gradient(kind, p, per, x, out):
    for i in range(out.shape[0]):
        out[i] = 0.0
    if kind == FLAT:
        return
    if kind == ARC:
        y = wrap(x[0], per[0])
        out[0] = -y / math.sqrt(p[1] * p[1] - y * y)
        return
    if kind == MOVING_WALL:
        y0 = wrap(x[0], per[0])
        out[0] = p[0] * (1.0 if y0 > 0 else (-1.0 if y0 < 0 else 0.0))
        if p[3] > 0.0:
            z = p[2] * wrap(x[1], per[1])
            out[1] = -z / math.sqrt(p[3] * p[3] - z * z)
        return
    best = -1.0
    j = 0
    yj = 0.0
    for i in range(x.shape[0]):
        y = wrap(x[i], per[i])
        v = p[i] * abs(y)
        if v > best:
            best, j, yj = v, i, y
    out[j] = p[j] * (1.0 if yj > 0 else (-1.0 if yj < 0 else 0.0))


@njit(cache=True)
def singular(kind, p, per, x, tol):
    if kind == FLAT:
        return False
    if kind == ARC:
        y = wrap(x[0], per[0])
        return 0.5 * per[0] - abs(y) < tol
    if kind == MOVING_WALL:
        y0 = abs(wrap(x[0], per[0]))
        if y0 < tol or 0.5 * per[0] - y0 < tol:
            return True
        if p[3] > 0.0:
            z = abs(wrap(x[1], per[1]))
            return 0.5 * per[1] - z < tol
        return False
    best = -1.0
    second = -1.0
    j = 0
    for i in range(x.shape[0]):
        v = p[i] * abs(wrap(x[i], per[i]))
        if v > best:
            second = best
            best, j = v, i
        elif v > second:
            second = v
    yj = abs(wrap(x[j], per[j]))
    if yj < tol or 0.5 * per[j] - yj < tol:
        return True
    if x.shape[0] > 1:
        smax = 0.0
        for i in range(x.shape[0]):
            smax = max(smax, p[i])
        if best - second < tol * smax:
            return True
    return False


@njit(cache=True)
def _gap(kind, p, per, pos, z, xi, t, buf):
    n = pos.shape[0]
    for i in range(n):
        buf[i] = pos[i] + xi[i] * t
    return z + xi[n] * t - height(kind, p, per, buf)


@njit(cache=True)
def advance(kind, p, per, sup_f, lip, c, pos, z, xi, buf, grad, tol):
    """First time the straight line (pos, z) + t xi meets the graph.

    Returns (status, t) with status HIT, NOHIT (t = time to reach height c
    while ascending) or STALLED.
    """
    n = pos.shape[0]
    vz = xi[n]
    hs = 0.0
    for i in range(n):
        hs += xi[i] * xi[i]
    hs = math.sqrt(hs)
    if vz > 0.0 and vz >= lip * hs:
        return NOHIT, (c - z) / vz
    t_exit = (c - z) / vz if vz > 0.0 else np.inf
    K = abs(vz) + lip * hs
    if K == 0.0:
        return NOHIT, np.inf
    t = 0.0
    g = _gap(kind, p, per, pos, z, xi, 0.0, buf)
    for _ in range(MAX_MARCH):
        if g <= tol:
            return HIT, t
        zt = z + vz * t
        if vz > 0.0 and zt >= sup_f:
            return NOHIT, t_exit
        if g < SWITCH:
            for i in range(n):
                buf[i] = pos[i] + xi[i] * t
            gradient(kind, p, per, buf, grad)
            rate = -vz
            for i in range(n):
                rate += grad[i] * xi[i]
            if rate > 0.0:
                t_hi = t + 2.0 * g / rate
                if t_hi < t_exit:
                    g_hi = _gap(kind, p, per, pos, z, xi, t_hi, buf)
                    if g_hi < 0.0:
                        return HIT, _bisect(kind, p, per, pos, z, xi, t, t_hi, buf, tol)
            elif g < 1e-4 * SWITCH:
                # hovering over a ridge without approaching: treat as a kink
                return SINGULAR, t
        dt = g / K
        if vz < 0.0 and zt > sup_f:
            dt = max(dt, (zt - sup_f) / (-vz))
        t_new = t + dt
        if t_new >= t_exit:
            return NOHIT, t_exit
        g_new = _gap(kind, p, per, pos, z, xi, t_new, buf)
        if g_new < 0.0:
            return HIT, _bisect(kind, p, per, pos, z, xi, t, t_new, buf, tol)
        t, g = t_new, g_new
    return STALLED, t


@njit(cache=True)
def _bisect(kind, p, per, pos, z, xi, lo, hi, buf, tol):
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        gm = _gap(kind, p, per, pos, z, xi, mid, buf)
        if gm < 0.0:
            hi = mid
        else:
            lo = mid
            if gm <= tol:
                break
    return lo


@njit(cache=True)
def flight(kind, p, per, sup_f, lip, c, x0, xi0, vel_out, pos_out, hit_out):
    """Fly from (x0, c) with downward velocity xi0 until return to height c.

    On success writes the exit velocity (already reflected in the plane, so
    pointing down again), exit position and first hit point.  Returns
    (status, collisions, flight_time).
    """
    n = x0.shape[0]
    pos = x0.copy()
    xi = xi0.copy()
    z = c
    buf = np.empty(n)
    grad = np.empty(n)
    nvec = np.empty(n + 1)
    tol = 1e-13 * max(1.0, abs(c))
    collisions = 0
    ftime = 0.0
    for i in range(n):
        hit_out[i] = np.nan
    while True:
        status, t = advance(kind, p, per, sup_f, lip, c, pos, z, xi, buf, grad, tol)
        if status == NOHIT:
            for i in range(n):
                pos[i] += xi[i] * t
            ftime += t
            break
        if status != HIT:
            return status, collisions, ftime
        for i in range(n):
            pos[i] += xi[i] * t
        z += xi[n] * t
        ftime += t
        if singular(kind, p, per, pos, KINK_TOL):
            return SINGULAR, collisions, ftime
        gradient(kind, p, per, pos, grad)
        s = 1.0
        for i in range(n):
            s += grad[i] * grad[i]
        s = 1.0 / math.sqrt(s)
        dot = 0.0
        speed = 0.0
        for i in range(n):
            nvec[i] = -grad[i] * s
            dot += nvec[i] * xi[i]
            speed += xi[i] * xi[i]
        nvec[n] = s
        dot += s * xi[n]
        speed = math.sqrt(speed + xi[n] * xi[n])
        if dot > -KINK_TOL * speed:
            return TANGENTIAL, collisions, ftime
        for i in range(n + 1):
            xi[i] -= 2.0 * dot * nvec[i]
        collisions += 1
        if collisions == 1:
            for i in range(n):
                hit_out[i] = wrap(pos[i], per[i])
        if collisions > MAX_COLLISIONS:
            return TRAPPED, collisions, ftime
        for i in range(n):
            pos[i] += NUDGE * xi[i]
        z += NUDGE * xi[n]
        ftime += NUDGE
        if z - height(kind, p, per, pos) < 0.0:
            return SINGULAR, collisions, ftime
    for i in range(n):
        vel_out[i] = xi[i]
        pos_out[i] = wrap(pos[i], per[i])
    vel_out[n] = -xi[n]
    return OK, collisions, ftime


@njit(cache=True)
def chain_block(kind, p, per, sup_f, lip, c, k, v, rbar, w, spare_r, spare_w, spare_pos,
                max_resamples, out_v, out_coll, out_res, counts, resume):
    """Advance a chain through ``len(rbar)`` scattering events.

    ``v`` (the current observable velocity) is updated in place.  ``rbar``
    holds entry points in unit-cube coordinates.  Degenerate events are
    redrawn from the spare arrays.  Returns (steps_done, spare_pos, status,
    resamples) where status is OK, NEED_SPARES or BUDGET; after NEED_SPARES
    call again with ``resume`` set to the returned resample count to
    continue the interrupted event (``resume = -1`` otherwise).
    """
    n = per.shape[0]
    m = v.shape[0]
    x0 = np.empty(n)
    xi = np.empty(n + 1)
    vel = np.empty(n + 1)
    pos = np.empty(n)
    hit = np.empty(n)
    for j in range(rbar.shape[0]):
        res = 0
        use_spare = False
        if j == 0 and resume >= 0:
            res = resume
            use_spare = True
        while True:
            if use_spare:
                if spare_pos >= spare_r.shape[0]:
                    return j, spare_pos, NEED_SPARES, res
                rr = spare_r[spare_pos]
                ww = spare_w[spare_pos]
                spare_pos += 1
            else:
                rr = rbar[j]
                ww = w[j]
            for i in range(n):
                x0[i] = (rr[i] - 0.5) * per[i]
            for i in range(k):
                xi[i] = ww[i]
            for i in range(m):
                xi[k + i] = v[i]
            st, coll, _ = flight(kind, p, per, sup_f, lip, c, x0, xi, vel, pos, hit)
            if st == OK:
                break
            counts[st] += 1
            res += 1
            if res > max_resamples:
                return j, spare_pos, BUDGET, res
            use_spare = True
        for i in range(m):
            v[i] = vel[k + i]
            out_v[j, i] = v[i]
        out_coll[j] = coll
        out_res[j] = res
    return rbar.shape[0], spare_pos, OK, 0


@njit(cache=True, parallel=True)
def scatter_batch(kind, p, per, sup_f, lip, c, k, v, rbar, w, out_v, out_coll, out_status):
    """Independent scattering events; ``v`` has one row per event."""
    N = rbar.shape[0]
    n = per.shape[0]
    m = v.shape[1]
    for j in prange(N):
        x0 = np.empty(n)
        xi = np.empty(n + 1)
        vel = np.empty(n + 1)
        pos = np.empty(n)
        hit = np.empty(n)
        for i in range(n):
            x0[i] = (rbar[j, i] - 0.5) * per[i]
        for i in range(k):
            xi[i] = w[j, i]
        for i in range(m):
            xi[k + i] = v[j, i]
        st, coll, _ = flight(kind, p, per, sup_f, lip, c, x0, xi, vel, pos, hit)
        out_status[j] = st
        out_coll[j] = coll
        for i in range(m):
            out_v[j, i] = vel[k + i] if st == OK else np.nan


# ------------------------------------------------------------------ SDEs

SDE_LEGENDRE, SDE_LAGUERRE, SDE_MB, SDE_ZERO = 0, 1, 2, 3
DOM_HALFSPACE, DOM_BALL, DOM_HALFLINE, DOM_WHOLE = 0, 1, 2, 3
STUCK = 9


@njit(cache=True)
def sde_coeffs(code, Lam, S, scal, v, Z, B):
    """Drift ``Z`` and diffusion matrix ``B`` at ``v`` (``scal[0]`` is the noise scale)."""
    d = v.shape[0]
    for i in range(d):
        Z[i] = 0.0
        for j in range(d):
            B[i, j] = 0.0
    if code == SDE_ZERO:
        return
    if code == SDE_LAGUERRE:
        c = scal[1]
        Z[0] = c * (1.0 / v[0] - v[0] / scal[2])
        B[0, 0] = scal[0] * math.sqrt(c)
        return
    if code == SDE_LEGENDRE:
        r2 = 0.0
        for i in range(d):
            r2 += v[i] * v[i]
            acc = 0.0
            for j in range(d):
                acc += Lam[i, j] * v[j]
            Z[i] = -4.0 * acc
        f = scal[0] * math.sqrt(max(0.0, 2.0 * (1.0 - r2)))
        for i in range(d):
            for j in range(d):
                B[i, j] = f * S[i, j]
        return
    # Maxwell-Boltzmann diffusion on the half-space
    m = d - 1
    vm = v[m]
    q = 0.0
    for i in range(d):
        acc = 0.0
        sv = 0.0
        for j in range(d):
            acc += Lam[i, j] * v[j]
            sv += S[i, j] * v[j]
        Z[i] = -4.0 * acc
        q += acc * v[i]
        # row m of B gets -(S v)^T; the other rows v_m S
        B[m, i] -= scal[0] * sv
    Z[m] += 2.0 / vm * (q + scal[2] - scal[1] * vm * vm)
    for i in range(d):
        for j in range(d):
            B[i, j] += scal[0] * vm * S[i, j]
    B[m, m] += scal[0] * math.sqrt(scal[2])


@njit(cache=True)
def inside(dom, v):
    d = v.shape[0]
    if dom == DOM_HALFSPACE:
        return v[d - 1] < 0.0
    if dom == DOM_HALFLINE:
        return v[0] > 0.0
    if dom == DOM_BALL:
        r2 = 0.0
        for i in range(d):
            r2 += v[i] * v[i]
        return r2 < 1.0
    return True


@njit(cache=True)
def boundary_distance(dom, v):
    d = v.shape[0]
    if dom == DOM_HALFSPACE:
        return -v[d - 1]
    if dom == DOM_HALFLINE:
        return v[0]
    if dom == DOM_BALL:
        r2 = 0.0
        for i in range(d):
            r2 += v[i] * v[i]
        return 1.0 - math.sqrt(r2)
    return np.inf


@njit(cache=True)
def _norm(Z):
    acc = 0.0
    for i in range(Z.shape[0]):
        acc += Z[i] * Z[i]
    return math.sqrt(acc)


@njit(cache=True)
def admissible(code, dom, Lam, S, scal, v, h_min, Z, B):
    """Inside the domain, and an Euler step of size ``h_min`` is non-stiff there."""
    if not inside(dom, v):
        return False
    if dom == DOM_WHOLE:
        return True
    sde_coeffs(code, Lam, S, scal, v, Z, B)
    return _norm(Z) * h_min <= boundary_distance(dom, v)


@njit(cache=True)
def _em(code, Lam, S, scal, v, dt, g, Z, B, out):
    d = v.shape[0]
    sc = math.sqrt(dt)
    sde_coeffs(code, Lam, S, scal, v, Z, B)
    for i in range(d):
        acc = 0.0
        for j in range(d):
            acc += B[i, j] * g[j]
        out[i] = v[i] + Z[i] * dt + acc * sc


@njit(cache=True)
def _guard_level(code, dom, Lam, S, scal, v, dt, Z, B, max_halvings):
    """Smallest halving level L with |Z(v)| dt / 2^L <= dist(v, boundary)."""
    if dom == DOM_WHOLE:
        return 0
    sde_coeffs(code, Lam, S, scal, v, Z, B)
    zn = _norm(Z)
    dist = boundary_distance(dom, v)
    L = 0
    while zn * dt / (1 << L) > dist and L <= max_halvings:
        L += 1
    return L


@njit(cache=True)
def em_block(code, dom, Lam, S, scal, v, dt, gauss, spare, spare_pos, max_retries, max_halvings,
             record_every, step0, out_states, out_retries, rec_pos, moments):
    """Euler-Maruyama over ``len(gauss)`` steps with redraw-then-halve at the boundary.

    A step of size h from v is only attempted when the drift displacement
    ``|Z(v)| h`` does not exceed the distance to the boundary; candidates
    must be admissible (see :func:`admissible`).  Rejected candidates are
    redrawn up to ``max_retries`` times, after which the step is split into
    2, 4, ... substeps (at most ``max_halvings`` levels).  ``v`` is updated
    in place; states are recorded whenever the global step index is a
    multiple of ``record_every``; ``moments`` accumulates (count, sum v,
    sum v^2) over every step.  Returns (steps_done, spare_pos, rec_pos, status).
    """
    d = v.shape[0]
    Z = np.empty(d)
    B = np.empty((d, d))
    Z2 = np.empty(d)
    B2 = np.empty((d, d))
    cand = np.empty(d)
    cur = np.empty(d)
    h_min = dt / (1 << max_halvings)
    pending = 0
    for j in range(gauss.shape[0]):
        retries = 0
        ok = False
        level0 = _guard_level(code, dom, Lam, S, scal, v, dt, Z, B, max_halvings)
        if level0 == 0:
            _em(code, Lam, S, scal, v, dt, gauss[j], Z, B, cand)
            ok = admissible(code, dom, Lam, S, scal, cand, h_min, Z2, B2)
            while not ok and retries < max_retries:
                if spare_pos >= spare.shape[0]:
                    return j, spare_pos, rec_pos, NEED_SPARES
                _em(code, Lam, S, scal, v, dt, spare[spare_pos], Z, B, cand)
                spare_pos += 1
                retries += 1
                ok = admissible(code, dom, Lam, S, scal, cand, h_min, Z2, B2)
        level = max(level0, 1) - 1
        while not ok and level < max_halvings:
            level += 1
            nsub = 1 << level
            h = dt / nsub
            for i in range(d):
                cur[i] = v[i]
            good = True
            for _ in range(nsub):
                if _guard_level(code, dom, Lam, S, scal, cur, h, Z, B, max_halvings) > 0:
                    good = False
                    break
                sub_ok = False
                for _r in range(max_retries + 1):
                    if spare_pos >= spare.shape[0]:
                        return j, spare_pos, rec_pos, NEED_SPARES
                    _em(code, Lam, S, scal, cur, h, spare[spare_pos], Z, B, cand)
                    spare_pos += 1
                    retries += 1
                    if admissible(code, dom, Lam, S, scal, cand, h_min, Z2, B2):
                        sub_ok = True
                        break
                if not sub_ok:
                    good = False
                    break
                for i in range(d):
                    cur[i] = cand[i]
            if good:
                ok = True
                for i in range(d):
                    cand[i] = cur[i]
        if not ok:
            return j, spare_pos, rec_pos, STUCK
        for i in range(d):
            v[i] = cand[i]
            moments[1 + i] += v[i]
            moments[1 + d + i] += v[i] * v[i]
        moments[0] += 1.0
        pending += retries
        if (step0 + j + 1) % record_every == 0:
            for i in range(d):
                out_states[rec_pos, i] = v[i]
            out_retries[rec_pos] = pending
            pending = 0
            rec_pos += 1
    if pending > 0 and rec_pos < out_retries.shape[0]:
        out_retries[rec_pos] += pending
    return gauss.shape[0], spare_pos, rec_pos, OK
