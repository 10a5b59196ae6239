"""Smooth test functions with analytic gradients and Hessians.

All functions act on arrays with a trailing coordinate axis and broadcast
over leading axes.
"""
from __future__ import annotations

import numpy as np


class TestFunction:
    __test__ = False  # keep pytest from collecting this class

    def value(self, v):
        raise NotImplementedError

    def grad(self, v):
        raise NotImplementedError

    def hess(self, v):
        raise NotImplementedError

    def __call__(self, v):
        return self.value(v)


class Constant(TestFunction):
    def __init__(self, c=1.0):
        self.c = float(c)

    def value(self, v):
        v = np.asarray(v, dtype=float)
        return np.full(v.shape[:-1], self.c)

    def grad(self, v):
        return np.zeros_like(np.asarray(v, dtype=float))

    def hess(self, v):
        v = np.asarray(v, dtype=float)
        return np.zeros(v.shape + v.shape[-1:])


class RadialBump(TestFunction):
    """``exp(-1/(1 - |v - c|^2 / r^2))`` inside the ball, zero outside."""

    def __init__(self, center, radius, scale=1.0):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.radius = float(radius)
        self.scale = float(scale)
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def _parts(self, v):
        d = np.asarray(v, dtype=float) - self.center
        q = np.sum(d * d, axis=-1) / self.radius**2
        inside = q < 1
        one_m = np.where(inside, 1 - q, 1.0)
        psi = np.where(inside, np.exp(-1 / one_m), 0.0)
        return d, q, one_m, psi

    def value(self, v):
        return self.scale * self._parts(v)[3]

    def grad(self, v):
        d, q, one_m, psi = self._parts(v)
        dpsi = -psi / one_m**2
        return self.scale * (dpsi * 2 / self.radius**2)[..., None] * d

    def hess(self, v):
        d, q, one_m, psi = self._parts(v)
        r2 = self.radius**2
        dpsi = -psi / one_m**2
        d2psi = psi * (2 * q - 1) / one_m**4
        gq = 2 * d / r2
        eye = np.eye(d.shape[-1])
        return self.scale * (d2psi[..., None, None] * gq[..., :, None] * gq[..., None, :]
                             + (dpsi * 2 / r2)[..., None, None] * eye)

    @property
    def support(self):
        return self.center, self.radius


class Quadratic(TestFunction):
    """``1/2 (u - u0)^T A (u - u0) + b.(u - u0) + c``; used as a coefficient probe."""

    def __init__(self, u0, A=None, b=None, c=0.0):
        self.u0 = np.atleast_1d(np.asarray(u0, dtype=float))
        d = self.u0.size
        A = np.zeros((d, d)) if A is None else np.asarray(A, dtype=float)
        self.A = 0.5 * (A + A.T)
        self.b = np.zeros(d) if b is None else np.asarray(b, dtype=float)
        self.c = float(c)

    def value(self, v):
        d = np.asarray(v, dtype=float) - self.u0
        return 0.5 * np.einsum("...i,ij,...j->...", d, self.A, d) + d @ self.b + self.c

    def grad(self, v):
        d = np.asarray(v, dtype=float) - self.u0
        return d @ self.A + self.b

    def hess(self, v):
        v = np.asarray(v, dtype=float)
        return np.broadcast_to(self.A, v.shape + v.shape[-1:]).copy()


class Projected(TestFunction):
    """``Phi(v) = Psi(v[idx])``: lift a function of some coordinates."""

    def __init__(self, inner: TestFunction, idx):
        self.inner = inner
        self.idx = np.atleast_1d(np.asarray(idx, dtype=int))

    def value(self, v):
        return self.inner.value(np.asarray(v, dtype=float)[..., self.idx])

    def grad(self, v):
        v = np.asarray(v, dtype=float)
        out = np.zeros_like(v)
        out[..., self.idx] = self.inner.grad(v[..., self.idx])
        return out

    def hess(self, v):
        v = np.asarray(v, dtype=float)
        out = np.zeros(v.shape + v.shape[-1:])
        h = self.inner.hess(v[..., self.idx])
        ix = np.ix_(self.idx, self.idx)
        out[(..., *ix)] = h
        return out


class Product(TestFunction):
    def __init__(self, f: TestFunction, g: TestFunction):
        self.f, self.g = f, g

    def value(self, v):
        return self.f.value(v) * self.g.value(v)

    def grad(self, v):
        return self.f.grad(v) * self.g.value(v)[..., None] + self.f.value(v)[..., None] * self.g.grad(v)

    def hess(self, v):
        fv, gv = self.f.value(v)[..., None, None], self.g.value(v)[..., None, None]
        fg, gg = self.f.grad(v), self.g.grad(v)
        return (self.f.hess(v) * gv + fv * self.g.hess(v)
                + fg[..., :, None] * gg[..., None, :] + gg[..., :, None] * fg[..., None, :])


class PolyBump(Product):
    """Quadratic polynomial times a radial bump, for anisotropic test functions."""

    def __init__(self, center, radius, A=None, b=None, c=1.0):
        bump = RadialBump(center, radius)
        super().__init__(Quadratic(bump.center, A, b, c), bump)

    @property
    def support(self):
        return self.g.support
