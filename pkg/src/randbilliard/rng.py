"""Reproducible random streams.

Every consumer of randomness gets its own counter-based Philox stream keyed
by ``(seed, *key)`` so that parallel workers and independent paths draw from
disjoint, reproducible sequences regardless of scheduling.
"""
import numpy as np

RNG_DESCRIPTION = "numpy Philox4x64 seeded by SeedSequence(seed, spawn_key=key)"


def stream(seed, *key):
    """Return a Generator for the stream identified by ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return np.random.default_rng()
    return stream(rng)
