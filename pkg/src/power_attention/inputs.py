"""Deterministic input generation for benchmarks and self-checks.

Uses numpy's Philox generator (counter-based, documented algorithm) so an
identical (shape, seed) pair yields identical arrays on every build.
Queries, keys, and values are uniform in [-1, 1], which keeps powered
scores well conditioned at desk scale; gates are uniform in [0.9, 1.0].
"""

from __future__ import annotations

import numpy as np

from .attention import SequenceBatch


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def generate_batch(
    b: int,
    t: int,
    h: int,
    d: int,
    v_dim: int,
    seed: int = 0,
    dtype=np.float64,
    gating: bool = False,
) -> SequenceBatch:
    rng = generator(seed)
    q = rng.uniform(-1.0, 1.0, (b, t, h, d)).astype(dtype)
    k = rng.uniform(-1.0, 1.0, (b, t, h, d)).astype(dtype)
    v = rng.uniform(-1.0, 1.0, (b, t, h, v_dim)).astype(dtype)
    gates = rng.uniform(0.9, 1.0, (b, t, h)).astype(dtype) if gating else None
    return SequenceBatch(q, k, v, gates)
