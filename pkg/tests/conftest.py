import numpy as np
import pytest

from power_attention.inputs import generate_batch


def max_rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_batch():
    return generate_batch(b=2, t=9, h=2, d=4, v_dim=3, seed=7, gating=True)
