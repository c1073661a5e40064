"""Backend dispatch for the hot chunk kernels.

Two interchangeable implementations of the expand-and-contract kernels:

* ``compiled`` -- the Cython extension ``power_attention._core``; expands
  monomials on the fly inside the contraction loop (no [n, c, D]
  intermediate), token-blocked for cache reuse.
* ``python``   -- numpy fallback (``power_attention._reference``) that
  materializes the expanded chunk and uses BLAS.

The backend is picked at import from the POWER_ATTENTION_BACKEND
environment variable (auto | compiled | python, default auto) and can be
overridden per call.
"""

from __future__ import annotations

import os

import numpy as np

from . import _reference
from .errors import InvalidSpec
from .expansions import ExpansionSpec, monomial_table

try:
    from . import _core
except ImportError:
    _core = None

_ENV_BACKEND = os.environ.get("POWER_ATTENTION_BACKEND", "auto")
VALID_BACKENDS = ("auto", "compiled", "python")


def available_backends() -> tuple[str, ...]:
    return ("compiled", "python") if _core is not None else ("python",)


def resolve_backend(backend: str | None = None) -> str:
    """Map an auto/None request to a concrete backend name."""
    name = _ENV_BACKEND if backend is None else backend
    if name not in VALID_BACKENDS:
        raise InvalidSpec(f"backend must be one of {VALID_BACKENDS}, got {name!r}")
    if name == "auto":
        return "compiled" if _core is not None else "python"
    if name == "compiled" and _core is None:
        raise InvalidSpec("compiled backend requested but power_attention._core is not built")
    return name


def _as_streams(arr: np.ndarray, dtype: np.dtype) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=dtype)


def update_state_kernel(
    k_chunk: np.ndarray,
    v_chunk: np.ndarray,
    decay: np.ndarray | None,
    spec: ExpansionSpec,
    backend: str | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(state [n, D, v], key_sum [n, D]) from stacked chunk streams.

    k_chunk [n, c, d], v_chunk [n, c, v], decay [n, c] or None.
    """
    if resolve_backend(backend) == "python":
        return _reference.update_state(k_chunk, v_chunk, decay, spec)
    idx, weights = monomial_table(spec)
    dtype = np.result_type(k_chunk, v_chunk)
    if dtype not in (np.float32, np.float64):
        dtype = np.float64
    k_chunk = _as_streams(k_chunk, dtype)
    v_chunk = _as_streams(v_chunk, dtype)
    if decay is None:
        decay = np.ones(k_chunk.shape[:2], dtype=dtype)
    else:
        decay = _as_streams(decay, dtype)
    n, _, _ = k_chunk.shape
    dim = idx.shape[0]
    state = np.zeros((n, dim, v_chunk.shape[2]), dtype=dtype)
    key_sum = np.zeros((n, dim), dtype=dtype)
    _core.update_state(k_chunk, v_chunk, decay, idx, weights.astype(dtype), state, key_sum)
    return state, key_sum


def query_state_kernel(
    q_chunk: np.ndarray,
    state: np.ndarray,
    key_sum: np.ndarray,
    spec: ExpansionSpec,
    backend: str | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(y [n, c, v], denom [n, c]) from stacked chunk streams.

    q_chunk [n, c, d] (pre-scaled), state [n, D, v], key_sum [n, D].
    """
    if resolve_backend(backend) == "python":
        return _reference.query_state(q_chunk, state, key_sum, spec)
    idx, weights = monomial_table(spec)
    dtype = np.result_type(q_chunk, state)
    if dtype not in (np.float32, np.float64):
        dtype = np.float64
    q_chunk = _as_streams(q_chunk, dtype)
    state = _as_streams(state, dtype)
    key_sum = _as_streams(key_sum, dtype)
    n, c, _ = q_chunk.shape
    y = np.zeros((n, c, state.shape[2]), dtype=dtype)
    denom = np.zeros((n, c), dtype=dtype)
    _core.query_state(q_chunk, state, key_sum, idx, weights.astype(dtype), y, denom)
    return y, denom
