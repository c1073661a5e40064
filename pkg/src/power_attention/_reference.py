"""Pure-numpy kernels for the chunked pipeline.

These materialize the expanded chunk phi(K)/phi(Q) as an [n, c, D] array
and lean on BLAS for the contraction. The compiled core in ``_core``
computes the same results while expanding tiles on the fly (no [n, c, D]
intermediate); ``power-attention bench --backend ...`` compares the two.
"""

from __future__ import annotations

import numpy as np

from .expansions import ExpansionSpec, expand


def update_state(
    k_chunk: np.ndarray,
    v_chunk: np.ndarray,
    decay: np.ndarray | None,
    spec: ExpansionSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-chunk state contribution over stacked streams.

    k_chunk: [n, c, d]; v_chunk: [n, c, v]; decay: [n, c] weight per token
    (suffix gate products; None means all ones).
    Returns (state [n, D, v], key_sum [n, D]).
    """
    phi = expand(k_chunk, spec)
    if decay is not None:
        phi = phi * decay[..., None]
    state = np.swapaxes(phi, -1, -2) @ v_chunk
    key_sum = phi.sum(axis=-2)
    return state, key_sum


def query_state(
    q_chunk: np.ndarray,
    state: np.ndarray,
    key_sum: np.ndarray,
    spec: ExpansionSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Read the accumulated state with expanded queries.

    q_chunk: [n, c, d] (already scaled); state: [n, D, v]; key_sum: [n, D].
    Returns (y [n, c, v], denom [n, c]) where denom = phi(q) . key_sum.
    """
    phi = expand(q_chunk, spec)
    y = phi @ state
    denom = (phi @ key_sum[..., None])[..., 0]
    return y, denom
