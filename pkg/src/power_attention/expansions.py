"""Feature maps that turn inner products into integer powers.

Three expansions phi: R^d -> R^D share the identity
``<phi(x), phi(y)> = (x . y)^p``:

* ``tpow``  -- flattened p-fold tensor power. Every ordered index tuple
  appears, so D = d**p and entries are redundant.
* ``spow``  -- symmetric power: one entry per non-decreasing multi-index
  (NDMI), weighted by the square root of its multinomial coefficient;
  D = C(d+p-1, p).
* ``tspow`` -- tiled symmetric power: dense tensor-power blocks within
  fixed-size tiles, symmetric deduplication across tiles. One block per
  NDMI over tiles, each of size d_tile**p, with the tile-level square-root
  multinomial weight applied uniformly across its block so the identity
  holds exactly; D = C(d/d_tile + p - 1, p) * d_tile**p.

Internally every expansion is a *monomial table*: entry r of phi(x) is
``weights[r] * prod_k x[indices[r, k]]``. The vectorized and compiled
kernels both consume this table, so the three kinds share one code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np

from .errors import DimensionMismatch, InvalidSpec

# Refuse to build monomial tables with more rows than this.
ENUMERATION_CAP = 2**31
# expansion_inner switches to the (x.y)**p shortcut above this D.
MATERIALIZE_THRESHOLD = 10**6
# Largest D expansion_dim will report (beyond this even indexing breaks down).
_MAX_DIM = 2**63 - 1
# Factorials are computed over exact integers up to this degree.
_EXACT_FACTORIAL_MAX = 8


class ExpansionKind(str, Enum):
    TPOW = "tpow"
    SPOW = "spow"
    TSPOW = "tspow"


@dataclass(frozen=True)
class ExpansionSpec:
    """Which feature map to use: kind, power degree p, input dimension d.

    ``d_tile`` is the tile edge for ``tspow`` (must divide d); it is not
    accepted for the other kinds.
    """

    kind: ExpansionKind
    p: int
    d: int
    d_tile: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ExpansionKind(self.kind))
        if self.p < 1:
            raise InvalidSpec(f"power degree must be >= 1, got {self.p}")
        if self.d < 1:
            raise InvalidSpec(f"input dimension must be >= 1, got {self.d}")
        if self.kind is ExpansionKind.TSPOW:
            if self.d_tile is None:
                raise InvalidSpec("tspow requires d_tile")
            if not 1 <= self.d_tile <= self.d or self.d % self.d_tile != 0:
                raise InvalidSpec(
                    f"d_tile={self.d_tile} must divide d={self.d} and lie in [1, d]"
                )
        elif self.d_tile is not None:
            raise InvalidSpec(f"{self.kind.value} does not take d_tile")

    @classmethod
    def tpow(cls, p: int, d: int) -> "ExpansionSpec":
        return cls(ExpansionKind.TPOW, p, d)

    @classmethod
    def spow(cls, p: int, d: int) -> "ExpansionSpec":
        return cls(ExpansionKind.SPOW, p, d)

    @classmethod
    def tspow(cls, p: int, d: int, d_tile: int) -> "ExpansionSpec":
        return cls(ExpansionKind.TSPOW, p, d, d_tile)


def expansion_dim(spec: ExpansionSpec) -> int:
    """Expanded dimension D for the given spec, as an exact integer."""
    if spec.kind is ExpansionKind.TPOW:
        dim = spec.d**spec.p
    elif spec.kind is ExpansionKind.SPOW:
        dim = math.comb(spec.d + spec.p - 1, spec.p)
    else:
        n_tiles = spec.d // spec.d_tile
        dim = math.comb(n_tiles + spec.p - 1, spec.p) * spec.d_tile**spec.p
    if dim > _MAX_DIM:
        raise OverflowError(f"expanded dimension {dim} exceeds {_MAX_DIM}")
    return dim


def enumerate_ndmi(d: int, p: int, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """All non-decreasing multi-indices over range(d), lexicographic.

    Returns an int64 array of shape [C(d+p-1, p), p]. Indices are 0-based.
    The row order is the canonical layout of spow/tspow vectors and is
    stable across calls.
    """
    if d < 1 or p < 1:
        raise InvalidSpec(f"need d >= 1 and p >= 1, got d={d}, p={p}")
    count = math.comb(d + p - 1, p)
    if count > cap:
        raise OverflowError(f"{count} multi-indices exceed the cap of {cap}")
    out = np.fromiter(
        combinations_with_replacement(range(d), p),
        dtype=np.dtype((np.int64, p)),
        count=count,
    )
    return out.reshape(count, p)


def multinomial_weight(indices, p: int | None = None) -> float:
    """sqrt(p! / prod_k hist_k!) for one multi-index.

    hist_k counts occurrences of each distinct value. Exact integer
    factorials up to degree 8, log-gamma beyond.
    """
    idx = tuple(indices)
    if p is None:
        p = len(idx)
    elif len(idx) != p:
        raise InvalidSpec(f"multi-index has length {len(idx)}, expected p={p}")
    counts: dict = {}
    for i in idx:
        counts[i] = counts.get(i, 0) + 1
    if p <= _EXACT_FACTORIAL_MAX:
        denom = 1
        for c in counts.values():
            denom *= math.factorial(c)
        return math.sqrt(math.factorial(p) / denom)
    log_w = math.lgamma(p + 1) - sum(math.lgamma(c + 1) for c in counts.values())
    return math.exp(0.5 * log_w)


def _ndmi_weights(ndmi: np.ndarray, p: int) -> np.ndarray:
    """Vectorized sqrt-multinomial weights for an NDMI array [n, p].

    Uses the run-length identity prod_k hist_k! = prod_j r_j where r_j is
    the position of element j within its run of equal values.
    """
    n = ndmi.shape[0]
    runpos = np.ones((n, p), dtype=np.int64)
    for k in range(1, p):
        same = ndmi[:, k] == ndmi[:, k - 1]
        runpos[:, k] = np.where(same, runpos[:, k - 1] + 1, 1)
    if p <= _EXACT_FACTORIAL_MAX:
        return np.sqrt(math.factorial(p) / runpos.prod(axis=1))
    log_denom = np.log(runpos.astype(np.float64)).sum(axis=1)
    return np.exp(0.5 * (math.lgamma(p + 1) - log_denom))


def _cartesian_indices(d: int, p: int) -> np.ndarray:
    """All ordered index tuples over range(d), first index slowest."""
    return np.indices((d,) * p).reshape(p, -1).T


@lru_cache(maxsize=None)
def monomial_table(spec: ExpansionSpec) -> tuple[np.ndarray, np.ndarray]:
    """(indices [D, p] int32, weights [D] float64) describing phi.

    Row r of the expansion is weights[r] * prod_k x[indices[r, k]].
    Raises OverflowError when D exceeds the enumeration cap.
    """
    dim = expansion_dim(spec)
    if dim > ENUMERATION_CAP:
        raise OverflowError(f"D={dim} exceeds the enumeration cap of {ENUMERATION_CAP}")
    p = spec.p
    if spec.kind is ExpansionKind.TPOW:
        idx = _cartesian_indices(spec.d, p)
        weights = np.ones(dim)
    elif spec.kind is ExpansionKind.SPOW:
        idx = enumerate_ndmi(spec.d, p)
        weights = _ndmi_weights(idx, p)
    else:
        d_tile = spec.d_tile
        tiles = enumerate_ndmi(spec.d // d_tile, p)
        tile_weights = _ndmi_weights(tiles, p)
        offsets = _cartesian_indices(d_tile, p)
        idx = (tiles[:, None, :] * d_tile + offsets[None, :, :]).reshape(-1, p)
        weights = np.repeat(tile_weights, d_tile**p)
    idx = np.ascontiguousarray(idx, dtype=np.int32)
    idx.setflags(write=False)
    weights.setflags(write=False)
    return idx, weights


def expand(x: np.ndarray, spec: ExpansionSpec) -> np.ndarray:
    """Apply phi to the last axis of x: [..., d] -> [..., D]."""
    x = np.asarray(x)
    if x.shape[-1] != spec.d:
        raise DimensionMismatch(f"last axis has size {x.shape[-1]}, spec.d={spec.d}")
    idx, weights = monomial_table(spec)
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    out = np.asarray(x[..., idx[:, 0]], dtype=dtype).copy()
    for k in range(1, spec.p):
        out *= x[..., idx[:, k]]
    out *= weights.astype(dtype, copy=False)
    return out


def expansion_inner(
    x: np.ndarray,
    y: np.ndarray,
    spec: ExpansionSpec,
    materialize_threshold: int = MATERIALIZE_THRESHOLD,
) -> float:
    """<phi(x), phi(y)>, equal to (x . y)**p.

    Materializes the expansions only when D is at most
    ``materialize_threshold``; above that the power shortcut is used
    (the two are mathematically identical).
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionMismatch(f"need two length-d vectors, got {x.shape} and {y.shape}")
    if x.shape[0] != spec.d:
        raise DimensionMismatch(f"vectors have length {x.shape[0]}, spec.d={spec.d}")
    if expansion_dim(spec) <= materialize_threshold:
        return float(expand(x, spec) @ expand(y, spec))
    return float(np.dot(x, y) ** spec.p)
