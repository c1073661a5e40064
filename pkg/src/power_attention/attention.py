"""Quadratic-time reference attention mechanisms.

All operators act on [batch, time, head, feature] arrays and support causal
masking, per-timestep multiplicative gating, optional score-sum
normalization, and (for the power mechanism) a log-space stabilized scoring
path. These are the ground-truth implementations the linear-cost pipeline
is checked against.

Conventions:
  * scale (default 1/sqrt(d)) multiplies Q before powering/exponentiation
    and before any feature expansion, so power scores are
    ``(scale * q . k)**p``.
  * the gate decay between key j and query i is ``prod(g[j+1..i])``; a
    token's own gate does not discount its own contribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    InvalidSpec,
    NonFiniteInput,
    OddPowerWithNormalize,
    ShapeMismatch,
    ZeroDenominator,
)
from .expansions import ExpansionSpec, expand


class Mechanism(str, Enum):
    EXP = "exp"
    WINDOW = "window"
    LINEAR = "linear"
    POWER = "power"


DEFAULT_EPSILON = {np.dtype(np.float64): 1e-12, np.dtype(np.float32): 1e-7}


@dataclass
class SequenceBatch:
    """Query/key/value arrays plus optional per-timestep gates.

    Shapes: q, k are [b, t, h, d]; v is [b, t, h, v]; gates is [b, t, h]
    with entries in [0, 1] (gate 0 is the full-forgetting limit; gradients
    w.r.t. gates require strictly positive entries).
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    gates: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q)
        self.k = np.asarray(self.k)
        self.v = np.asarray(self.v)
        for name, arr in (("q", self.q), ("k", self.k), ("v", self.v)):
            if arr.ndim != 4:
                raise ShapeMismatch(f"{name} must be [b, t, h, feature], got {arr.shape}")
            if not np.isfinite(arr).all():
                raise NonFiniteInput(f"{name} contains non-finite values")
        if self.k.shape != self.q.shape:
            raise ShapeMismatch(f"k shape {self.k.shape} != q shape {self.q.shape}")
        if self.v.shape[:3] != self.q.shape[:3]:
            raise ShapeMismatch(
                f"v shape {self.v.shape} disagrees with q on [b, t, h] {self.q.shape[:3]}"
            )
        if self.gates is not None:
            self.gates = np.asarray(self.gates)
            if self.gates.shape != self.q.shape[:3]:
                raise ShapeMismatch(
                    f"gates shape {self.gates.shape} != [b, t, h] {self.q.shape[:3]}"
                )
            if not np.isfinite(self.gates).all():
                raise NonFiniteInput("gates contain non-finite values")
            if (self.gates < 0).any() or (self.gates > 1).any():
                raise InvalidSpec("gates must lie in [0, 1]")

    @property
    def b(self) -> int:
        return self.q.shape[0]

    @property
    def t(self) -> int:
        return self.q.shape[1]

    @property
    def h(self) -> int:
        return self.q.shape[2]

    @property
    def d(self) -> int:
        return self.q.shape[3]

    @property
    def v_dim(self) -> int:
        return self.v.shape[3]


@dataclass(frozen=True)
class AttentionConfig:
    """Mechanism selection plus the knobs shared by all three forms.

    ``expansion`` carries the power degree p for LINEAR/POWER and selects
    the feature map used by the recurrent and chunked forms. ``scale``
    defaults to 1/sqrt(d) at call time. ``epsilon`` (log-space stabilizer)
    defaults per dtype: 1e-12 for f64, 1e-7 for f32.
    """

    mechanism: Mechanism
    expansion: ExpansionSpec | None = None
    window: int | None = None
    chunk_size: int | None = None
    scale: float | None = None
    normalize: bool = False
    use_log_space: bool = False
    epsilon: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mechanism", Mechanism(self.mechanism))
        if self.mechanism is Mechanism.WINDOW:
            if self.window is None or self.window < 1:
                raise InvalidSpec(f"window mechanism needs window >= 1, got {self.window}")
        if self.mechanism in (Mechanism.LINEAR, Mechanism.POWER):
            if self.expansion is None:
                raise InvalidSpec(f"{self.mechanism.value} mechanism needs an ExpansionSpec")
        if self.mechanism is Mechanism.POWER:
            if self.normalize and self.p % 2 != 0:
                raise OddPowerWithNormalize(
                    f"normalization needs positive scores: p={self.p} must be even"
                )
            if self.use_log_space and self.p % 2 != 0:
                raise InvalidSpec(f"log-space scoring needs even p, got p={self.p}")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise InvalidSpec(f"chunk_size must be >= 1, got {self.chunk_size}")

    @property
    def p(self) -> int:
        if self.expansion is None:
            raise InvalidSpec(f"{self.mechanism.value} mechanism has no power degree")
        return self.expansion.p

    def scale_for(self, d: int) -> float:
        return 1.0 / math.sqrt(d) if self.scale is None else self.scale

    def epsilon_for(self, dtype: np.dtype) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return DEFAULT_EPSILON.get(np.dtype(dtype), 1e-12)

    @classmethod
    def exp(cls, **kw) -> "AttentionConfig":
        return cls(Mechanism.EXP, **kw)

    @classmethod
    def windowed(cls, window: int, **kw) -> "AttentionConfig":
        return cls(Mechanism.WINDOW, window=window, **kw)

    @classmethod
    def linear(cls, expansion: ExpansionSpec, **kw) -> "AttentionConfig":
        return cls(Mechanism.LINEAR, expansion=expansion, **kw)

    @classmethod
    def power(cls, expansion: ExpansionSpec, **kw) -> "AttentionConfig":
        return cls(Mechanism.POWER, expansion=expansion, **kw)


@dataclass
class AttentionOutput:
    """y is [b, t, h, v]; rowsum is the per-query score sum [b, t, h]."""

    y: np.ndarray
    rowsum: np.ndarray | None = None


def _bhts(a: np.ndarray) -> np.ndarray:
    """[b, t, h, x] -> [b, h, t, x] view."""
    return np.swapaxes(a, 1, 2)


def causal_mask(t: int, window: int | None = None) -> np.ndarray:
    """Boolean [t, t] mask; window w keeps the w most recent keys."""
    i = np.arange(t)
    mask = i[:, None] >= i[None, :]
    if window is not None:
        mask &= i[:, None] - i[None, :] < window
    return mask


def gate_decay_matrix(gates: np.ndarray) -> np.ndarray:
    """Pairwise decay G[..., i, j] = prod(g[..., j+1 .. i]) from gates [..., t].

    Exact for zero gates (no log/ratio tricks). Entries with i < j are 1
    and must be masked by the caller.
    """
    t = gates.shape[-1]
    k = np.arange(t)
    factors = np.where(k[:, None] > k[None, :], gates[..., :, None], 1.0)
    return np.multiply.accumulate(factors, axis=-2)


def _log_decay(gates_bht: np.ndarray | None, t: int) -> np.ndarray | None:
    if gates_bht is None:
        return None
    decay = gate_decay_matrix(gates_bht)
    with np.errstate(divide="ignore"):
        return np.log(decay)


def _exp_family(batch: SequenceBatch, cfg: AttentionConfig, window: int | None) -> AttentionOutput:
    q, k, v = _bhts(batch.q), _bhts(batch.k), _bhts(batch.v)
    t = batch.t
    scale = cfg.scale_for(batch.d)
    scores = (scale * q) @ np.swapaxes(k, -1, -2)
    mask = causal_mask(t, window)
    log_decay = _log_decay(None if batch.gates is None else _bhts(batch.gates), t)
    if log_decay is not None:
        scores = scores + log_decay
    scores = np.where(mask, scores, -np.inf)
    rowmax = scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores - rowmax)
    shifted_sum = weights.sum(axis=-1)
    numer = weights @ v
    restore = np.exp(rowmax[..., 0])
    if cfg.normalize:
        y = numer / shifted_sum[..., None]
    else:
        y = numer * restore[..., None]
    rowsum = shifted_sum * restore
    return AttentionOutput(_bhts(y), np.swapaxes(rowsum, 1, 2))


def exp_attention(batch: SequenceBatch, cfg: AttentionConfig) -> AttentionOutput:
    """Causal exponential attention, stabilized by per-row max subtraction."""
    if cfg.mechanism is not Mechanism.EXP:
        raise InvalidSpec(f"expected exp mechanism, got {cfg.mechanism.value}")
    return _exp_family(batch, cfg, window=None)


def window_attention(batch: SequenceBatch, cfg: AttentionConfig) -> AttentionOutput:
    """Exponential attention over the ``window`` most recent tokens."""
    if cfg.mechanism is not Mechanism.WINDOW:
        raise InvalidSpec(f"expected window mechanism, got {cfg.mechanism.value}")
    return _exp_family(batch, cfg, window=cfg.window)


def _masked_score_output(
    powered: np.ndarray,
    v: np.ndarray,
    mask: np.ndarray,
    decay: np.ndarray | None,
    normalize: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Shared tail of the polynomial-score paths: mask, gate, reduce."""
    weights = np.where(mask, powered, 0.0)
    if decay is not None:
        weights = weights * decay
    rowsum = weights.sum(axis=-1)
    y = weights @ v
    if normalize:
        if (rowsum <= 0).any():
            raise ZeroDenominator("score sum is not positive; cannot normalize")
        y = y / rowsum[..., None]
    return y, rowsum


def power_attention_form(batch: SequenceBatch, cfg: AttentionConfig) -> AttentionOutput:
    """Attention with scores ``(scale * q . k)**p`` and fused score sums.

    With ``use_log_space`` the scores go through p*log(|s| + eps) followed
    by row-max subtraction and a masked exponential (valid for even p).
    """
    if cfg.mechanism is not Mechanism.POWER:
        raise InvalidSpec(f"expected power mechanism, got {cfg.mechanism.value}")
    q, k, v = _bhts(batch.q), _bhts(batch.k), _bhts(batch.v)
    t = batch.t
    p = cfg.p
    scale = cfg.scale_for(batch.d)
    scores = (scale * q) @ np.swapaxes(k, -1, -2)
    mask = causal_mask(t)
    gates_bht = None if batch.gates is None else _bhts(batch.gates)

    if cfg.use_log_space:
        eps = cfg.epsilon_for(scores.dtype)
        logscores = p * np.log(np.abs(scores) + eps)
        log_decay = _log_decay(gates_bht, t)
        if log_decay is not None:
            logscores = logscores + log_decay
        logscores = np.where(mask, logscores, -np.inf)
        rowmax = logscores.max(axis=-1, keepdims=True)
        weights = np.exp(logscores - rowmax)
        shifted_sum = weights.sum(axis=-1)
        numer = weights @ v
        restore = np.exp(rowmax[..., 0])
        if cfg.normalize:
            y = numer / shifted_sum[..., None]
        else:
            y = numer * restore[..., None]
        rowsum = shifted_sum * restore
    else:
        decay = None if gates_bht is None else gate_decay_matrix(gates_bht)
        y, rowsum = _masked_score_output(scores**p, v, mask, decay, cfg.normalize)
    return AttentionOutput(_bhts(y), np.swapaxes(rowsum, 1, 2))


def linear_attention_form(batch: SequenceBatch, cfg: AttentionConfig) -> AttentionOutput:
    """Linear attention through an explicit feature expansion.

    Scores are ``phi(scale * q) . phi(k)``; with a degree-p expansion this
    equals the power form. Normalization is the caller's responsibility to
    keep meaningful (positive scores).
    """
    if cfg.mechanism is not Mechanism.LINEAR:
        raise InvalidSpec(f"expected linear mechanism, got {cfg.mechanism.value}")
    q, k, v = _bhts(batch.q), _bhts(batch.k), _bhts(batch.v)
    spec = cfg.expansion
    scale = cfg.scale_for(batch.d)
    phi_q = expand(scale * q, spec)
    phi_k = expand(k, spec)
    scores = phi_q @ np.swapaxes(phi_k, -1, -2)
    mask = causal_mask(batch.t)
    decay = None if batch.gates is None else gate_decay_matrix(_bhts(batch.gates))
    y, rowsum = _masked_score_output(scores, v, mask, decay, cfg.normalize)
    return AttentionOutput(_bhts(y), np.swapaxes(rowsum, 1, 2))


_DISPATCH = {
    Mechanism.EXP: exp_attention,
    Mechanism.WINDOW: window_attention,
    Mechanism.LINEAR: linear_attention_form,
    Mechanism.POWER: power_attention_form,
}


def attention(batch: SequenceBatch, cfg: AttentionConfig) -> AttentionOutput:
    """Dispatch to the configured mechanism."""
    return _DISPATCH[cfg.mechanism](batch, cfg)
