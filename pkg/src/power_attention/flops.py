"""FLOP accounting and the weight-state FLOP ratio (WSFR).

Convention, fixed and documented rather than derivable: one
multiply-accumulate = 2 FLOPs, forward pass only. Causal attention
attends to (t+1)/2 keys on average; a window clamps the sequence before
averaging, (min(t, w)+1)/2, so window costs saturate exactly at t = w.
Weight FLOPs are 2 * n_params per token. State FLOPs per token and layer
and head:

  exp      2 * (d + v) * (t+1)/2
  window   2 * (d + v) * (min(t, w)+1)/2
  linear/  2 * (D*v + D*v)            (update-state + query-state)
  power    + 2 * (d + v) * (c+1)/2    (intra-chunk term, when c is set)

Exact published ratio constants depend on unstated accounting choices and
are not reproduced; the qualitative pattern (where ratios cross, what is
t-independent, where window costs saturate) is.

Training FLOPs are commonly estimated as 3x the forward pass (backward
roughly doubles the forward work). That heuristic is noted here for
context only; nothing in this module asserts it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .attention import Mechanism
from .chunked import ChunkPlan
from .errors import InvalidSpec
from .expansions import ExpansionSpec, expansion_dim

MAC = 2  # FLOPs per multiply-accumulate


@dataclass(frozen=True)
class ArchSpec:
    """Architecture + attention + context combination to account for."""

    n_params: int  # non-embedding parameters
    n_layers: int
    n_heads: int
    head_dim: int
    context: int
    value_dim: int | None = None
    mechanism: Mechanism = Mechanism.EXP
    window: int | None = None
    expansion: ExpansionSpec | None = None
    chunk_size: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mechanism", Mechanism(self.mechanism))
        if self.value_dim is None:
            object.__setattr__(self, "value_dim", self.head_dim)
        for name in ("n_layers", "n_heads", "head_dim", "context", "value_dim"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be positive")
        if self.n_params < 0:
            raise InvalidSpec("n_params must be >= 0")
        if self.mechanism is Mechanism.WINDOW and (self.window is None or self.window < 1):
            raise InvalidSpec("window mechanism needs window >= 1")
        if self.mechanism in (Mechanism.LINEAR, Mechanism.POWER) and self.expansion is None:
            raise InvalidSpec(f"{self.mechanism.value} mechanism needs an ExpansionSpec")

    @property
    def model_width(self) -> int:
        return self.n_heads * self.head_dim


@dataclass
class FlopReport:
    """Per-token weight/state FLOPs and their ratio, min side scaled to 1."""

    weight_flops_per_token: float
    state_flops_per_token: float
    wsfr: tuple[float, float]
    breakdown: dict = field(default_factory=dict)

    def ratio_label(self) -> str:
        w, s = self.wsfr
        return f"{w:.3g}:{s:.3g}"

    def to_dict(self) -> dict:
        return {
            "weight_flops_per_token": self.weight_flops_per_token,
            "state_flops_per_token": self.state_flops_per_token,
            "wsfr": list(self.wsfr),
            "breakdown": dict(self.breakdown),
        }


def dense_transformer_params(width: int, layers: int, mlp_ratio: int = 4) -> int:
    """Standard non-embedding parameter estimate: (4 + 2*mlp_ratio) * width^2 * layers."""
    return (4 + 2 * mlp_ratio) * width**2 * layers


def weight_flops(arch: ArchSpec) -> float:
    """Per-token weight FLOPs: 2 * n_params (forward MAC convention)."""
    return float(MAC * arch.n_params)


def _state_breakdown(arch: ArchSpec) -> dict[str, float]:
    lh = arch.n_layers * arch.n_heads
    d, v, t = arch.head_dim, arch.value_dim, arch.context
    if arch.mechanism in (Mechanism.EXP, Mechanism.WINDOW):
        attended = min(t, arch.window) if arch.mechanism is Mechanism.WINDOW else t
        t_bar = (attended + 1) / 2
        return {
            "qk_scores": MAC * lh * d * t_bar,
            "score_value": MAC * lh * v * t_bar,
        }
    dim = expansion_dim(arch.expansion)
    out = {
        "update_state": MAC * lh * dim * v,
        "query_state": MAC * lh * dim * v,
    }
    if arch.chunk_size is not None:
        out["intra_attention"] = MAC * lh * (d + v) * (arch.chunk_size + 1) / 2
    return out


def state_flops(arch: ArchSpec) -> float:
    """Per-token state FLOPs under the documented convention."""
    return float(sum(_state_breakdown(arch).values()))


def _ratio_pair(w: float, s: float) -> tuple[float, float]:
    if w == 0 and s == 0:
        return (1.0, 1.0)
    if w >= s:
        return (w / s, 1.0) if s > 0 else (1.0, 0.0)
    return (1.0, s / w) if w > 0 else (0.0, 1.0)


def wsfr(arch: ArchSpec) -> FlopReport:
    """Weight-state FLOP report with the ratio normalized to x:1 or 1:x."""
    w = weight_flops(arch)
    s = state_flops(arch)
    return FlopReport(w, s, _ratio_pair(w, s), _state_breakdown(arch))


def count_flops_chunked(plan: ChunkPlan, spec: ExpansionSpec, v_dim: int) -> dict[str, int]:
    """Exact per-stream MAC counts per chunked-pipeline stage.

    Integer and deterministic: causal pairs within a chunk of length c
    cost c*(c+1)/2 score/value MACs, expansion costs D*p per token, the
    state contractions D*(v+1) per token (state plus key-sum), and
    discumsum D*(v+1) per chunk.
    """
    dim = expansion_dim(spec)
    p, d = spec.p, spec.d
    t = plan.t
    pairs = sum(ck * (ck + 1) // 2 for ck in (stop - start for start, stop in plan.bounds()))
    counts = {
        "intra_attention": pairs * (d + (p - 1) + v_dim),
        "expansion": 2 * t * dim * p,
        "update_state": t * dim * (v_dim + 1),
        "discumsum": plan.n_chunks * dim * (v_dim + 1),
        "query_state": t * dim * (v_dim + 1),
    }
    counts["total"] = sum(counts.values())
    return counts


def count_flops_attention(t: int, d: int, v_dim: int, p: int = 1) -> dict[str, int]:
    """Exact per-stream MAC counts for the quadratic attention form."""
    pairs = t * (t + 1) // 2
    counts = {
        "scores": pairs * d,
        "power": pairs * (p - 1),
        "score_value": pairs * v_dim,
    }
    counts["total"] = sum(counts.values())
    return counts
