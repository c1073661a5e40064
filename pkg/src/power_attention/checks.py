"""Self-check suites behind `power-attention check` and `equiv`.

Every record is a flat JSON-serializable dict so the CLI can stream them
as JSON lines; failures carry the seed needed to reproduce them.
"""

from __future__ import annotations

import numpy as np

from .attention import (
    AttentionConfig,
    SequenceBatch,
    linear_attention_form,
    power_attention_form,
)
from .chunked import ChunkPlan, chunked_power_attention, recurrent_power_attention
from .expansions import ExpansionKind, ExpansionSpec
from .gradients import finite_difference_oracle, vjp_chunked, vjp_power_attention
from .inputs import generate_batch

EQUIV_TOL = {np.dtype(np.float64): 1e-8, np.dtype(np.float32): 5e-3}
GRAD_TOL = 1e-5


def max_rel_error(a, b) -> float:
    """max |a-b| / max(1, |a|, |b|), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def max_abs_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def _power_cfg(p: int, d: int, kind: str = "spow", d_tile: int | None = None, **kw) -> AttentionConfig:
    spec = ExpansionSpec(ExpansionKind(kind), p, d, d_tile)
    return AttentionConfig.power(spec, **kw)


def three_form_records(
    t_values=(1, 2, 3, 5, 8, 16, 33, 64),
    chunk_sizes=(1, 3, 7, 16, 64, 100),
    p_values=(2, 4),
    d: int = 4,
    v_dim: int = 3,
    b: int = 1,
    h: int = 2,
    gating=(False, True),
    normalize=(False, True),
    seed: int = 0,
    dtype=np.float64,
    tol: float | None = None,
):
    """Attention vs recurrent vs chunked agreement over a size grid."""
    tol = EQUIV_TOL[np.dtype(dtype)] if tol is None else tol
    for p in p_values:
        for gated in gating:
            for norm in normalize:
                if norm and p % 2:
                    continue  # odd degrees cannot normalize
                cfg = _power_cfg(p, d, normalize=norm)
                for t in t_values:
                    batch = generate_batch(b, t, h, d, v_dim, seed=seed, dtype=dtype, gating=gated)
                    ref = recurrent_power_attention(batch, cfg)
                    att = power_attention_form(batch, cfg)
                    err_rec = max_rel_error(att.y, ref.y)
                    for c in chunk_sizes:
                        chk = chunked_power_attention(batch, cfg, ChunkPlan(t, c))
                        err = max(err_rec, max_rel_error(att.y, chk.y))
                        yield {
                            "check": "three_form",
                            "p": p,
                            "t": t,
                            "c": c,
                            "gated": gated,
                            "normalized": norm,
                            "max_rel_err": err,
                            "tol": tol,
                            "seed": seed,
                            "passed": err <= tol,
                        }


def expansion_kind_records(
    p_values=(2, 3),
    d: int = 4,
    v_dim: int = 3,
    t: int = 12,
    d_tile: int = 2,
    seed: int = 0,
    tol: float = 1e-9,
):
    """All feature-map kinds produce the same linear-attention output."""
    for p in p_values:
        batch = generate_batch(1, t, 1, d, v_dim, seed=seed)
        power = _power_cfg(p, d)
        ref = power_attention_form(batch, power).y
        for kind, tile in (("tpow", None), ("spow", None), ("tspow", d_tile)):
            spec = ExpansionSpec(ExpansionKind(kind), p, d, tile)
            got = linear_attention_form(batch, AttentionConfig.linear(spec)).y
            err = max_rel_error(ref, got)
            yield {
                "check": "expansion_kind",
                "kind": kind,
                "p": p,
                "max_rel_err": err,
                "tol": tol,
                "seed": seed,
                "passed": err <= tol,
            }


def gradient_records(
    seeds=range(5),
    t: int = 8,
    d: int = 3,
    v_dim: int = 2,
    p: int = 2,
    chunk_size: int = 3,
    step: float = 1e-4,
    tol: float = GRAD_TOL,
):
    """Analytic VJPs vs central differences for both pipeline shapes."""
    for seed in seeds:
        for gated in (False, True):
            for norm in (False, True):
                batch = generate_batch(1, t, 1, d, v_dim, seed=seed, gating=gated)
                cfg = _power_cfg(p, d, normalize=norm)
                rng = np.random.Generator(np.random.Philox(seed + 10_000))
                upstream = rng.uniform(-1.0, 1.0, batch.v.shape[:3] + (v_dim,))
                inputs = [batch.q, batch.k, batch.v] + ([batch.gates] if gated else [])

                def f_att(q, k, v, *g):
                    return power_attention_form(
                        SequenceBatch(q, k, v, g[0] if g else None), cfg
                    ).y

                fd = finite_difference_oracle(f_att, inputs, upstream, step=step)
                got = vjp_power_attention(batch, cfg, upstream)
                parts = [got.dq, got.dk, got.dv] + ([got.dgates] if gated else [])
                err = max(max_rel_error(a, b) for a, b in zip(parts, fd))
                yield {
                    "check": "vjp_attention",
                    "gated": gated,
                    "normalized": norm,
                    "max_rel_err": err,
                    "tol": tol,
                    "seed": int(seed),
                    "passed": err <= tol,
                }

                plan = ChunkPlan(t, chunk_size)

                def f_chunk(q, k, v, *g):
                    return chunked_power_attention(
                        SequenceBatch(q, k, v, g[0] if g else None), cfg, plan
                    ).y

                fd = finite_difference_oracle(f_chunk, inputs, upstream, step=step)
                got = vjp_chunked(batch, cfg, plan, upstream)
                parts = [got.dq, got.dk, got.dv] + ([got.dgates] if gated else [])
                err = max(max_rel_error(a, b) for a, b in zip(parts, fd))
                yield {
                    "check": "vjp_chunked",
                    "gated": gated,
                    "normalized": norm,
                    "max_rel_err": err,
                    "tol": tol,
                    "seed": int(seed),
                    "passed": err <= tol,
                }


def run_check_suite(
    t_values=(1, 3, 8, 16, 33),
    chunk_sizes=(1, 3, 7, 16),
    p_values=(2, 4),
    d: int = 4,
    v_dim: int = 3,
    grad_seeds=range(3),
    seed: int = 0,
    dtype=np.float64,
    gating=(False, True),
    normalize=(False, True),
):
    """The default `check` run: equivalences, kind agreement, gradients."""
    yield from three_form_records(
        t_values=t_values,
        chunk_sizes=chunk_sizes,
        p_values=p_values,
        d=d,
        v_dim=v_dim,
        seed=seed,
        dtype=dtype,
        gating=gating,
        normalize=normalize,
    )
    yield from expansion_kind_records(d=d, v_dim=v_dim, seed=seed)
    yield from gradient_records(seeds=grad_seeds, d=min(d, 3), v_dim=min(v_dim, 2))
