"""Linear-cost evaluation: recurrent form, chunk kernels, orchestrator.

The chunked pipeline factors into three kernels so per-stage timings map
onto the same breakdown a fused implementation reports:

  1. intra-chunk attention  -- quadratic within each chunk, emits the
     per-query score sum alongside the output;
  2. update-state           -- per-chunk state contributions (fused
     expansion + contraction; see power_attention.kernels);
  3. discumsum              -- gated cumulative sum of chunk states;
  4. query-state            -- read the accumulated state with expanded
     queries, fused with the intra-chunk output and normalization.

All steps reproduce the attention form exactly (up to float rounding) for
any chunk size, including partial final chunks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .attention import (
    AttentionConfig,
    AttentionOutput,
    Mechanism,
    SequenceBatch,
    power_attention_form,
)
from .errors import InvalidSpec, ShapeMismatch, StateTooLarge, ZeroDenominator
from .expansions import ExpansionSpec, expand, expansion_dim
from .kernels import query_state_kernel, update_state_kernel

# recurrent/chunked refuse to allocate states above this many bytes
DEFAULT_STATE_BUDGET = 2**31


@dataclass
class ChunkState:
    """Running state for one (batch, head) stream.

    s is the [D, v] sum of decayed expanded-key/value outer products;
    key_sum is the matching [D] sum of decayed expanded keys (the
    normalization accumulator).
    """

    s: np.ndarray
    key_sum: np.ndarray
    spec: ExpansionSpec

    def __post_init__(self) -> None:
        dim = expansion_dim(self.spec)
        if self.s.ndim != 2 or self.s.shape[0] != dim:
            raise ShapeMismatch(f"state must be [D={dim}, v], got {self.s.shape}")
        if self.key_sum.shape != (dim,):
            raise ShapeMismatch(f"key_sum must be [D={dim}], got {self.key_sum.shape}")

    @classmethod
    def zeros(cls, spec: ExpansionSpec, v_dim: int, dtype=np.float64) -> "ChunkState":
        dim = expansion_dim(spec)
        return cls(np.zeros((dim, v_dim), dtype=dtype), np.zeros(dim, dtype=dtype), spec)


@dataclass(frozen=True)
class ChunkPlan:
    """Partition of t tokens into ceil(t/c) chunks; the last may be short."""

    t: int
    c: int

    def __post_init__(self) -> None:
        if self.t < 1 or self.c < 1:
            raise InvalidSpec(f"need t >= 1 and c >= 1, got t={self.t}, c={self.c}")

    @property
    def n_chunks(self) -> int:
        return -(-self.t // self.c)

    @property
    def last_chunk_len(self) -> int:
        return self.t - (self.n_chunks - 1) * self.c

    def bounds(self) -> list[tuple[int, int]]:
        return [(s, min(s + self.c, self.t)) for s in range(0, self.t, self.c)]


def _suffix_products(g: np.ndarray) -> np.ndarray:
    """W[..., j] = prod(g[..., j+1:]); the last entry is 1."""
    out = np.ones_like(g)
    if g.shape[-1] > 1:
        rev = np.cumprod(g[..., ::-1], axis=-1)[..., ::-1]
        out[..., :-1] = rev[..., 1:]
    return out


def _prefix_products(g: np.ndarray) -> np.ndarray:
    """gp[..., m] = prod(g[..., : m+1]) (inclusive)."""
    return np.cumprod(g, axis=-1)


def _check_state_budget(spec: ExpansionSpec, v_dim: int, streams: int, itemsize: int, budget: int) -> int:
    dim = expansion_dim(spec)
    nbytes = dim * (v_dim + 1) * streams * itemsize
    if nbytes > budget:
        raise StateTooLarge(
            f"state of {nbytes} bytes (D={dim}, v={v_dim}, streams={streams}) "
            f"exceeds the budget of {budget} bytes"
        )
    return dim


def _degree_spec(cfg: AttentionConfig) -> ExpansionSpec:
    if cfg.mechanism not in (Mechanism.POWER, Mechanism.LINEAR) or cfg.expansion is None:
        raise InvalidSpec(
            f"{cfg.mechanism.value} mechanism has no feature expansion; "
            "recurrent/chunked forms need LINEAR or POWER"
        )
    return cfg.expansion


def update_state(
    spec: ExpansionSpec,
    k_chunk: np.ndarray,
    v_chunk: np.ndarray,
    gates_chunk: np.ndarray | None = None,
    backend: str | None = None,
) -> tuple[ChunkState, float]:
    """Within-chunk state contribution plus the chunk's total decay.

    k_chunk [c, d], v_chunk [c, v], gates_chunk [c] or None. Token j is
    weighted by the gate product from j+1 to the chunk end, so the result
    is the state increment as seen from the chunk boundary. Accumulation
    across chunks is discumsum's job; nothing is added here.
    """
    k_chunk = np.asarray(k_chunk)
    v_chunk = np.asarray(v_chunk)
    if k_chunk.ndim != 2 or v_chunk.ndim != 2 or k_chunk.shape[0] != v_chunk.shape[0]:
        raise ShapeMismatch(f"chunk arrays must be [c, d]/[c, v], got {k_chunk.shape}, {v_chunk.shape}")
    if k_chunk.shape[1] != spec.d:
        raise ShapeMismatch(f"keys have dim {k_chunk.shape[1]}, spec.d={spec.d}")
    if gates_chunk is None:
        decay = None
        lam = 1.0
    else:
        gates_chunk = np.asarray(gates_chunk)
        if gates_chunk.shape != (k_chunk.shape[0],):
            raise ShapeMismatch(f"gates must be [c], got {gates_chunk.shape}")
        decay = _suffix_products(gates_chunk)[None]
        lam = float(gates_chunk.prod())
    s, key_sum = update_state_kernel(k_chunk[None], v_chunk[None], decay, spec, backend=backend)
    return ChunkState(s[0], key_sum[0], spec), lam


def discumsum(values: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    """Discounted cumulative sum along axis 0.

    out[0] = values[0]; out[k] = lambdas[k-1] * out[k-1] + values[k].
    ``lambdas`` holds the n-1 transition decays (a length-n array is
    accepted, with the final entry ignored); entries may broadcast against
    a values slice for per-stream decay. Matches the naive sequential loop
    bit-exactly.
    """
    values = np.asarray(values)
    lambdas = np.asarray(lambdas, dtype=values.dtype)
    n = values.shape[0]
    if lambdas.shape[0] not in (max(n - 1, 0), n):
        raise ShapeMismatch(f"need {n - 1} transition decays, got {lambdas.shape[0]}")
    if (lambdas < 0).any() or (lambdas > 1).any():
        raise InvalidSpec("decays must lie in [0, 1]")
    out = np.empty_like(values)
    out[0] = values[0]
    for k in range(1, n):
        out[k] = lambdas[k - 1] * out[k - 1] + values[k]
    return out


def discumsum_states(states: list[ChunkState], lambdas: np.ndarray) -> list[ChunkState]:
    """discumsum applied elementwise to both fields of a state sequence."""
    if not states:
        return []
    spec = states[0].spec
    s = discumsum(np.stack([st.s for st in states]), lambdas)
    key_sum = discumsum(np.stack([st.key_sum for st in states]), lambdas)
    return [ChunkState(s[k], key_sum[k], spec) for k in range(len(states))]


def query_state(
    state: ChunkState,
    q_chunk: np.ndarray,
    y_attn: np.ndarray | None = None,
    zeta: np.ndarray | None = None,
    gates_prefix: np.ndarray | None = None,
    scale: float | None = None,
    normalize: bool = False,
    backend: str | None = None,
) -> np.ndarray:
    """Combine the accumulated state with the intra-chunk attention output.

    q_chunk [c, d] (unscaled; ``scale`` defaults to 1/sqrt(d)); y_attn
    [c, v] and zeta [c] are the intra-chunk output and score sum (zeros
    when omitted); gates_prefix[m] is the gate product from the chunk
    start through position m. Normalizing divides by
    zeta + gates_prefix * phi(q) . key_sum and raises ZeroDenominator if
    that is not positive.
    """
    q_chunk = np.asarray(q_chunk)
    if q_chunk.ndim != 2 or q_chunk.shape[1] != state.spec.d:
        raise ShapeMismatch(f"queries must be [c, d={state.spec.d}], got {q_chunk.shape}")
    c = q_chunk.shape[0]
    if scale is None:
        scale = 1.0 / np.sqrt(state.spec.d)
    ys, denom = query_state_kernel(
        scale * q_chunk[None], state.s[None], state.key_sum[None], state.spec, backend=backend
    )
    ys, denom = ys[0], denom[0]
    if gates_prefix is not None:
        gates_prefix = np.asarray(gates_prefix)
        if gates_prefix.shape != (c,):
            raise ShapeMismatch(f"gates_prefix must be [c], got {gates_prefix.shape}")
        ys = ys * gates_prefix[:, None]
        denom = denom * gates_prefix
    out = ys if y_attn is None else y_attn + ys
    if normalize:
        total = denom if zeta is None else zeta + denom
        if (total <= 0).any():
            raise ZeroDenominator(
                "zeta + phi(q) . key_sum is not positive (odd degree or all-zero inputs?)"
            )
        out = out / total[:, None]
    return out


def recurrent_power_attention(
    batch: SequenceBatch,
    cfg: AttentionConfig,
    state_budget: int = DEFAULT_STATE_BUDGET,
) -> AttentionOutput:
    """Token-by-token evaluation through the expanded recurrent state.

    State update: s <- g_i * s + phi(k_i) (x) v_i, key_sum <- g_i *
    key_sum + phi(k_i); output y_i = phi(scale * q_i) . s, divided by
    phi(scale * q_i) . key_sum when normalizing.
    """
    spec = _degree_spec(cfg)
    b, t, h = batch.b, batch.t, batch.h
    _check_state_budget(spec, batch.v_dim, b * h, batch.q.dtype.itemsize, state_budget)
    scale = cfg.scale_for(batch.d)
    dim = expansion_dim(spec)
    dtype = np.result_type(batch.q, batch.v)
    s = np.zeros((b, h, dim, batch.v_dim), dtype=dtype)
    key_sum = np.zeros((b, h, dim), dtype=dtype)
    y = np.empty((b, t, h, batch.v_dim), dtype=dtype)
    rowsum = np.empty((b, t, h), dtype=dtype)
    for i in range(t):
        phi_k = expand(batch.k[:, i], spec)
        phi_q = expand(scale * batch.q[:, i], spec)
        if batch.gates is not None:
            g = batch.gates[:, i][..., None]
            s *= g[..., None]
            key_sum *= g
        s += phi_k[..., :, None] * batch.v[:, i][..., None, :]
        key_sum += phi_k
        y[:, i] = np.einsum("bhD,bhDv->bhv", phi_q, s)
        rowsum[:, i] = np.einsum("bhD,bhD->bh", phi_q, key_sum)
    if cfg.normalize:
        if (rowsum <= 0).any():
            raise ZeroDenominator("score sum is not positive; cannot normalize")
        y = y / rowsum[..., None]
    return AttentionOutput(y, rowsum)


def _chunk_gate_parts(gates_bht: np.ndarray | None, start: int, stop: int):
    """(suffix decays W, prefix decays gp, total decay lam) for one chunk."""
    if gates_bht is None:
        return None, None, None
    g = gates_bht[..., start:stop]
    return _suffix_products(g), _prefix_products(g), g.prod(axis=-1)


def _flatten_streams(a: np.ndarray) -> np.ndarray:
    """[b, h, c, x] -> [b*h, c, x]."""
    return a.reshape(-1, *a.shape[2:])


def chunked_power_attention(
    batch: SequenceBatch,
    cfg: AttentionConfig,
    plan: ChunkPlan | None = None,
    state_budget: int = DEFAULT_STATE_BUDGET,
    backend: str | None = None,
    op_timer: dict | None = None,
    _want_trace: bool = False,
):
    """Chunked evaluation: intra-chunk attention + state pipeline.

    Equals the attention and recurrent forms for every chunk size,
    including c that does not divide t and c >= t. ``op_timer``, when
    given, accumulates wall nanoseconds per stage under the keys
    intra_attention / update_state / discumsum / query_state.
    """
    spec = _degree_spec(cfg)
    if plan is None:
        if cfg.chunk_size is None:
            raise InvalidSpec("chunked form needs a ChunkPlan or cfg.chunk_size")
        plan = ChunkPlan(batch.t, cfg.chunk_size)
    if plan.t != batch.t:
        raise ShapeMismatch(f"plan is for t={plan.t}, batch has t={batch.t}")
    b, h = batch.b, batch.h
    streams = b * h
    _check_state_budget(spec, batch.v_dim, streams, batch.q.dtype.itemsize, state_budget)

    clock = time.perf_counter_ns
    timing = op_timer is not None

    def _tick(key, t0):
        if timing:
            op_timer[key] = op_timer.get(key, 0) + clock() - t0

    scale = cfg.scale_for(batch.d)
    gates_bht = None if batch.gates is None else np.swapaxes(batch.gates, 1, 2)
    intra_cfg = replace(cfg, mechanism=Mechanism.POWER, normalize=False, chunk_size=None)
    bounds = plan.bounds()
    n = len(bounds)

    y_attn, zetas, contribs, key_contribs, gate_parts, lams = [], [], [], [], [], []
    for start, stop in bounds:
        sub = SequenceBatch(
            batch.q[:, start:stop],
            batch.k[:, start:stop],
            batch.v[:, start:stop],
            None if batch.gates is None else batch.gates[:, start:stop],
        )
        t0 = clock()
        intra = power_attention_form(sub, intra_cfg)
        _tick("intra_attention", t0)
        y_attn.append(intra.y)
        zetas.append(intra.rowsum)

        suffix, prefix, lam = _chunk_gate_parts(gates_bht, start, stop)
        gate_parts.append((suffix, prefix))
        lams.append(lam)
        t0 = clock()
        s_k, g_k = update_state_kernel(
            _flatten_streams(np.swapaxes(batch.k[:, start:stop], 1, 2)),
            _flatten_streams(np.swapaxes(batch.v[:, start:stop], 1, 2)),
            None if suffix is None else suffix.reshape(streams, -1),
            spec,
            backend=backend,
        )
        _tick("update_state", t0)
        contribs.append(s_k)
        key_contribs.append(g_k)

    t0 = clock()
    if n > 1:
        if batch.gates is None:
            trans = np.ones((n - 1, 1, 1, 1), dtype=contribs[0].dtype)
        else:
            trans = np.stack([lams[k].reshape(streams) for k in range(1, n)])[..., None, None]
        acc = discumsum(np.stack(contribs), trans)
        key_acc = discumsum(np.stack(key_contribs), trans[..., 0])
    else:
        acc = np.stack(contribs)
        key_acc = np.stack(key_contribs)
    _tick("discumsum", t0)

    dtype = contribs[0].dtype
    y = np.empty((b, batch.t, h, batch.v_dim), dtype=dtype)
    rowsum = np.empty((b, batch.t, h), dtype=dtype)
    for k, (start, stop) in enumerate(bounds):
        zeta_k = zetas[k]
        if k == 0:
            carried = np.zeros((b, stop - start, h, batch.v_dim), dtype=dtype)
            carried_denom = np.zeros((b, stop - start, h), dtype=dtype)
        else:
            t0 = clock()
            q_k = _flatten_streams(np.swapaxes(scale * batch.q[:, start:stop], 1, 2))
            ys, denom = query_state_kernel(q_k, acc[k - 1], key_acc[k - 1], spec, backend=backend)
            _tick("query_state", t0)
            _, prefix = gate_parts[k]
            if prefix is not None:
                ys = ys * prefix.reshape(streams, -1)[..., None]
                denom = denom * prefix.reshape(streams, -1)
            c_k = stop - start
            carried = np.swapaxes(ys.reshape(b, h, c_k, batch.v_dim), 1, 2)
            carried_denom = np.swapaxes(denom.reshape(b, h, c_k), 1, 2)
        y[:, start:stop] = y_attn[k] + carried
        rowsum[:, start:stop] = zeta_k + carried_denom

    if cfg.normalize:
        if (rowsum <= 0).any():
            raise ZeroDenominator("zeta + phi(q) . key_sum is not positive; cannot normalize")
        y = y / rowsum[..., None]
    out = AttentionOutput(y, rowsum)
    if _want_trace:
        trace = {
            "plan": plan,
            "bounds": bounds,
            "y_attn": y_attn,
            "zetas": zetas,
            "contribs": contribs,
            "key_contribs": key_contribs,
            "gate_parts": gate_parts,
            "lams": lams,
            "acc": acc,
            "key_acc": key_acc,
            "scale": scale,
            "intra_cfg": intra_cfg,
        }
        return out, trace
    return out


def stream_chunk(
    state: ChunkState | None,
    q_chunk: np.ndarray,
    k_chunk: np.ndarray,
    v_chunk: np.ndarray,
    gates_chunk: np.ndarray | None,
    cfg: AttentionConfig,
    backend: str | None = None,
) -> tuple[np.ndarray, ChunkState]:
    """One streaming step for a single (batch, head) stream.

    Consumes a [c, d]/[c, v] chunk against an incoming state (None means
    empty history) and returns (outputs [c, v], updated state). Feeding
    chunks in order reproduces the full-sequence chunked form with
    constant memory.
    """
    spec = _degree_spec(cfg)
    q_chunk = np.asarray(q_chunk)
    k_chunk = np.asarray(k_chunk)
    v_chunk = np.asarray(v_chunk)
    if state is None:
        state = ChunkState.zeros(spec, v_chunk.shape[1], dtype=np.result_type(q_chunk, v_chunk))
    sub = SequenceBatch(
        q_chunk[None, :, None, :],
        k_chunk[None, :, None, :],
        v_chunk[None, :, None, :],
        None if gates_chunk is None else np.asarray(gates_chunk)[None, :, None],
    )
    intra = power_attention_form(sub, replace(cfg, mechanism=Mechanism.POWER, normalize=False, chunk_size=None))
    prefix = None if gates_chunk is None else _prefix_products(np.asarray(gates_chunk))
    y = query_state(
        state,
        q_chunk,
        y_attn=intra.y[0, :, 0, :],
        zeta=intra.rowsum[0, :, 0],
        gates_prefix=prefix,
        scale=cfg.scale_for(q_chunk.shape[1]),
        normalize=cfg.normalize,
        backend=backend,
    )
    contrib, lam = update_state(spec, k_chunk, v_chunk, gates_chunk, backend=backend)
    new_state = ChunkState(lam * state.s + contrib.s, lam * state.key_sum + contrib.key_sum, spec)
    return y, new_state


def power_attention(
    batch: SequenceBatch,
    cfg: AttentionConfig,
    form: str = "attention",
    plan: ChunkPlan | None = None,
    backend: str | None = None,
    op_timer: dict | None = None,
) -> AttentionOutput:
    """Evaluate power attention in the requested form."""
    if form == "attention":
        return power_attention_form(batch, cfg)
    if form == "recurrent":
        return recurrent_power_attention(batch, cfg)
    if form == "chunked":
        return chunked_power_attention(batch, cfg, plan, backend=backend, op_timer=op_timer)
    raise InvalidSpec(f"form must be attention, recurrent, or chunked, got {form!r}")
