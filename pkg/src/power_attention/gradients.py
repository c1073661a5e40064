"""Reverse-mode gradients for every forward operation.

All VJPs are hand-derived and validated against the central-difference
oracle at the bottom of this module. Two conventions:

* the stabilized log-space scoring path is a numerical device, so its VJP
  differentiates the mathematically equivalent direct-power expression
  (no epsilon contamination);
* gate gradients are w.r.t. the raw gate values and require strictly
  positive gates (the chain rule divides by g).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionConfig,
    Mechanism,
    SequenceBatch,
    causal_mask,
    gate_decay_matrix,
)
from .chunked import ChunkPlan, ChunkState, _suffix_products, chunked_power_attention, discumsum
from .errors import InvalidSpec, ShapeMismatch
from .expansions import ExpansionSpec, expand, monomial_table
from .kernels import query_state_kernel


@dataclass
class GradBundle:
    """Gradients mirroring the forward inputs: [b, t, h, *] arrays."""

    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    dgates: np.ndarray | None = None


def _bhts(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, 1, 2)


def expand_vjp(x: np.ndarray, upstream: np.ndarray, spec: ExpansionSpec) -> np.ndarray:
    """d<upstream, phi(x)>/dx for x [..., d], upstream [..., D]."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    idx, weights = monomial_table(spec)
    dim, p = idx.shape
    if x.shape[-1] != spec.d or upstream.shape[-1] != dim or x.shape[:-1] != upstream.shape[:-1]:
        raise ShapeMismatch(
            f"expected x [..., {spec.d}] and upstream [..., {dim}], got {x.shape}, {upstream.shape}"
        )
    base = upstream * weights
    lead = x.shape[:-1]
    n = int(np.prod(lead, dtype=np.int64)) if lead else 1
    x2 = x.reshape(n, spec.d)
    base2 = base.reshape(n, dim)
    dx = np.zeros_like(x2)
    if p == 1:
        # every kind reduces to the identity map at degree one
        dx[:, idx[:, 0]] = base2
        return dx.reshape(x.shape)
    vals = [x2[:, idx[:, k]] for k in range(p)]
    prefix = [np.ones_like(base2)]
    for k in range(1, p):
        prefix.append(prefix[-1] * vals[k - 1])
    suffix = [np.ones_like(base2) for _ in range(p)]
    for k in range(p - 2, -1, -1):
        suffix[k] = suffix[k + 1] * vals[k + 1]
    rows = np.arange(n)[:, None]
    for k in range(p):
        np.add.at(dx, (rows, idx[:, k][None, :]), base2 * prefix[k] * suffix[k])
    return dx.reshape(x.shape)


def _gate_grad_from_decay_grad(
    d_decay: np.ndarray, decay: np.ndarray, gates: np.ndarray
) -> np.ndarray:
    """Pull a gradient on the pairwise decay matrix back to the gates.

    d/dg_k = sum_{j < k <= i} d_decay[i, j] * decay[i, j] / g_k; the double
    prefix sum evaluates the rectangle in O(t^2).
    """
    t = gates.shape[-1]
    prod = d_decay * decay
    col = prod.cumsum(axis=-1)
    rect = np.flip(np.flip(col, axis=-2).cumsum(axis=-2), axis=-2)
    out = np.zeros_like(gates)
    if t > 1:
        ks = np.arange(1, t)
        out[..., 1:] = rect[..., ks, ks - 1] / gates[..., 1:]
    return out


def vjp_attention_form(
    batch: SequenceBatch,
    cfg: AttentionConfig,
    upstream: np.ndarray,
    upstream_rowsum: np.ndarray | None = None,
) -> GradBundle:
    """d<upstream, Y>/d{q, k, v, gates} for the quadratic attention forms.

    ``upstream_rowsum`` optionally adds a cotangent on the score-sum
    output (used when composing through the chunked pipeline).
    """
    upstream = np.asarray(upstream)
    if upstream.shape != batch.v.shape[:3] + (batch.v_dim,):
        raise ShapeMismatch(f"upstream must match y {batch.v.shape}, got {upstream.shape}")
    q, k, v = _bhts(batch.q), _bhts(batch.k), _bhts(batch.v)
    du = _bhts(upstream)
    t = batch.t
    scale = cfg.scale_for(batch.d)
    mech = cfg.mechanism
    mask = causal_mask(t, cfg.window if mech is Mechanism.WINDOW else None)
    gates_bht = None if batch.gates is None else _bhts(batch.gates)
    decay = None if gates_bht is None else gate_decay_matrix(gates_bht)

    phi_q = phi_k = None
    if mech is Mechanism.LINEAR:
        phi_q = expand(scale * q, cfg.expansion)
        phi_k = expand(k, cfg.expansion)
        raw = phi_q @ np.swapaxes(phi_k, -1, -2)
        f = raw
    else:
        raw = (scale * q) @ np.swapaxes(k, -1, -2)
        if mech is Mechanism.POWER:
            f = raw**cfg.p
        else:
            f = np.exp(raw)
    f_masked = np.where(mask, f, 0.0)
    weights = f_masked if decay is None else f_masked * decay
    rowsum = weights.sum(axis=-1)
    numer = weights @ v

    if cfg.normalize:
        y = numer / rowsum[..., None]
        dnum = du / rowsum[..., None]
        drowsum = -(du * y).sum(axis=-1) / rowsum
    else:
        dnum = du
        drowsum = np.zeros_like(rowsum)
    if upstream_rowsum is not None:
        drowsum = drowsum + _bhts(np.asarray(upstream_rowsum)[..., None])[..., 0]

    dweights = dnum @ np.swapaxes(v, -1, -2) + drowsum[..., None]
    dv = np.swapaxes(weights, -1, -2) @ dnum
    if decay is None:
        df = np.where(mask, dweights, 0.0)
        dgates = None
    else:
        df = np.where(mask, dweights * decay, 0.0)
        d_decay = np.where(mask, dweights * f_masked, 0.0)
        dgates = _gate_grad_from_decay_grad(d_decay, decay, gates_bht)

    if mech is Mechanism.LINEAR:
        dphi_q = df @ phi_k
        dphi_k = np.swapaxes(df, -1, -2) @ phi_q
        dq = scale * expand_vjp(scale * q, dphi_q, cfg.expansion)
        dk = expand_vjp(k, dphi_k, cfg.expansion)
    else:
        if mech is Mechanism.POWER:
            draw = df * cfg.p * raw ** (cfg.p - 1)
        else:
            draw = df * f
        dq = scale * (draw @ k)
        dk = np.swapaxes(draw, -1, -2) @ (scale * q)

    return GradBundle(
        _bhts(dq),
        _bhts(dk),
        _bhts(dv),
        None if dgates is None else np.swapaxes(dgates, 1, 2),
    )


def vjp_power_attention(
    batch: SequenceBatch,
    cfg: AttentionConfig,
    upstream: np.ndarray,
    upstream_rowsum: np.ndarray | None = None,
) -> GradBundle:
    """Attention-form VJP for the power mechanism."""
    if cfg.mechanism is not Mechanism.POWER:
        raise InvalidSpec(f"expected power mechanism, got {cfg.mechanism.value}")
    return vjp_attention_form(batch, cfg, upstream, upstream_rowsum)


def _update_state_vjp_streams(
    k_chunk: np.ndarray,
    v_chunk: np.ndarray,
    decay: np.ndarray | None,
    spec: ExpansionSpec,
    d_state: np.ndarray,
    d_key_sum: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Backward of update_state over stacked streams; returns (dk, dv, dW)."""
    phi = expand(k_chunk, spec)
    partial = v_chunk @ np.swapaxes(d_state, -1, -2)
    if d_key_sum is not None:
        partial = partial + d_key_sum[:, None, :]
    if decay is None:
        dphi = partial
        dv = phi @ d_state
        d_decay = None
    else:
        dphi = decay[..., None] * partial
        dv = decay[..., None] * (phi @ d_state)
        d_decay = (phi * partial).sum(axis=-1)
    dk = expand_vjp(k_chunk, dphi, spec)
    return dk, dv, d_decay


def update_state_vjp(
    spec: ExpansionSpec,
    k_chunk: np.ndarray,
    v_chunk: np.ndarray,
    gates_chunk: np.ndarray | None,
    d_state: np.ndarray,
    d_key_sum: np.ndarray | None = None,
    d_lam: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Backward of the public update_state; returns (dk, dv, dgates)."""
    k_chunk = np.asarray(k_chunk)
    v_chunk = np.asarray(v_chunk)
    d_state = np.asarray(d_state)
    decay = None if gates_chunk is None else _suffix_products(np.asarray(gates_chunk))
    dk, dv, d_decay = _update_state_vjp_streams(
        k_chunk[None],
        v_chunk[None],
        None if decay is None else decay[None],
        spec,
        d_state[None],
        None if d_key_sum is None else np.asarray(d_key_sum)[None],
    )
    if gates_chunk is None:
        return dk[0], dv[0], None
    gates_chunk = np.asarray(gates_chunk)
    dgates = _gates_from_suffix_grad(d_decay[0], decay, gates_chunk, d_lam)
    return dk[0], dv[0], dgates


def _gates_from_suffix_grad(
    d_suffix: np.ndarray, suffix: np.ndarray, gates: np.ndarray, d_lam
) -> np.ndarray:
    """Chain suffix-product and total-product cotangents back to the gates.

    suffix[j] = prod(g[j+1:]) contains g_m for j < m; lam = prod(g)
    contains every g_m.
    """
    prod = d_suffix * suffix
    excl = np.zeros_like(prod)
    excl[..., 1:] = prod[..., :-1].cumsum(axis=-1)
    lam = gates.prod(axis=-1, keepdims=True)
    return (excl + np.asarray(d_lam)[..., None] * lam) / gates


def _gates_from_prefix_grad(d_prefix: np.ndarray, prefix: np.ndarray, gates: np.ndarray) -> np.ndarray:
    """prefix[m] = prod(g[: m+1]) contains g_k for k <= m."""
    prod = d_prefix * prefix
    incl = np.flip(np.flip(prod, -1).cumsum(axis=-1), -1)
    return incl / gates


def discumsum_vjp(
    values: np.ndarray, lambdas: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Backward of discumsum; returns (dvalues, dlambdas).

    ``lambdas`` follows the forward convention (n-1 transition decays,
    possibly broadcast against a values slice).
    """
    values = np.asarray(values)
    lambdas = np.asarray(lambdas)
    upstream = np.asarray(upstream)
    n = values.shape[0]
    fwd = discumsum(values, lambdas)
    dvalues = np.empty_like(values)
    dlambdas = np.zeros_like(lambdas, dtype=values.dtype)
    acc = upstream[n - 1]
    dvalues[n - 1] = acc
    for k in range(n - 2, -1, -1):
        dlambdas[k] = _sum_to_shape(fwd[k] * acc, dlambdas[k].shape)
        acc = upstream[k] + lambdas[k] * acc
        dvalues[k] = acc
    return dvalues, dlambdas


def _sum_to_shape(arr: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted result back to the target shape."""
    extra = arr.ndim - len(shape)
    if extra:
        arr = arr.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and arr.shape[i] != 1)
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    return arr


def query_state_vjp(
    state: ChunkState,
    q_chunk: np.ndarray,
    upstream: np.ndarray,
    y_attn: np.ndarray | None = None,
    zeta: np.ndarray | None = None,
    gates_prefix: np.ndarray | None = None,
    scale: float | None = None,
    normalize: bool = False,
) -> dict:
    """Backward of the public query_state.

    Returns a dict with d_state, d_key_sum, dq, dy_attn, dzeta,
    dgates_prefix (entries are None when the forward input was omitted).
    """
    q_chunk = np.asarray(q_chunk)
    upstream = np.asarray(upstream)
    c = q_chunk.shape[0]
    if scale is None:
        scale = 1.0 / np.sqrt(state.spec.d)
    q_scaled = scale * q_chunk
    phi = expand(q_scaled, state.spec)
    ys = phi @ state.s
    denom = phi @ state.key_sum
    gp = np.ones(c, dtype=ys.dtype) if gates_prefix is None else np.asarray(gates_prefix)
    carried = ys * gp[:, None]
    carried_denom = denom * gp
    numer = carried if y_attn is None else np.asarray(y_attn) + carried
    total = carried_denom if zeta is None else np.asarray(zeta) + carried_denom

    if normalize:
        out = numer / total[:, None]
        dnum = upstream / total[:, None]
        dtotal = -(upstream * out).sum(axis=-1) / total
    else:
        dnum = upstream
        dtotal = np.zeros(c, dtype=upstream.dtype)

    dy_attn = None if y_attn is None else dnum.copy()
    dzeta = None if zeta is None else dtotal.copy()
    dys = dnum * gp[:, None]
    ddenom = dtotal * gp
    dgp = None
    if gates_prefix is not None:
        dgp = (dnum * ys).sum(axis=-1) + dtotal * denom
    dphi = dys @ state.s.T + ddenom[:, None] * state.key_sum[None, :]
    d_state = phi.T @ dys
    d_key_sum = phi.T @ ddenom
    dq = scale * expand_vjp(q_scaled, dphi, state.spec)
    return {
        "d_state": d_state,
        "d_key_sum": d_key_sum,
        "dq": dq,
        "dy_attn": dy_attn,
        "dzeta": dzeta,
        "dgates_prefix": dgp,
    }


def vjp_chunked(
    batch: SequenceBatch,
    cfg: AttentionConfig,
    plan: ChunkPlan | None,
    upstream: np.ndarray,
) -> GradBundle:
    """d<upstream, Y>/d{q, k, v, gates} through the chunked pipeline."""
    out, trace = chunked_power_attention(batch, cfg, plan, _want_trace=True)
    upstream = np.asarray(upstream)
    if upstream.shape != out.y.shape:
        raise ShapeMismatch(f"upstream must match y {out.y.shape}, got {upstream.shape}")
    bounds = trace["bounds"]
    spec = cfg.expansion
    scale = trace["scale"]
    intra_cfg = trace["intra_cfg"]
    b, h = batch.b, batch.h
    streams = b * h
    n = len(bounds)
    gated = batch.gates is not None

    if cfg.normalize:
        dnum_full = upstream / out.rowsum[..., None]
        dden_full = -(upstream * out.y).sum(axis=-1) / out.rowsum
    else:
        dnum_full = upstream
        dden_full = np.zeros_like(out.rowsum)

    dq = np.zeros_like(batch.q, dtype=np.float64)
    dk = np.zeros_like(batch.k, dtype=np.float64)
    dv = np.zeros_like(batch.v, dtype=np.float64)
    dgates = np.zeros_like(batch.gates, dtype=np.float64) if gated else None

    acc, key_acc = trace["acc"], trace["key_acc"]
    d_acc = np.zeros_like(acc)
    d_key_acc = np.zeros_like(key_acc)

    def _streams(a):  # [b, c, h, x] -> [b*h, c, x]
        return np.swapaxes(a, 1, 2).reshape(streams, *a.shape[1:2], *a.shape[3:])

    def _gate_streams(g):  # [b, c, h] -> [b*h, c]
        return np.swapaxes(g, 1, 2).reshape(streams, -1)

    def _unstreams(a, c):  # [b*h, c, x] -> [b, c, h, x]
        return np.swapaxes(a.reshape(b, h, c, *a.shape[2:]), 1, 2)

    for k, (start, stop) in enumerate(bounds):
        c_k = stop - start
        dy_attn = dnum_full[:, start:stop]
        dzeta = dden_full[:, start:stop]
        if k > 0:
            q_k = _streams(scale * batch.q[:, start:stop])
            phi = expand(q_k, spec)
            ys = phi @ acc[k - 1]
            denom = (phi @ key_acc[k - 1][..., None])[..., 0]
            dcar = _streams(dy_attn)
            dcar_denom = np.swapaxes(dden_full[:, start:stop], 1, 2).reshape(streams, c_k)
            _, prefix = trace["gate_parts"][k]
            if prefix is not None:
                gp = prefix.reshape(streams, c_k)
                dys = dcar * gp[..., None]
                ddenom = dcar_denom * gp
                dgp = (dcar * ys).sum(axis=-1) + dcar_denom * denom
                dg = _gates_from_prefix_grad(dgp, gp, _gate_streams(batch.gates[:, start:stop]))
                dgates[:, start:stop] += np.swapaxes(dg.reshape(b, h, c_k), 1, 2)
            else:
                dys = dcar
                ddenom = dcar_denom
            dphi = dys @ np.swapaxes(acc[k - 1], -1, -2) + ddenom[..., None] * key_acc[k - 1][:, None, :]
            d_acc[k - 1] += np.swapaxes(phi, -1, -2) @ dys
            d_key_acc[k - 1] += (phi * ddenom[..., None]).sum(axis=1)
            dq[:, start:stop] += scale * _unstreams(expand_vjp(q_k, dphi, spec), c_k)

        sub = SequenceBatch(
            batch.q[:, start:stop],
            batch.k[:, start:stop],
            batch.v[:, start:stop],
            None if not gated else batch.gates[:, start:stop],
        )
        g = vjp_attention_form(sub, intra_cfg, dy_attn, upstream_rowsum=dzeta)
        dq[:, start:stop] += g.dq
        dk[:, start:stop] += g.dk
        dv[:, start:stop] += g.dv
        if gated and g.dgates is not None:
            dgates[:, start:stop] += g.dgates

    if n > 1:
        if gated:
            trans = np.stack([trace["lams"][k].reshape(streams) for k in range(1, n)])[..., None, None]
        else:
            trans = np.ones((n - 1, 1, 1, 1), dtype=acc.dtype)
        d_contribs, dtrans_s = discumsum_vjp(np.stack(trace["contribs"]), trans, d_acc)
        d_key_contribs, dtrans_k = discumsum_vjp(
            np.stack(trace["key_contribs"]), trans[..., 0], d_key_acc
        )
        dtrans = dtrans_s[..., 0, 0] + dtrans_k[..., 0]
    else:
        d_contribs = d_acc
        d_key_contribs = d_key_acc
        dtrans = None

    for k, (start, stop) in enumerate(bounds):
        c_k = stop - start
        suffix, _ = trace["gate_parts"][k]
        decay = None if suffix is None else suffix.reshape(streams, c_k)
        dk_s, dv_s, d_decay = _update_state_vjp_streams(
            _streams(batch.k[:, start:stop]),
            _streams(batch.v[:, start:stop]),
            decay,
            spec,
            d_contribs[k],
            d_key_contribs[k],
        )
        dk[:, start:stop] += _unstreams(dk_s, c_k)
        dv[:, start:stop] += _unstreams(dv_s, c_k)
        if gated:
            if k >= 1 and dtrans is not None:
                d_lam = dtrans[k - 1]
            else:
                d_lam = np.zeros(streams, dtype=np.float64)
            dg = _gates_from_suffix_grad(d_decay, decay, _gate_streams(batch.gates[:, start:stop]), d_lam)
            dgates[:, start:stop] += np.swapaxes(dg.reshape(b, h, c_k), 1, 2)

    return GradBundle(dq, dk, dv, dgates)


def finite_difference_oracle(f, inputs, upstream=None, step: float = 1e-4) -> list[np.ndarray]:
    """Central-difference estimate of d<upstream, f(inputs)>/d inputs.

    ``f`` maps the input arrays to an array or tuple of arrays;
    ``upstream`` matches the output structure (None means all-ones).
    Costs two forward evaluations per input element: a test tool, not a
    fast path.
    """
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]

    def contract(out):
        outs = out if isinstance(out, tuple) else (out,)
        if upstream is None:
            ups = (None,) * len(outs)
        else:
            ups = upstream if isinstance(upstream, tuple) else (upstream,)
        total = 0.0
        for o, u in zip(outs, ups):
            if upstream is not None and u is None:
                continue  # a None cotangent skips that output
            total += float(np.sum(o if u is None else o * u))
        return total

    grads = []
    for pos, a in enumerate(inputs):
        g = np.zeros_like(a)
        for j in range(a.size):
            plus = [x.copy() if i == pos else x for i, x in enumerate(inputs)]
            minus = [x.copy() if i == pos else x for i, x in enumerate(inputs)]
            plus[pos].flat[j] += step
            minus[pos].flat[j] -= step
            g.flat[j] = (contract(f(*plus)) - contract(f(*minus))) / (2.0 * step)
        grads.append(g)
    return grads
