"""Acceptance suite: one test per criterion, each printing one PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. Every tolerance is pinned
here; runtime budgets are asserted alongside correctness.
"""

import contextlib
import json
import statistics
import time

import numpy as np
import pytest

from power_attention import (
    AttentionConfig,
    ChunkPlan,
    ExpansionKind,
    ExpansionSpec,
    Mechanism,
    SequenceBatch,
    chunked_power_attention,
    cli,
    discumsum,
    expand,
    finite_difference_oracle,
    power_attention_form,
    recurrent_power_attention,
    vjp_attention_form,
    vjp_chunked,
)
from power_attention.chunked import query_state, update_state
from power_attention.errors import InvalidSpec
from power_attention.expansions import expansion_dim
from power_attention.flops import ArchSpec, dense_transformer_params, state_flops, weight_flops, wsfr
from power_attention.gradients import (
    discumsum_vjp,
    expand_vjp,
    query_state_vjp,
    update_state_vjp,
)
from power_attention.chunked import ChunkState
from power_attention.inputs import generate_batch

from conftest import max_rel_error


@contextlib.contextmanager
def criterion(num: int, name: str, budget_s: float):
    t0 = time.monotonic()
    try:
        yield
    except Exception:
        print(f"\nACCEPTANCE {num} ({name}): FAIL after {time.monotonic() - t0:.2f}s")
        raise
    elapsed = time.monotonic() - t0
    verdict = "PASS" if elapsed <= budget_s else "FAIL (over runtime budget)"
    print(f"\nACCEPTANCE {num} ({name}): {verdict} in {elapsed:.2f}s (budget {budget_s:g}s)")
    assert elapsed <= budget_s, f"runtime {elapsed:.2f}s exceeds budget {budget_s:g}s"


def test_criterion_1_dimension_table(capsys):
    with criterion(1, "expansion dimension table", 1.0):
        rc = cli.main(["dim", "--d", "64", "--p", "2..6", "--format", "json"])
        out = capsys.readouterr().out
        assert rc == 0
        rows = [json.loads(line) for line in out.strip().splitlines()]
        assert [r["tpow"] for r in rows] == [
            4096, 262144, 16777216, 1073741824, 68719476736,
        ]
        assert [r["spow"] for r in rows] == [2080, 45760, 766480, 10424128, 119877472]
        assert [r["savings"] for r in rows] == ["49%", "82%", "95%", "99%", "99.8%"]


def test_criterion_2_inner_product_identity():
    with criterion(2, "inner-product identity, 1000 random draws", 10.0):
        rng = np.random.default_rng(20240601)
        kinds = list(ExpansionKind)
        for trial in range(1000):
            d = int(rng.integers(2, 17))
            p = int(rng.integers(1, 5))
            kind = kinds[int(rng.integers(0, 3))]
            if kind is ExpansionKind.TSPOW:
                divisors = [m for m in range(1, d + 1) if d % m == 0]
                spec = ExpansionSpec.tspow(p, d, divisors[int(rng.integers(0, len(divisors)))])
            else:
                spec = ExpansionSpec(kind, p, d)
            x = rng.uniform(-1.0, 1.0, d)
            y = rng.uniform(-1.0, 1.0, d)
            got = float(expand(x, spec) @ expand(y, spec))
            want = float(np.dot(x, y) ** p)
            assert abs(got - want) <= 1e-9 * max(1.0, abs(want)), (trial, spec)


def test_criterion_3_three_form_equivalence():
    with criterion(3, "three-form equivalence over the full grid", 60.0):
        tol = 1e-8
        chunk_sizes = (1, 3, 7, 16, 64, 100)
        b, h, d, v = 1, 2, 4, 3
        for p in (2, 4):
            for gated in (False, True):
                for norm in (False, True):
                    cfg = AttentionConfig.power(ExpansionSpec.spow(p, d), normalize=norm)
                    seed = p * 1000 + gated * 100 + norm * 10
                    batch = generate_batch(b, 64, h, d, v, seed=seed, gating=gated)
                    att = power_attention_form(batch, cfg)
                    rec = recurrent_power_attention(batch, cfg)
                    # per-row agreement covers every prefix length at once
                    assert max_rel_error(att.y, rec.y) <= tol
                    for t in range(1, 65):
                        prefix = SequenceBatch(
                            batch.q[:, :t],
                            batch.k[:, :t],
                            batch.v[:, :t],
                            None if batch.gates is None else batch.gates[:, :t],
                        )
                        ref = att.y[:, :t]
                        for c in chunk_sizes:
                            chk = chunked_power_attention(prefix, cfg, ChunkPlan(t, c))
                            err = max_rel_error(chk.y, ref)
                            assert err <= tol, (p, gated, norm, t, c, err)


def _grad_instance_sizes(rng):
    t = int(rng.integers(2, 17))
    d = int(rng.integers(2, 5))
    v = int(rng.integers(2, 5))
    p = int(rng.choice([2, 4]))
    return t, d, v, p


def test_criterion_4_gradient_checks():
    with criterion(4, "gradient checks, >=20 instances per op", 120.0):
        tol, step, n_inst = 1e-5, 1e-4, 20

        # expand: all three kinds
        rng = np.random.default_rng(41)
        for i in range(n_inst):
            d = int(rng.integers(2, 5))
            p = int(rng.choice([2, 4]))
            kind = list(ExpansionKind)[i % 3]
            tile = ([m for m in range(1, d + 1) if d % m == 0][-2] if kind is ExpansionKind.TSPOW and d > 1 else None)
            spec = ExpansionSpec(kind, p, d, tile)
            x = rng.uniform(-1, 1, (3, d))
            up = rng.uniform(-1, 1, (3, expansion_dim(spec)))
            got = expand_vjp(x, up, spec)
            want = finite_difference_oracle(lambda a: expand(a, spec), [x], up, step=step)[0]
            assert max_rel_error(got, want) <= tol, ("expand", i)

        # attention form: cycle mechanisms and settings
        rng = np.random.default_rng(42)
        for i in range(n_inst):
            t, d, v, p = _grad_instance_sizes(rng)
            mech = ("power", "exp", "window", "linear")[i % 4]
            norm = bool(i % 2)
            spec = ExpansionSpec.spow(p, d)
            cfg = {
                "power": lambda: AttentionConfig.power(spec, normalize=norm),
                "exp": lambda: AttentionConfig.exp(normalize=norm),
                "window": lambda: AttentionConfig.windowed(max(2, t // 2), normalize=norm),
                "linear": lambda: AttentionConfig.linear(spec, normalize=False),
            }[mech]()
            batch = generate_batch(1, t, 1, d, v, seed=100 + i, gating=True)
            up = rng.uniform(-1, 1, batch.v.shape)
            got = vjp_attention_form(batch, cfg, up)

            from power_attention import attention

            def f(q, k, vv, g):
                return attention(SequenceBatch(q, k, vv, g), cfg).y

            fd = finite_difference_oracle(f, [batch.q, batch.k, batch.v, batch.gates], up, step=step)
            for a, bb in zip((got.dq, got.dk, got.dv, got.dgates), fd):
                assert max_rel_error(a, bb) <= tol, ("attention", mech, i)

        # update_state
        rng = np.random.default_rng(43)
        for i in range(n_inst):
            t, d, v, p = _grad_instance_sizes(rng)
            spec = ExpansionSpec.spow(p, d)
            dim = expansion_dim(spec)
            k = rng.uniform(-1, 1, (t, d))
            vv = rng.uniform(-1, 1, (t, v))
            g = rng.uniform(0.3, 1.0, t)
            ds, dkeys, dlam = rng.uniform(-1, 1, (dim, v)), rng.uniform(-1, 1, dim), float(rng.uniform(-1, 1))

            def f(kk, vvv, gg):
                st, lam = update_state(spec, kk, vvv, gg)
                return st.s, st.key_sum, np.asarray(lam)

            fd = finite_difference_oracle(f, [k, vv, g], (ds, dkeys, np.asarray(dlam)), step=step)
            got = update_state_vjp(spec, k, vv, g, ds, dkeys, dlam)
            for a, bb in zip(got, fd):
                assert max_rel_error(a, bb) <= tol, ("update_state", i)

        # discumsum
        rng = np.random.default_rng(44)
        for i in range(n_inst):
            n = int(rng.integers(2, 7))
            vals = rng.normal(size=(n, 3, 2))
            lams = rng.uniform(0.05, 0.95, n - 1)
            up = rng.normal(size=vals.shape)
            dvals, dlams = discumsum_vjp(vals, lams, up)
            fd = finite_difference_oracle(lambda a, l: discumsum(a, l), [vals, lams], up, step=step)
            assert max_rel_error(dvals, fd[0]) <= tol, ("discumsum", i)
            assert max_rel_error(dlams, fd[1]) <= tol, ("discumsum-lam", i)

        # query_state
        rng = np.random.default_rng(45)
        for i in range(n_inst):
            t, d, v, p = _grad_instance_sizes(rng)
            spec = ExpansionSpec.spow(p, d)
            dim = expansion_dim(spec)
            state = ChunkState(rng.uniform(-1, 1, (dim, v)), rng.uniform(0.3, 1.0, dim), spec)
            q = rng.uniform(-1, 1, (t, d))
            y_attn = rng.uniform(-1, 1, (t, v))
            zeta = rng.uniform(0.5, 1.5, t)
            gp = rng.uniform(0.4, 1.0, t)
            norm = bool(i % 2)
            up = rng.uniform(-1, 1, (t, v))
            got = query_state_vjp(state, q, up, y_attn, zeta, gp, normalize=norm)

            def f(ss, keys, qq, yy, zz, gg):
                return query_state(ChunkState(ss, keys, spec), qq, yy, zz, gg, normalize=norm)

            fd = finite_difference_oracle(f, [state.s, state.key_sum, q, y_attn, zeta, gp], up, step=step)
            names = ("d_state", "d_key_sum", "dq", "dy_attn", "dzeta", "dgates_prefix")
            for name, bb in zip(names, fd):
                assert max_rel_error(got[name], bb) <= tol, ("query_state", name, i)

        # chunked pipeline end to end
        rng = np.random.default_rng(46)
        for i in range(n_inst):
            t = int(rng.integers(2, 11))
            d, v = 3, 2
            p = int(rng.choice([2, 4]))
            c = int(rng.choice([1, 2, 3, 5, 100]))
            gated = bool(i % 2)
            norm = bool((i // 2) % 2)
            cfg = AttentionConfig.power(ExpansionSpec.spow(p, d), normalize=norm)
            plan = ChunkPlan(t, c)
            batch = generate_batch(1, t, 1, d, v, seed=200 + i, gating=gated)
            up = rng.uniform(-1, 1, batch.v.shape)
            got = vjp_chunked(batch, cfg, plan, up)

            def f(q, k, vv, *g):
                return chunked_power_attention(SequenceBatch(q, k, vv, g[0] if g else None), cfg, plan).y

            ins = [batch.q, batch.k, batch.v] + ([batch.gates] if gated else [])
            fd = finite_difference_oracle(f, ins, up, step=step)
            parts = [got.dq, got.dk, got.dv] + ([got.dgates] if gated else [])
            for a, bb in zip(parts, fd):
                assert max_rel_error(a, bb) <= tol, ("chunked", i, c)


def test_criterion_5_log_space_agreement():
    with criterion(5, "log-space scoring agreement", 10.0):
        tol = 1e-6
        rng = np.random.default_rng(51)
        checked = 0
        for trial in range(60):
            t = int(rng.integers(2, 13))
            d = int(rng.integers(2, 6))
            v = int(rng.integers(2, 4))
            p = int(rng.choice([2, 4]))
            q = rng.uniform(-1.5, 1.5, (1, t, 1, d))
            k = rng.uniform(-1.5, 1.5, (1, t, 1, d))
            scale = 1.0 / np.sqrt(d)
            scores = np.einsum("bthd,bshd->bths", scale * q, k)
            if np.abs(scores).min() < 1e-3:
                continue  # the criterion only constrains well-separated scores
            vv = rng.uniform(-1, 1, (1, t, 1, v))
            gates = rng.uniform(0.9, 1.0, (1, t, 1)) if trial % 2 else None
            batch = SequenceBatch(q, k, vv, gates)
            norm = bool(trial % 3 == 0)
            spec = ExpansionSpec.spow(p, d)
            direct = power_attention_form(batch, AttentionConfig.power(spec, normalize=norm))
            stable = power_attention_form(
                batch, AttentionConfig.power(spec, normalize=norm, use_log_space=True)
            )
            assert max_rel_error(direct.y, stable.y) <= tol, trial
            assert max_rel_error(direct.rowsum, stable.rowsum) <= tol, trial
            checked += 1
        assert checked >= 20


def test_criterion_6_wsfr_qualitative():
    with criterion(6, "WSFR qualitative reproduction", 1.0):
        params = dense_transformer_params(768, 12)

        def arch(mech, t, **kw):
            return ArchSpec(
                n_params=params, n_layers=12, n_heads=12, head_dim=64,
                context=t, mechanism=mech, **kw,
            )

        # (a) exponential attention: exactly one weight->state crossing in [2048, 32768]
        ts = np.unique(np.logspace(3, 6, 400).astype(int))
        diffs = [
            weight_flops(arch(Mechanism.EXP, int(t))) - state_flops(arch(Mechanism.EXP, int(t)))
            for t in ts
        ]
        crossings = [
            int(ts[i + 1]) for i in range(len(diffs) - 1) if diffs[i] > 0 >= diffs[i + 1]
        ]
        assert diffs[0] > 0 and diffs[-1] < 0
        assert len(crossings) == 1
        assert 2048 <= crossings[0] <= 32768

        # (b) linear attention WSFR is exactly t-independent
        spec = ExpansionSpec.spow(1, 64)
        reports = [
            wsfr(arch(Mechanism.LINEAR, t, expansion=spec)).wsfr
            for t in (1024, 8192, 65536, 1_000_000)
        ]
        assert len(set(reports)) == 1

        # (c) window-8192 WSFR at 65536 and 1e6 equals its t = 8192 value
        ref = wsfr(arch(Mechanism.WINDOW, 8192, window=8192)).wsfr
        for t in (65536, 1_000_000):
            assert wsfr(arch(Mechanism.WINDOW, t, window=8192)).wsfr == ref


def _median_time(fn, repeats=5, warmup=1):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return statistics.median(times)


def test_criterion_7_throughput_shape():
    with criterion(7, "throughput shape (CPU desk scale)", 300.0):
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:  # pragma: no cover
            threadpool_limits = lambda limits: contextlib.nullcontext()
        d = v = 32
        b = h = 2
        spec = ExpansionSpec.spow(2, d)
        cfg = AttentionConfig.power(spec)
        with threadpool_limits(limits=1):
            # chunked tokens/sec approximately constant in t at fixed c
            chunked_rates = []
            for t in (512, 1024, 2048, 4096):
                batch = generate_batch(b, t, h, d, v, seed=7)
                ns = _median_time(lambda: chunked_power_attention(batch, cfg, ChunkPlan(t, 64)))
                chunked_rates.append(b * t / (ns * 1e-9))
            mid = statistics.median(chunked_rates)
            assert min(chunked_rates) >= 0.75 * mid, chunked_rates
            assert max(chunked_rates) <= 1.25 * mid, chunked_rates

            # attention form decays: largest-t rate <= half the smallest-t rate
            attention_rates = {}
            for t in (512, 1024, 2048):
                batch = generate_batch(b, t, h, d, v, seed=7)
                ns = _median_time(lambda: power_attention_form(batch, cfg), repeats=3)
                attention_rates[t] = b * t / (ns * 1e-9)
            assert attention_rates[2048] <= 0.5 * attention_rates[512], attention_rates

            # total chunked time is unimodal in c
            t = 4096
            batch = generate_batch(b, t, h, d, v, seed=7)
            totals = []
            for c in (4, 16, 128, 1024, 4096):
                ns = _median_time(
                    lambda: chunked_power_attention(batch, cfg, ChunkPlan(t, c)), repeats=3
                )
                totals.append(ns)
            k_min = totals.index(min(totals))
            assert all(totals[i] > totals[i + 1] for i in range(k_min)), totals
            assert all(totals[i] < totals[i + 1] for i in range(k_min, len(totals) - 1)), totals


def test_criterion_8_discumsum_bit_exact():
    with criterion(8, "discumsum bit-exact vs naive loop", 5.0):
        rng = np.random.default_rng(88)
        for trial in range(100):
            n = int(rng.integers(1, 9))
            shape = (n, int(rng.integers(1, 6)), int(rng.integers(1, 5)))
            vals = rng.normal(size=shape)
            lams = rng.uniform(0.0, 1.0, max(n - 1, 0))
            if n > 1 and trial % 5 == 0:
                lams[int(rng.integers(0, n - 1))] = float(rng.integers(0, 2))  # exact 0 or 1
            got = discumsum(vals, lams)
            expect = np.empty_like(vals)
            for idx in np.ndindex(shape[1:]):
                expect[(0, *idx)] = vals[(0, *idx)]
                for k in range(1, n):
                    expect[(k, *idx)] = lams[k - 1] * expect[(k - 1, *idx)] + vals[(k, *idx)]
            assert (got == expect).all(), trial
