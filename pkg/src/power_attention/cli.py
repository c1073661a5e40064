"""Command-line front end.

Subcommands: dim (expansion dimension tables), check (equivalence and
gradient self-checks), bench (throughput sweeps with per-operation
breakdowns), flops (WSFR reports), equiv (one-shot three-form
comparison). Every emitted number is computable by library calls alone;
the CLI only formats.

Exit codes: 0 pass, 1 check failure, 2 usage/config error, 3 resource
limit.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import statistics
import sys
import time

import numpy as np

from .attention import AttentionConfig, Mechanism, power_attention_form
from .checks import max_abs_error, max_rel_error, run_check_suite
from .chunked import ChunkPlan, chunked_power_attention, recurrent_power_attention
from .errors import InvalidSpec, PowerAttentionError, StateTooLarge
from .expansions import ExpansionKind, ExpansionSpec, expansion_dim
from .flops import (
    ArchSpec,
    FlopReport,
    count_flops_attention,
    count_flops_chunked,
    dense_transformer_params,
    wsfr,
)
from .inputs import generate_batch
from .kernels import resolve_backend

DTYPES = {"f32": np.float32, "f64": np.float64}


def _parse_int(text: str) -> int:
    text = text.strip()
    if "e" in text.lower() or "." in text:
        value = float(text)
        if value != int(value):
            raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
        return int(value)
    return int(text)


def int_list(text: str) -> list[int]:
    """Comma lists and inclusive ranges: '1024,8192', '2..6', '1e6'."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..", 1)
            out.extend(range(_parse_int(lo), _parse_int(hi) + 1))
        else:
            out.append(_parse_int(part))
    return out


@contextlib.contextmanager
def _open_out(path: str | None):
    """Write target; stdout is yielded un-closed."""
    if path:
        with open(path, "w") as handle:
            yield handle
    else:
        yield sys.stdout


def _emit_rows(rows: list[dict], fmt: str, stream) -> None:
    if fmt == "json":
        for row in rows:
            stream.write(json.dumps(row) + "\n")
    elif fmt == "csv":
        if rows:
            cols = list(rows[0].keys())
            stream.write(",".join(cols) + "\n")
            for row in rows:
                stream.write(",".join(str(row.get(c, "")) for c in cols) + "\n")
    else:
        if rows:
            cols = list(rows[0].keys())
            widths = [max(len(c), max(len(str(r.get(c, ""))) for r in rows)) for c in cols]
            stream.write("  ".join(c.ljust(w) for c, w in zip(cols, widths)) + "\n")
            for row in rows:
                stream.write(
                    "  ".join(str(row.get(c, "")).ljust(w) for c, w in zip(cols, widths)) + "\n"
                )


def savings_label(tpow_dim: int, spow_dim: int) -> str:
    """Percent saved by spow over tpow, truncated (never overstated).

    Shown to one truncated decimal only when integer rounding would reach
    100%, so near-total savings stay distinguishable.
    """
    pct = 100.0 * (1.0 - spow_dim / tpow_dim)
    if round(pct) >= 100:
        return f"{int(pct * 10) / 10:g}%"
    return f"{int(pct):d}%"


def cmd_dim(args) -> int:
    rows = []
    for d in args.d:
        for p in args.p:
            tpow_dim = expansion_dim(ExpansionSpec.tpow(p, d))
            spow_dim = expansion_dim(ExpansionSpec.spow(p, d))
            row = {
                "d": d,
                "p": p,
                "tpow": tpow_dim,
                "spow": spow_dim,
                "savings": savings_label(tpow_dim, spow_dim),
            }
            if args.dtile is not None:
                row["tspow"] = expansion_dim(ExpansionSpec.tspow(p, d, args.dtile))
            rows.append(row)
    with _open_out(args.out) as stream:
        _emit_rows(rows, args.format, stream)
    return 0


def _validate_positive(name: str, values) -> None:
    for v in values:
        if v < 1:
            raise InvalidSpec(f"--{name} entries must be >= 1, got {v}")


def cmd_check(args) -> int:
    _validate_positive("t", args.t)
    _validate_positive("chunk", args.chunk)
    _validate_positive("p", args.p)
    normalize = (True,) if args.normalize else (False, True)
    gating = (True,) if args.gating else (False, True)
    if args.normalize:
        # fail fast: explicitly requested normalization needs even degrees
        for p in args.p:
            AttentionConfig.power(ExpansionSpec.spow(p, args.d), normalize=True)
    failed_seeds = []
    with _open_out(args.out) as stream:
        for record in run_check_suite(
            t_values=tuple(args.t),
            chunk_sizes=tuple(args.chunk),
            p_values=tuple(args.p),
            d=args.d,
            v_dim=args.v,
            seed=args.seed,
            dtype=DTYPES[args.dtype],
            gating=gating,
            normalize=normalize,
        ):
            stream.write(json.dumps(record) + "\n")
            if not record["passed"]:
                failed_seeds.append(record.get("seed"))
    if failed_seeds:
        print(f"FAILED: reproduce with seeds {sorted(set(failed_seeds))}", file=sys.stderr)
        return 1
    return 0


def _bench_flop_report(form: str, t: int, h: int, v_dim: int, spec, plan) -> FlopReport:
    """Counted FLOPs for one bench config; no parameters, so weight side is 0."""
    if form == "attention":
        macs = count_flops_attention(t, spec.d, v_dim, spec.p)
    else:
        macs = count_flops_chunked(plan if form == "chunked" else ChunkPlan(t, 1), spec, v_dim)
    per_token = {k: 2.0 * v * h / t for k, v in macs.items() if k != "total"}
    total = 2.0 * macs["total"] * h / t
    return FlopReport(0.0, total, (0.0, 1.0), per_token)


def run_bench_config(
    form: str,
    t: int,
    chunk: int,
    spec: ExpansionSpec,
    b: int,
    h: int,
    v_dim: int,
    dtype,
    seed: int,
    repeats: int,
    warmup: int,
    normalize: bool,
    gating: bool,
    scale: float | None,
    backend: str | None,
) -> dict:
    """One bench configuration -> result dict.

    tokens_per_sec uses the median measured run (b*t tokens / median
    seconds); wall_ns_total and per_op_ns accumulate over every measured
    run, so per-op times sum to at most the total. The checksum is the
    output sum, for cross-run and cross-form sanity.
    """
    batch = generate_batch(b, t, h, spec.d, v_dim, seed=seed, dtype=dtype, gating=gating)
    cfg = AttentionConfig.power(spec, normalize=normalize, scale=scale)
    plan = ChunkPlan(t, chunk)

    def run(op_timer=None):
        if form == "attention":
            return power_attention_form(batch, cfg)
        if form == "recurrent":
            return recurrent_power_attention(batch, cfg)
        return chunked_power_attention(batch, cfg, plan, backend=backend, op_timer=op_timer)

    for _ in range(warmup):
        out = run()
    per_op: dict[str, int] = {}
    runs = []
    clock = time.perf_counter_ns
    for _ in range(repeats):
        t0 = clock()
        out = run(op_timer=per_op if form == "chunked" else None)
        runs.append(clock() - t0)
    median_ns = statistics.median(runs)
    if form != "chunked":
        per_op = {form: sum(runs)}
    config = {
        "form": form,
        "kind": spec.kind.value,
        "p": spec.p,
        "d": spec.d,
        "d_tile": spec.d_tile,
        "v": v_dim,
        "b": b,
        "t": t,
        "h": h,
        "chunk": chunk,
        "dtype": "f32" if dtype == np.float32 else "f64",
        "seed": seed,
        "repeats": repeats,
        "warmup": warmup,
        "normalize": normalize,
        "gating": gating,
        "backend": resolve_backend(backend) if form != "attention" else None,
    }
    return {
        "config": config,
        "tokens_per_sec": b * t / (median_ns * 1e-9),
        "wall_ns_total": sum(runs),
        "per_op_ns": per_op,
        "flops": _bench_flop_report(form, t, h, v_dim, spec, plan).to_dict(),
        "checksum": float(np.sum(out.y, dtype=np.float64)),
    }


def _thread_limiter(threads: int | None):
    """Single-threaded BLAS by default; --threads opts into more."""
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1 if threads is None else threads)
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()


def cmd_bench(args) -> int:
    _validate_positive("t", args.t)
    _validate_positive("chunk", args.chunk)
    spec = ExpansionSpec(ExpansionKind(args.kind), args.p, args.d, args.dtile)
    expansion_dim(spec)  # fail fast on invalid specs
    rows = []
    with _thread_limiter(args.threads):
        for form in args.form:
            for t in args.t:
                for chunk in args.chunk:
                    rows.append(
                        run_bench_config(
                            form=form,
                            t=t,
                            chunk=chunk,
                            spec=spec,
                            b=args.batch,
                            h=args.heads,
                            v_dim=args.v,
                            dtype=DTYPES[args.dtype],
                            seed=args.seed,
                            repeats=args.repeats,
                            warmup=args.warmup,
                            normalize=args.normalize,
                            gating=args.gating,
                            scale=args.scale,
                            backend=args.backend,
                        )
                    )
    with _open_out(args.out) as stream:
        for row in rows:
            stream.write(json.dumps(row) + "\n")
    return 0


def cmd_flops(args) -> int:
    n_params = args.params
    if n_params is None:
        n_params = dense_transformer_params(args.width, args.layers)
    rows = []
    for mechanism in args.mechanism:
        mech = Mechanism(mechanism)
        expansion = None
        if mech in (Mechanism.LINEAR, Mechanism.POWER):
            expansion = ExpansionSpec(ExpansionKind(args.kind), args.p, args.d, args.dtile)
        for t in args.t:
            arch = ArchSpec(
                n_params=n_params,
                n_layers=args.layers,
                n_heads=args.heads,
                head_dim=args.d,
                context=t,
                value_dim=args.v,
                mechanism=mech,
                window=args.window,
                expansion=expansion,
                chunk_size=args.chunk[0] if args.chunk else None,
            )
            report = wsfr(arch)
            rows.append(
                {
                    "mechanism": mech.value,
                    "context": t,
                    "ratio": report.ratio_label(),
                    **report.to_dict(),
                }
            )
    with _open_out(args.out) as stream:
        if args.format == "table":
            flat = [
                {
                    "mechanism": r["mechanism"],
                    "context": r["context"],
                    "weight_flops_per_token": f"{r['weight_flops_per_token']:.4g}",
                    "state_flops_per_token": f"{r['state_flops_per_token']:.4g}",
                    "wsfr": r["ratio"],
                }
                for r in rows
            ]
            _emit_rows(flat, "table", stream)
        else:
            _emit_rows(rows, args.format, stream)
    return 0


def cmd_equiv(args) -> int:
    t = args.t[0]
    chunk = args.chunk[0]
    spec = ExpansionSpec(ExpansionKind(args.kind), args.p, args.d, args.dtile)
    cfg = AttentionConfig.power(spec, normalize=args.normalize, scale=args.scale)
    batch = generate_batch(
        args.batch, t, args.heads, args.d, args.v,
        seed=args.seed, dtype=DTYPES[args.dtype], gating=args.gating,
    )
    att = power_attention_form(batch, cfg)
    rec = recurrent_power_attention(batch, cfg)
    chk = chunked_power_attention(batch, cfg, ChunkPlan(t, chunk), backend=args.backend)
    rows = [
        {
            "pair": "recurrent_vs_attention",
            "max_abs_err": max_abs_error(rec.y, att.y),
            "max_rel_err": max_rel_error(rec.y, att.y),
        },
        {
            "pair": "chunked_vs_attention",
            "max_abs_err": max_abs_error(chk.y, att.y),
            "max_rel_err": max_rel_error(chk.y, att.y),
        },
    ]
    with _open_out(args.out) as stream:
        _emit_rows(rows, args.format, stream)
    return 0


def _add_shared(parser: argparse.ArgumentParser, **defaults) -> None:
    """Shared flags; per-subcommand defaults are passed in (argparse parents
    share action objects, so mutating defaults there would leak between
    subcommands)."""

    def dflt(name, standard):
        return defaults.get(name, standard)

    parser.add_argument("--p", type=int_list, default=dflt("p", [2]),
                        help="power degree(s), e.g. 2 or 2..6")
    parser.add_argument("--d", type=int_list, default=dflt("d", [64]), help="head dimension(s)")
    parser.add_argument("--v", type=int, default=dflt("v", None),
                        help="value dimension (default: d)")
    parser.add_argument("--dtile", type=int, default=None, help="tspow tile edge")
    parser.add_argument("--kind", choices=[k.value for k in ExpansionKind], default="spow")
    parser.add_argument("--t", type=int_list, default=dflt("t", [1024]),
                        help="context length(s), e.g. 1024,8192 or 1e6")
    parser.add_argument("--chunk", type=int_list, default=dflt("chunk", [64]),
                        help="chunk size(s)")
    parser.add_argument("--heads", type=int, default=dflt("heads", 1))
    parser.add_argument("--batch", type=int, default=1)
    parser.add_argument("--dtype", choices=list(DTYPES), default="f64")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--normalize", action="store_true")
    parser.add_argument("--gating", action="store_true")
    parser.add_argument("--scale", type=float, default=None)
    parser.add_argument("--format", choices=["table", "json", "csv"],
                        default=dflt("format", "table"))
    parser.add_argument("--out", default=None, help="output file (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="power-attention",
        description="Power attention reference implementation: tables, checks, benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_dim = sub.add_parser("dim", help="expansion dimension tables")
    _add_shared(p_dim, p=[2, 3, 4, 5, 6])
    p_dim.set_defaults(func=cmd_dim)

    p_check = sub.add_parser("check", help="equivalence and gradient checks")
    _add_shared(p_check, format="json", p=[2, 4], d=[4], v=3,
                t=[1, 3, 8, 16, 33], chunk=[1, 3, 7, 16])
    p_check.set_defaults(func=cmd_check)

    p_bench = sub.add_parser("bench", help="throughput sweeps (JSON lines)")
    _add_shared(p_bench, d=[16], v=16, t=[1024, 2048, 4096], chunk=[64])
    p_bench.add_argument("--form", type=lambda s: s.split(","), default=["attention", "chunked"])
    p_bench.add_argument("--repeats", type=int, default=3)
    p_bench.add_argument("--warmup", type=int, default=1)
    p_bench.add_argument("--backend", choices=["auto", "compiled", "python"], default=None)
    p_bench.add_argument("--threads", type=int, default=None)
    p_bench.set_defaults(func=cmd_bench)

    p_flops = sub.add_parser("flops", help="WSFR reports")
    _add_shared(p_flops, heads=12, t=[1024, 8192, 65536, 1000000], chunk=[])
    p_flops.add_argument(
        "--mechanism", type=lambda s: s.split(","), default=["exp", "window", "linear"]
    )
    p_flops.add_argument("--window", type=int, default=8192)
    p_flops.add_argument("--layers", type=int, default=12)
    p_flops.add_argument("--width", type=int, default=768)
    p_flops.add_argument("--params", type=int, default=None,
                         help="non-embedding params (overrides --width)")
    p_flops.set_defaults(func=cmd_flops)

    p_equiv = sub.add_parser("equiv", help="one-shot three-form comparison")
    _add_shared(p_equiv, d=[8], v=8, t=[128], chunk=[16])
    p_equiv.add_argument("--backend", choices=["auto", "compiled", "python"], default=None)
    p_equiv.set_defaults(func=cmd_equiv)
    return parser


def _normalize_args(args) -> None:
    # scalar flags that reuse the list-typed shared options
    if isinstance(args.d, list):
        if args.command != "dim" and len(args.d) != 1:
            raise InvalidSpec(f"{args.command} takes a single --d, got {args.d}")
        if args.command != "dim":
            args.d = args.d[0]
    if isinstance(getattr(args, "p", None), list) and args.command in ("bench", "flops", "equiv"):
        if len(args.p) != 1:
            raise InvalidSpec(f"{args.command} takes a single --p, got {args.p}")
        args.p = args.p[0]
    if getattr(args, "v", None) is None:
        args.v = args.d if isinstance(args.d, int) else args.d[0]
    for name, needed in (("t", ("equiv",)), ("chunk", ("equiv",))):
        vals = getattr(args, name, None)
        if args.command in needed and isinstance(vals, list) and len(vals) != 1:
            raise InvalidSpec(f"{args.command} takes a single --{name}, got {vals}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _normalize_args(args)
        return args.func(args)
    except StateTooLarge as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (PowerAttentionError, OverflowError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
