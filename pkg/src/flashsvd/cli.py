"""``flashsvd`` command line: compress, verify, bench, plan."""
from __future__ import annotations

import argparse
import configparser
import csv
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import planner, verify
from .encoder import (EncoderLayer, LayerNormParams, densify, factorize_layers, load_config,
                      load_model, run_layer, save_model, synth_dense_layers, thread_cap)
from .errors import ConfigError, FlashSVDError, RankError
from .factorizer import attention_param_count, param_threshold
from .memtier import MemoryMeter, TilePlan

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

CSV_COLUMNS = ["b", "m", "h", "d_model", "d_ff", "rank", "mode", "peak_transient_bytes",
               "persistent_bytes", "flops_exact", "io_bytes_in", "wall_ms", "max_abs_err_vs_dense"]


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("list must not be empty")
    return vals


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _common(p: argparse.ArgumentParser, lists: bool = False) -> None:
    num = _int_list if lists else int
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out")
    p.add_argument("--config", help="plain-text 'key = value' file supplying flag defaults")
    p.add_argument("--tile-bm", type=int, default=16)
    p.add_argument("--tile-br", type=int, default=16)
    p.add_argument("--tile-bdf", type=int, default=32)
    p.add_argument("--sram-budget", type=int, default=131072)
    p.add_argument("--mode", type=_str_list if lists else str,
                   default=list(planner.MODES) if lists else "flash-v1")
    p.add_argument("--rank", type=num, default=[16] if lists else 16)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--groups", type=int)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--batch", type=num, default=[1] if lists else 1)
    p.add_argument("--seqlen", type=num, default=[64] if lists else 64)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flashsvd", description="Low-rank streaming encoder toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="factorize a dense model file or a synthetic model")
    _common(p)
    p.add_argument("--input", help="dense FSVD1 model (default: build a synthetic one)")
    p.add_argument("--factor-mode", choices=["single", "multi", "grouped"], default="multi")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("verify", help="run the property suites")
    _common(p)
    p.add_argument("--suite", action="append", default=None,
                   help=f"suite to run (repeatable): {', '.join(verify.SUITES)} or all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="sweep (B, M, r, mode) and write a CSV report")
    _common(p, lists=True)
    p.add_argument("--reps", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plan", help="closed-form thresholds, FLOPs, I/O and roofline bounds")
    _common(p)
    p.add_argument("--peak-flops", type=float, default=1e14)
    p.add_argument("--bandwidth", type=float, default=1e12, help="memory bandwidth beta in bytes/s")
    p.set_defaults(func=cmd_plan)
    return parser


def _plan_from(args) -> TilePlan:
    return TilePlan(args.tile_bm, args.tile_br, args.tile_bdf, args.sram_budget)


def _emit(lines, out_path=None) -> None:
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)


# -- compress ------------------------------------------------------------------------------

def _rel_err(w, approx) -> float:
    w = np.asarray(w, np.float64)
    return float(np.linalg.norm(w - np.asarray(approx, np.float64)) / max(np.linalg.norm(w), 1e-300))


def cmd_compress(args) -> int:
    if args.input:
        cfg = load_config(args.input)
        dense = load_model(args.input)
        if any(l.is_factorized for l in dense):
            raise ConfigError("input model is already factorized")
        seed = cfg.seed
    else:
        dense = synth_dense_layers(args.seed, args.layers, args.d_model, args.d_ff, args.heads)
        seed = args.seed
    if args.rank < 1:
        raise RankError(f"rank must be >= 1, got {args.rank}")
    layers = factorize_layers(dense, args.rank, args.factor_mode, args.groups)
    first = layers[0].attention
    d, h = first.d_model, first.heads
    groups = first.units if args.factor_mode == "grouped" else None
    bound = param_threshold(args.factor_mode, d, h, groups)
    per_matrix = attention_param_count(args.factor_mode, d, h, args.rank, groups)
    lines = [f"factor mode: {args.factor_mode}, rank {args.rank}, D_A={d}, H={h}"
             + (f", G={groups}" if groups else ""),
             f"q/k/v params per matrix: {per_matrix} vs dense {d * d} (ratio {per_matrix / (d * d):.4f})",
             f"parameter threshold: r < {bound} = {float(bound):.2f}",
             f"compresses: {'yes' if args.rank < bound else 'no'}"]
    for i, (src, fac) in enumerate(zip(dense, layers)):
        rec = densify(fac)
        errs = {
            "q": _rel_err(src.attention.wq, rec.attention.wq),
            "k": _rel_err(src.attention.wk, rec.attention.wk),
            "v": _rel_err(src.attention.wv, rec.attention.wv),
            "o": _rel_err(src.attention.wo, rec.attention.wo),
            "ffn.up": _rel_err(src.ffn.w_in, rec.ffn.w_in),
            "ffn.down": _rel_err(src.ffn.w_out, rec.ffn.w_out),
        }
        lines.append(f"layer {i} relative reconstruction error: "
                     + ", ".join(f"{k}={v:.4f}" for k, v in errs.items()))
    if args.out:
        save_model(args.out, layers, seed=seed, plan=_plan_from(args))
        lines.append(f"wrote {args.out}")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


# -- verify --------------------------------------------------------------------------------

def cmd_verify(args) -> int:
    names = []
    for s in args.suite or ["all"]:
        names += _str_list(s)
    results = verify.run_suites(names)
    lines = [f"[{'PASS' if r.ok else 'FAIL'}] {r.suite}.{r.name}: {r.detail}" for r in results]
    failed = sum(not r.ok for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} properties passed")
    _emit(lines, args.out)
    return EXIT_OK if failed == 0 else EXIT_VERIFY


# -- bench ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    batches: tuple
    seqlens: tuple
    ranks: tuple
    modes: tuple
    d_model: int
    d_ff: int
    heads: int
    groups: int | None
    plan: TilePlan
    seed: int = 42
    reps: int = 3

    def __post_init__(self):
        for name in ("batches", "seqlens", "ranks", "modes"):
            if not getattr(self, name):
                raise ConfigError(f"sweep list {name} must be nonempty")
        if self.reps < 1:
            raise ConfigError("repetitions must be >= 1")
        for m in self.modes:
            planner.normalize_mode(m)

    def points(self):
        return [(b, m, r) for b in self.batches for m in self.seqlens for r in self.ranks]


def _bench_layer(spec: SweepSpec, rank: int) -> EncoderLayer:
    rng = np.random.default_rng([spec.seed, rank])
    mode = "multi" if spec.groups is None else "grouped"
    fset = verify.random_attention_set(rng, spec.d_model, spec.heads, rank, mode, spec.groups)
    f = verify.random_ffn(rng, spec.d_model, spec.d_ff, rank)
    ln = LayerNormParams(np.ones(spec.d_model, np.float32), np.zeros(spec.d_model, np.float32))
    return EncoderLayer(fset, f, ln, ln)


def bench_point(spec: SweepSpec, b: int, m: int, r: int) -> list[dict]:
    layer = _bench_layer(spec, r)
    x = np.random.default_rng([spec.seed, b, m]).normal(size=(b, m, spec.d_model)).astype(np.float32)
    geom = planner.Geometry(b, m, spec.d_model, spec.d_ff, spec.heads, r, spec.groups)
    reference = run_layer(x, layer, "dense", spec.plan)
    rows = []
    for mode in (planner.normalize_mode(mo) for mo in spec.modes):
        times = []
        for _ in range(spec.reps):
            meter = MemoryMeter()
            t0 = time.perf_counter()
            out = run_layer(x, layer, mode, spec.plan, meter)
            times.append((time.perf_counter() - t0) * 1e3)
        io_in, _ = planner.io_bytes(geom, "dense" if mode == "dense" else "lowrank")
        rows.append({
            "b": b, "m": m, "h": spec.heads, "d_model": spec.d_model, "d_ff": spec.d_ff, "rank": r,
            "mode": mode, "peak_transient_bytes": meter.peak_transient_bytes,
            "persistent_bytes": meter.peak_persistent_bytes,
            "flops_exact": planner.flops_exact(geom, mode, spec.plan), "io_bytes_in": io_in,
            "wall_ms": f"{statistics.median(times):.3f}",
            "max_abs_err_vs_dense": f"{verify.max_abs(out, reference):.3e}",
        })
    return rows


def run_sweep(spec: SweepSpec) -> list[dict]:
    points = spec.points()
    workers = min(thread_cap(), len(points))
    if workers <= 1:
        chunks = [bench_point(spec, *p) for p in points]
    else:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(lambda p: bench_point(spec, *p), points))
    return [row for chunk in chunks for row in chunk]


def write_csv(rows, fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


def cmd_bench(args) -> int:
    spec = SweepSpec(tuple(args.batch), tuple(args.seqlen), tuple(args.rank), tuple(args.mode),
                     args.d_model, args.d_ff, args.heads, args.groups, _plan_from(args), args.seed, args.reps)
    rows = run_sweep(spec)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_csv(rows, fh)
        sys.stdout.write(f"wrote {len(rows)} rows to {args.out}\n")
    else:
        write_csv(rows, sys.stdout)
    return EXIT_OK


# -- plan ----------------------------------------------------------------------------------

def _frac(x) -> str:
    return f"{x} = {float(x):.4f}" if x.denominator != 1 else f"{x}"


def cmd_plan(args) -> int:
    geom = planner.Geometry(args.batch, args.seqlen, args.d_model, args.d_ff, args.heads, args.rank,
                            args.groups, args.layers)
    hw = planner.HardwareModel(args.peak_flops, args.bandwidth)
    plan = _plan_from(args)
    d, h = geom.d_model, geom.heads
    lines = [
        f"geometry: B={geom.batch} M={geom.seqlen} D_A={d} D_F={geom.d_ff} H={h} r={geom.rank}"
        + (f" G={geom.groups}" if geom.groups else "") + f" L={geom.layers}",
        f"param threshold multi-head: r < {float(param_threshold('multi', d, h)):.2f} ({param_threshold('multi', d, h)})",
        f"param threshold single-head: r < {float(param_threshold('single', d)):.2f} ({param_threshold('single', d)})",
        f"memory threshold single-head: r < {_frac(planner.memory_threshold(geom, 'single'))}",
        f"memory threshold multi-head: r < {_frac(planner.memory_threshold(geom, 'multi'))}",
    ]
    if geom.groups:
        lines.append(f"memory threshold grouped: r < {_frac(planner.memory_threshold(geom, 'grouped'))}")
    speed = planner.speedup_paper(d, geom.d_ff, geom.rank)
    lines.append(f"speedup (asymptotic FLOP ratio): {float(speed):.3f} ({speed})")
    for mode, io_mode in (("dense", "dense"), ("flash-v1", "lowrank")):
        flops = planner.flops_exact(geom, mode, plan)
        io_in, io_out = planner.io_bytes(geom, io_mode)
        t = planner.roofline_latency(flops, io_in + io_out, hw)
        lines.append(f"{mode}: flops_exact={flops} io_in={io_in} io_out={io_out} roofline={t:.3e} s")
    lines.append(f"decoder prefill bytes: {planner.decoder_memory(geom, 'prefill')}")
    lines.append(f"decoder decode step t=M bytes: {planner.decoder_memory(geom, 'decode', geom.seqlen)}")
    dom, ratio = planner.ffn_dominance_check(geom)
    lines.append(f"dense FFN dominates low-rank attention: {'yes' if dom else 'no'} (ratio {float(ratio):.3f})")
    _emit(lines, args.out)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------

def _apply_config(parser, args, argv):
    """Reparse with defaults taken from ``--config``; explicit flags still win."""
    if not getattr(args, "config", None):
        return args
    cp = configparser.ConfigParser()
    with open(args.config) as fh:
        cp.read_string("[flashsvd]\n" + fh.read())
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in cp["flashsvd"].items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise ConfigError(f"unknown config key {key!r}")
        action = known[dest]
        defaults[dest] = action.type(raw) if action.type else raw
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args = _apply_config(parser, args, argv)
        return args.func(args)
    except (FlashSVDError, ValueError, configparser.Error) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    except OSError as exc:
        sys.stderr.write(f"I/O error: {exc}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
