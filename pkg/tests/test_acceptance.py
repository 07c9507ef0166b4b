"""Acceptance criteria 1-11; each test records one ``[PASS]/[FAIL] criterion N`` line."""
import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from flashsvd import attention as attn
from flashsvd import ffn as F
from flashsvd import memtier, planner
from flashsvd.encoder import load_model, run_layer, save_model, synth_model
from flashsvd.factorizer import factorize_linear, param_threshold, rank_loss_for_budget
from flashsvd.memtier import MemoryMeter, TilePlan
from flashsvd.planner import Geometry
from flashsvd.verify import (attention_reference, check_crossover, ffn_reference, max_abs, meter_dense_attention,
                             meter_ffn, meter_flash_attention, random_attention_set, random_ffn)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_criterion_01_threshold_table():
    multi = param_threshold("multi", 768, 12)
    single = param_threshold("single", 768)
    ok = multi == Fraction(768, 13) and single == 384 and round(float(multi), 2) == 59.08
    record(1, ok, f"multi-head r < {multi} = {float(multi):.2f}, single-head r < {single}")


def test_criterion_02_budget_rank_loss():
    single = rank_loss_for_budget(768, 12, 1_500_000, "single")
    multi = rank_loss_for_budget(768, 12, 1_500_000, "multi")
    ok = abs(single - 0.56) <= 0.05 and abs(multi - 0.19) <= 0.05
    record(2, ok, f"rank loss at 1.5M q/k/v params: single {single:.3f} (target 0.56), "
                  f"multi {multi:.3f} (target 0.19), tol 0.05")


def test_criterion_03_eckart_young():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        w = rng.normal(size=(8, 8))
        s = np.linalg.svd(w, compute_uv=False)  # independent oracle for the tail energy
        total = float(np.sum(s ** 2))
        for r in range(1, 9):
            f = factorize_linear(w, np.zeros(8), r, dtype=np.float64)
            err = float(np.sum((w - f.u @ f.v) ** 2))
            tail = float(np.sum(s[r:] ** 2))
            worst = max(worst, abs(err - tail) / max(tail, 1e-12 * total))
    record(3, worst <= 1e-6, f"max relative |err - tail energy| = {worst:.2e} over 100 matrices x 8 ranks")


def _attention_case(rng):
    b = int(rng.integers(1, 5))
    m = int(rng.integers(1, 129))
    h = int(rng.integers(1, 13))
    dh = int(rng.choice([2, 4, 8, 16, 32, 64]))
    r = int(rng.integers(1, min(dh, 64) + 1))
    plan = TilePlan(block_m=int(rng.choice([8, 16, 32])), block_r=int(rng.choice([4, 8, 16])))
    return b, m, h, dh, r, plan


def test_criterion_04_kernel_equivalence():
    rng = np.random.default_rng(4)
    attn_worst = 0.0
    for _ in range(200):
        b, m, h, dh, r, plan = _attention_case(rng)
        fset = random_attention_set(rng, h * dh, h, r)
        x = rng.normal(size=(b, m, h * dh)).astype(np.float32)
        out = attn.flash_svd_attention_forward(x, fset, plan, MemoryMeter())
        attn_worst = max(attn_worst, max_abs(out, attention_reference(x, fset)))
    ffn_worst = 0.0
    for _ in range(200):
        b, m = int(rng.integers(1, 5)), int(rng.integers(1, 129))
        d = int(rng.choice([4, 8, 16, 32, 64]))
        r = int(rng.integers(1, d + 1))
        f = random_ffn(rng, d, 4 * d, r, str(rng.choice(["gelu", "gelu_tanh", "relu"])))
        x = rng.normal(size=(b, m, d)).astype(np.float32)
        plan = TilePlan(block_m=int(rng.choice([8, 16, 32])), block_df=int(rng.choice([16, 32, 64])),
                        sram_budget_bytes=1 << 22)
        ref = ffn_reference(x, f)
        for out in (F.ffn_v1(x, f, plan, MemoryMeter()), F.ffn_v2(x, f, plan, MemoryMeter()),
                    F.ffn_naive_lowrank(x, f, MemoryMeter(), plan.block_m)):
            ffn_worst = max(ffn_worst, max_abs(out, ref))
    layer = synth_model(4, 1, 64, 256, 4, 8)[0]
    x = rng.normal(size=(2, 48, 64)).astype(np.float32)
    layer_err = max_abs(run_layer(x, layer, "flash-v1"), run_layer(x, layer, "dense"))
    ok = attn_worst <= 1e-4 and ffn_worst <= 1e-4 and layer_err <= 2e-4
    record(4, ok, f"attention {attn_worst:.2e} (200 cases), FFN {ffn_worst:.2e} (200 cases x 3 kernels), "
                  f"layer FlashV1 vs Dense {layer_err:.2e}")


def test_criterion_05_tiling_invariance():
    layer = synth_model(5, 1, 64, 256, 4, 12)[0]
    x = np.random.default_rng(5).normal(size=(2, 45, 64)).astype(np.float32)
    outs = []
    for bm, br, bdf in itertools.product((8, 16, 32, 64), (4, 8, 16), (16, 32, 64)):
        plan = TilePlan(bm, br, bdf, sram_budget_bytes=1 << 22)
        for mode in ("flash-v1", "flash-v2"):
            outs.append(run_layer(x, layer, mode, plan))
    stack = np.stack(outs).astype(np.float64)
    spread = float(np.max(stack.max(axis=0) - stack.min(axis=0)))  # = max pairwise max-abs
    record(5, spread <= 1e-4, f"max pairwise difference {spread:.2e} over {len(outs)} runs "
                              "(36 plans x FlashV1/FlashV2, full layer)")


def test_criterion_06_meter_exactness():
    bad, n = [], 0
    d, h, f = 16, 4, 64
    for b, m, r in itertools.product((1, 2, 3), (1, 7, 16), (1, 2, 4)):
        g = Geometry(b, m, d, f, h, r)
        bm = b * m
        checks = {
            "dense_attn": (meter_dense_attention(g).peak_transient_bytes, 4 * (3 * bm * d + b * h * m * m)),
            "flash_svd_attn": (meter_flash_attention(g).peak_transient_bytes, 4 * 3 * h * bm * r),
            "ffn_naive_lowrank": (meter_ffn(g, "naive").peak_transient_bytes, 4 * bm * f),
            "ffn_dense": (meter_ffn(g, "dense").peak_transient_bytes, 4 * bm * f),
            "ffn_v1": (meter_ffn(g, "v1").peak_transient_bytes, 4 * 2 * bm * r),
            "ffn_v2": (meter_ffn(g, "v2").peak_transient_bytes, 0),
        }
        n += 1
        for fid, (got, hand) in checks.items():
            if not got == hand == memtier.expected_bytes(fid, g.dims()):
                bad.append(f"{fid} B={b} M={m} r={r}: meter {got}, hand {hand}")
    record(6, not bad and n >= 27, f"{n} geometries x 6 formulas, mismatches: {bad or 'none'}")


CROSSOVER_GRID = [Geometry(b, m, d, 2 * d, h, 1)
                  for b in (1, 2) for m in (3, 8, 16) for d, h in ((32, 4), (48, 4), (64, 8))]


def test_criterion_07_threshold_crossover():
    rows = [(g, row) for g in CROSSOVER_GRID for row in check_crossover(g)]
    bad = [f"B={g.batch} M={g.seqlen} D={g.d_model} H={g.heads} r={r}" for g, (r, *_, ok) in rows if not ok]
    record(7, not bad, f"{len(rows)} (geometry, rank) checks at floor/ceil of the bound over "
                       f"{len(CROSSOVER_GRID)} geometries, violations: {bad or 'none'}")


def _delta(meter_fn, g, prev):
    return meter_fn(g).peak_total_bytes - meter_fn(prev).peak_total_bytes


def test_criterion_08_rank_deltas():
    geoms = [Geometry(b, m, d, 4 * d, h, r, groups)
             for b, m, (d, h, groups), r in itertools.product((1, 2), (5, 16), ((16, 2, 1), (32, 4, 2)), (2, 4))]
    bad, counts = [], {"attn_multi": 0, "attn_grouped": 0, "ffn_v1": 0, "ffn_v2": 0}
    for g in geoms:
        prev_multi = Geometry(g.batch, g.seqlen, g.d_model, g.d_ff, g.heads, g.rank - 1)
        multi = Geometry(g.batch, g.seqlen, g.d_model, g.d_ff, g.heads, g.rank)
        prev = Geometry(g.batch, g.seqlen, g.d_model, g.d_ff, g.heads, g.rank - 1, g.groups)
        cases = {
            "attn_multi": (_delta(meter_flash_attention, multi, prev_multi),
                           4 * 3 * (g.heads * g.bm + g.d_model), multi),
            "attn_grouped": (_delta(meter_flash_attention, g, prev),
                             4 * 3 * (g.groups * g.bm + g.d_model), g),
            "ffn_v1": (_delta(lambda x: meter_ffn(x, "v1"), g, prev),
                       4 * (2 * g.bm + 2 * g.d_model + 2 * g.d_ff), g),
            "ffn_v2": (_delta(lambda x: meter_ffn(x, "v2"), g, prev), 4 * (2 * g.d_model + 2 * g.d_ff), g),
        }
        for module, (got, hand, geo) in cases.items():
            counts[module] += 1
            if not got == hand == planner.delta_memory_per_rank(geo, module):
                bad.append(f"{module} {geo}: meter {got}, hand {hand}")
    ok = not bad and min(counts.values()) >= 10
    record(8, ok, f"geometries per module {counts}, mismatches: {bad or 'none'}")


def test_criterion_09_flop_roofline_io():
    speed = planner.speedup_paper(768, 3072, 96)
    hw = planner.HardwareModel(1e12, 1e12)
    compute = planner.roofline_latency(1e9, 1e6, hw)
    bandwidth = planner.roofline_latency(1e6, 1e9, planner.HardwareModel(1e12, 1e9))
    io_ok = []
    for b, m, d, f, r in ((1, 128, 768, 3072, 64), (2, 64, 64, 256, 8), (8, 16, 32, 128, 3)):
        g = Geometry(b, m, d, f, 1, r)
        bm = b * m
        io_ok.append(planner.io_bytes(g, "dense") == (4 * (3 * bm * d + 2 * bm * f), 4 * 2 * bm * d))
        io_ok.append(planner.io_bytes(g, "lowrank") == (4 * (4 * bm * r + 3 * r * d + 2 * r * f), 4 * 2 * bm * d))
    ok = (speed == Fraction(2_949_120, 377_856) and math.isclose(compute, 1e-3)
          and math.isclose(bandwidth, 1.0) and all(io_ok))
    record(9, ok, f"speedup {speed} = {float(speed):.3f}, roofline compute {compute:g} s / "
                  f"bandwidth {bandwidth:g} s, io closed forms {sum(io_ok)}/{len(io_ok)}")


@pytest.mark.slow
def test_criterion_10_bert_memory_ordering():
    d, f, h, b, m, r = 768, 3072, 12, 8, 128, 64
    layer = synth_model(10, 1, d, f, h, r)[0]
    x = np.random.default_rng(10).normal(size=(b, m, d)).astype(np.float32)
    meters = {mode: MemoryMeter() for mode in ("flash-v1", "naive", "dense")}
    for mode, meter in meters.items():
        run_layer(x, layer, mode, TilePlan(), meter)
    flash, naive, dense = (meters[k] for k in ("flash-v1", "naive", "dense"))
    g = Geometry(b, m, d, f, h, r)
    dense_ffn = memtier.expected_bytes("ffn_dense", g.dims())
    flash_attn = memtier.expected_bytes("flash_svd_attn", g.dims())
    dominates, ratio = planner.ffn_dominance_check(g)
    ok = (flash.peak_transient_bytes < naive.peak_transient_bytes
          and naive.peak_total_bytes < dense.peak_total_bytes
          and dense_ffn > flash_attn and dominates)
    record(10, ok, f"transient FlashV1 {flash.peak_transient_bytes} < NaiveLowRank {naive.peak_transient_bytes}; "
                   f"with weights NaiveLowRank {naive.peak_total_bytes} < Dense {dense.peak_total_bytes}; "
                   f"dense FFN {dense_ffn} > flash attention {flash_attn} (ratio {float(ratio):.2f})")


def test_criterion_11_format_round_trip(tmp_path):
    layers = synth_model(11, 2, 32, 128, 4, 6)
    a, b = tmp_path / "a.fsvd", tmp_path / "b.fsvd"
    save_model(a, layers, seed=11)
    save_model(b, load_model(a), seed=11)
    round_trip = a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.fsvd"
    save_model(c, synth_model(11, 2, 32, 128, 4, 6), seed=11)
    deterministic = a.read_bytes() == c.read_bytes()
    record(11, round_trip and deterministic,
           f"save-load-save byte-identical: {round_trip}; same seed twice byte-identical: {deterministic}")
