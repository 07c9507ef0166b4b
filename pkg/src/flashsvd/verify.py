"""Property suites behind ``flashsvd verify``, plus the fixtures they share with tests.

Every closed-form expectation is looked up through the ``memtier`` and
``planner`` module attributes at call time, so a patched formula is caught.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import attention as attn
from . import ffn as ffn_mod
from . import memtier, planner
from .encoder import load_model, run_layer, save_model, synth_model
from .factorizer import AttentionFactorSet, FactorizedLinear, unit_count
from .ffn import FfnFactors
from .memtier import MemoryMeter, TilePlan

ATTN_TOL = 1e-4
FFN_TOL = 1e-4
LAYER_TOL = 2e-4


# -- random fixtures -------------------------------------------------------------------

def random_linear(rng, d_in: int, d_out: int, rank: int, bias_std: float = 0.1) -> FactorizedLinear:
    u = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, rank)).astype(np.float32)
    v = rng.normal(0.0, 1.0 / math.sqrt(rank), size=(rank, d_out)).astype(np.float32)
    b = rng.normal(0.0, bias_std, size=d_out).astype(np.float32)
    return FactorizedLinear(u, v, b)


def random_attention_set(rng, d_model: int, heads: int, rank: int, mode: str = "multi",
                         groups: int | None = None, with_output: bool = True) -> AttentionFactorSet:
    """Random (not SVD-derived) factors; enough for kernel equivalence checks."""
    units = unit_count(mode, heads, groups)
    width = d_model // units
    sets = {a: [random_linear(rng, d_model, width, rank) for _ in range(units)] for a in "qkv"}
    out = random_linear(rng, d_model, d_model, rank) if with_output else None
    return AttentionFactorSet(mode, heads, d_model, sets["q"], sets["k"], sets["v"], out)


def random_ffn(rng, d_model: int, d_ff: int, rank: int, activation: str = "gelu") -> FfnFactors:
    return FfnFactors(random_linear(rng, d_model, d_ff, rank), random_linear(rng, d_ff, d_model, rank),
                      activation)


def attention_reference(x, fset: AttentionFactorSet):
    """64-bit dense attention on the reconstructed Q/K/V weights."""
    w = fset.dense_weights()
    x64 = np.asarray(x, dtype=np.float64)
    q, k, v = (x64 @ w[a][0].astype(np.float64) + w[a][1].astype(np.float64) for a in "qkv")
    return attn.dense_attention_oracle(q, k, v, fset.heads, MemoryMeter())


def ffn_reference(x, f: FfnFactors):
    d = ffn_mod.reconstruct_ffn(f)
    c = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731
    return ffn_mod.ffn_dense_oracle(c(x), c(d.w_in), c(d.b_in), c(d.w_out), c(d.b_out),
                                    f.activation, MemoryMeter())


def max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


# -- metered runs ------------------------------------------------------------------------

def _geom_input(rng, geom: planner.Geometry):
    return rng.normal(size=(geom.batch, geom.seqlen, geom.d_model)).astype(np.float32)


def _attn_mode(geom: planner.Geometry) -> str:
    return "multi" if geom.groups is None else "grouped"


def meter_flash_attention(geom: planner.Geometry, plan: TilePlan | None = None, seed: int = 0,
                          mode: str | None = None) -> MemoryMeter:
    """Meter after projecting and streaming low-rank attention at ``geom``."""
    rng = np.random.default_rng(seed)
    mode = mode or _attn_mode(geom)
    fset = random_attention_set(rng, geom.d_model, geom.heads, geom.rank, mode, geom.groups,
                                with_output=False)
    meter = MemoryMeter()
    attn.flash_svd_attention_forward(_geom_input(rng, geom), fset, plan or TilePlan(), meter)
    return meter


def meter_dense_qkv_baseline(geom: planner.Geometry, plan: TilePlan | None = None,
                             seed: int = 0) -> MemoryMeter:
    rng = np.random.default_rng(seed)
    d = geom.d_model
    w = {a: (rng.normal(size=(d, d)).astype(np.float32) / math.sqrt(d), np.zeros(d, np.float32))
         for a in "qkv"}
    meter = MemoryMeter()
    attn.flash_attention_dense_qkv(_geom_input(rng, geom), w, geom.heads, plan or TilePlan(), meter)
    return meter


def meter_dense_attention(geom: planner.Geometry, seed: int = 0) -> MemoryMeter:
    rng = np.random.default_rng(seed)
    d = geom.d_model
    w = {a: (rng.normal(size=(d, d)).astype(np.float32) / math.sqrt(d), np.zeros(d, np.float32))
         for a in "qkv"}
    meter = MemoryMeter()
    attn.dense_attention(_geom_input(rng, geom), w, geom.heads, meter)
    return meter


def meter_ffn(geom: planner.Geometry, kind: str, plan: TilePlan | None = None,
              seed: int = 0) -> MemoryMeter:
    """Run one FFN kernel (``v1``, ``v2``, ``naive`` or ``dense``) and return its meter."""
    rng = np.random.default_rng(seed)
    f = random_ffn(rng, geom.d_model, geom.d_ff, geom.rank)
    x = _geom_input(rng, geom)
    meter = MemoryMeter()
    plan = plan or TilePlan()
    if kind == "v1":
        ffn_mod.ffn_v1(x, f, plan, meter)
    elif kind == "v2":
        ffn_mod.ffn_v2(x, f, plan, meter)
    elif kind == "naive":
        ffn_mod.ffn_naive_lowrank(x, f, meter, plan.block_m)
    elif kind == "dense":
        ffn_mod.ffn_dense(x, ffn_mod.reconstruct_ffn(f), meter)
    else:
        raise ValueError(f"unknown FFN kind {kind!r}")
    return meter


def fitting_plan(geom: planner.Geometry, block_m: int = 16, block_r: int = 16,
                 block_df: int = 32) -> TilePlan:
    """A plan with a budget large enough for ``geom`` (tests vary tiles, not budgets)."""
    plan = TilePlan(block_m, block_r, block_df)
    need = max(memtier.working_set(plan, "attention", {"head_dim": geom.head_dim}).total,
               memtier.working_set(plan, "ffn_v1", {"batch": geom.batch, "rank": geom.rank}).total)
    return TilePlan(block_m, block_r, block_df, max(plan.sram_budget_bytes, need))


# -- suites ------------------------------------------------------------------------------

@dataclass
class PropertyResult:
    suite: str
    name: str
    ok: bool
    detail: str


def _attn_configs(seed: int, n: int):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        heads = int(rng.choice([1, 2, 4]))
        dh = int(rng.choice([4, 8, 16]))
        rank = int(rng.integers(1, dh + 1))
        yield rng, int(rng.integers(1, 3)), int(rng.choice([1, 7, 16, 33])), heads * dh, heads, rank


def prop_attn_equivalence():
    worst = 0.0
    for rng, b, m, d, h, r in _attn_configs(1, 8):
        fset = random_attention_set(rng, d, h, r)
        x = rng.normal(size=(b, m, d)).astype(np.float32)
        out = attn.flash_svd_attention_forward(x, fset, TilePlan(block_m=8, block_r=4), MemoryMeter())
        worst = max(worst, max_abs(out, attention_reference(x, fset)))
    return worst <= ATTN_TOL, f"max |flash - dense| = {worst:.2e} (tol {ATTN_TOL})"


def prop_attn_tiling():
    rng = np.random.default_rng(2)
    fset = random_attention_set(rng, 32, 4, 6)
    x = rng.normal(size=(2, 37, 32)).astype(np.float32)
    outs = [attn.flash_svd_attention_forward(x, fset, TilePlan(block_m=bm, block_r=br), MemoryMeter())
            for bm in (8, 16, 32, 64) for br in (4, 8, 16)]
    worst = max(max_abs(a, outs[0]) for a in outs)
    return worst <= ATTN_TOL, f"max pairwise spread = {worst:.2e} over {len(outs)} plans"


def prop_attn_meter():
    bad = []
    for geom in (planner.Geometry(2, 16, 32, 64, 4, 4), planner.Geometry(1, 9, 24, 48, 2, 3),
                 planner.Geometry(2, 8, 32, 64, 4, 5, groups=2)):
        got = meter_flash_attention(geom).peak_transient_bytes
        fid = "flash_svd_attn" if geom.groups is None else "grouped_attn"
        want = memtier.expected_bytes(fid, geom.dims())
        if got != want:
            bad.append(f"{fid}{geom.dims()}: meter {got} != {want}")
        got = meter_dense_attention(geom).peak_transient_bytes
        want = memtier.expected_bytes("dense_attn", geom.dims())
        if got != want:
            bad.append(f"dense_attn{geom.dims()}: meter {got} != {want}")
    return not bad, "; ".join(bad) or "meter matches closed forms"


def prop_ffn_equivalence():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(6):
        d = int(rng.choice([8, 16, 32]))
        f_dim = 4 * d
        r = int(rng.integers(1, d + 1))
        f = random_ffn(rng, d, f_dim, r)
        x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.choice([5, 16, 33])), d)).astype(np.float32)
        ref = ffn_reference(x, f)
        plan = TilePlan(block_m=8, block_df=16)
        for out in (ffn_mod.ffn_v1(x, f, plan, MemoryMeter()), ffn_mod.ffn_v2(x, f, plan, MemoryMeter()),
                    ffn_mod.ffn_naive_lowrank(x, f, MemoryMeter())):
            worst = max(worst, max_abs(out, ref))
    return worst <= FFN_TOL, f"max |kernel - dense| = {worst:.2e} (tol {FFN_TOL})"


def prop_ffn_tiling():
    rng = np.random.default_rng(4)
    f = random_ffn(rng, 16, 64, 6)
    x = rng.normal(size=(2, 37, 16)).astype(np.float32)
    outs = []
    for bm in (8, 16, 32):
        for bdf in (16, 32, 64):
            plan = TilePlan(block_m=bm, block_df=bdf)
            outs += [ffn_mod.ffn_v1(x, f, plan, MemoryMeter()), ffn_mod.ffn_v2(x, f, plan, MemoryMeter())]
    worst = max(max_abs(a, outs[0]) for a in outs)
    return worst <= FFN_TOL, f"max pairwise spread = {worst:.2e} over {len(outs)} runs"


def prop_ffn_meter():
    bad = []
    for geom in (planner.Geometry(2, 16, 16, 64, 2, 4), planner.Geometry(1, 9, 8, 32, 1, 3)):
        for kind, fid in (("v1", "ffn_v1"), ("v2", "ffn_v2"), ("naive", "ffn_naive_lowrank"),
                          ("dense", "ffn_dense")):
            got = meter_ffn(geom, kind).peak_transient_bytes
            want = memtier.expected_bytes(fid, geom.dims())
            if got != want:
                bad.append(f"{fid}{geom.dims()}: meter {got} != {want}")
    return not bad, "; ".join(bad) or "meter matches closed forms"


def prop_meter_grid():
    bad = 0
    total = 0
    for b in (1, 2):
        for m in (4, 9):
            for r in (1, 3):
                geom = planner.Geometry(b, m, 16, 32, 4, r)
                runs = (("flash_svd_attn", meter_flash_attention(geom)),
                        ("ffn_v1", meter_ffn(geom, "v1")), ("ffn_v2", meter_ffn(geom, "v2")),
                        ("ffn_naive_lowrank", meter_ffn(geom, "naive")))
                for fid, meter in runs:
                    total += 1
                    bad += meter.peak_transient_bytes != memtier.expected_bytes(fid, geom.dims())
    return bad == 0, f"{total - bad}/{total} metered runs match expected_bytes"


def crossover_points(geom: planner.Geometry):
    """Ranks on either side of the memory threshold (floor and ceil of the bound)."""
    bound = planner.memory_threshold(geom, "multi" if geom.groups is None else "grouped")
    return bound, sorted({max(1, math.floor(bound)), math.ceil(bound)})


def check_crossover(geom: planner.Geometry):
    """[(rank, flash total, baseline total, bound)] with the iff verdict per rank."""
    base = meter_dense_qkv_baseline(geom).peak_total_bytes
    bound, ranks = crossover_points(geom)
    rows = []
    for r in ranks:
        g = planner.Geometry(geom.batch, geom.seqlen, geom.d_model, geom.d_ff, geom.heads, r, geom.groups)
        total = meter_flash_attention(g).peak_total_bytes
        rows.append((r, total, base, bound, (total < base) == (r < bound)))
    return rows


def prop_threshold_crossover():
    bad = []
    for geom in (planner.Geometry(1, 8, 32, 64, 4, 1), planner.Geometry(2, 4, 48, 96, 4, 1),
                 planner.Geometry(1, 16, 64, 128, 8, 1), planner.Geometry(1, 3, 16, 32, 2, 1)):
        for r, total, base, bound, ok in check_crossover(geom):
            if not ok:
                bad.append(f"r={r} bound={float(bound):.3f}: flash {total} vs baseline {base}")
    return not bad, "; ".join(bad) or "savings flip exactly at the bound"


def prop_rank_deltas():
    bad = []
    for geom in (planner.Geometry(2, 8, 32, 64, 4, 3), planner.Geometry(1, 5, 16, 48, 2, 4, groups=1)):
        prev = planner.Geometry(geom.batch, geom.seqlen, geom.d_model, geom.d_ff, geom.heads,
                                geom.rank - 1, geom.groups)
        module = "attn_multi" if geom.groups is None else "attn_grouped"
        diff = meter_flash_attention(geom).peak_total_bytes - meter_flash_attention(prev).peak_total_bytes
        if diff != planner.delta_memory_per_rank(geom, module):
            bad.append(f"{module}: meter delta {diff}")
        for kind in ("v1", "v2"):
            diff = meter_ffn(geom, kind).peak_total_bytes - meter_ffn(prev, kind).peak_total_bytes
            if diff != planner.delta_memory_per_rank(geom, "ffn_" + kind):
                bad.append(f"ffn_{kind}: meter delta {diff}")
    return not bad, "; ".join(bad) or "per-rank deltas match"


def prop_layer_equivalence():
    layers = synth_model(7, 1, 32, 128, 4, 8)
    x = np.random.default_rng(5).normal(size=(2, 19, 32)).astype(np.float32)
    plan = TilePlan(block_m=8, block_r=4, block_df=32)
    ref = run_layer(x, layers[0], "dense", plan)
    worst = max(max_abs(run_layer(x, layers[0], m, plan), ref) for m in ("naive", "flash-v1", "flash-v2"))
    return worst <= LAYER_TOL, f"max |mode - dense| = {worst:.2e} (tol {LAYER_TOL})"


def prop_format_roundtrip():
    import tempfile
    from pathlib import Path

    layers = synth_model(11, 2, 16, 32, 2, 4)
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp, "a.fsvd"), Path(tmp, "b.fsvd")
        save_model(a, layers, seed=11)
        save_model(b, load_model(a), seed=11)
        same = a.read_bytes() == b.read_bytes()
    return same, "save -> load -> save is byte-identical" if same else "round trip changed bytes"


SUITES = {
    "attn": [("equivalence", prop_attn_equivalence), ("tiling", prop_attn_tiling), ("meter", prop_attn_meter)],
    "ffn": [("equivalence", prop_ffn_equivalence), ("tiling", prop_ffn_tiling), ("meter", prop_ffn_meter)],
    "meter": [("exactness-grid", prop_meter_grid), ("rank-deltas", prop_rank_deltas)],
    "threshold": [("crossover", prop_threshold_crossover)],
    "layer": [("equivalence", prop_layer_equivalence)],
    "format": [("roundtrip", prop_format_roundtrip)],
}


def run_suites(names=None) -> list[PropertyResult]:
    names = list(SUITES) if not names or names == ["all"] else names
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        from .errors import ConfigError
        raise ConfigError(f"unknown suite(s) {unknown}; choose from {sorted(SUITES)} or 'all'")
    results = []
    for suite in names:
        for name, fn in SUITES[suite]:
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing property is a failing property
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(PropertyResult(suite, name, bool(ok), detail))
    return results
