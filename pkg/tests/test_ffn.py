import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flashsvd import ffn as F
from flashsvd.errors import RankError, ShapeError
from flashsvd.factorizer import FactorizedLinear
from flashsvd.memtier import MemoryMeter, TilePlan, expected_bytes
from flashsvd.planner import Geometry, ffn_memory_ratio, flops_exact
from flashsvd.tensor import count_flops
from flashsvd.verify import FFN_TOL, ffn_reference, max_abs, meter_ffn, random_ffn


def test_identity_activation_collapses_to_linear_map(rng):
    f = random_ffn(rng, 8, 32, 4, activation="identity")
    x = rng.normal(size=(2, 5, 8)).astype(np.float32)
    w = f.up.weight().astype(np.float64) @ f.down.weight()
    b = f.up.bias.astype(np.float64) @ f.down.weight() + f.down.bias
    want = x.astype(np.float64) @ w + b
    for out in (F.ffn_v1(x, f, TilePlan(block_m=4, block_df=8), MemoryMeter()),
                F.ffn_v2(x, f, TilePlan(block_m=4, block_df=8), MemoryMeter())):
        np.testing.assert_allclose(out, want, atol=1e-5)


def test_v1_reference_size(rng):
    f = random_ffn(rng, 64, 256, 32)
    x = rng.normal(size=(2, 64, 64)).astype(np.float32)
    meter = MemoryMeter()
    out = F.ffn_v1(x, f, TilePlan(), meter)
    assert max_abs(out, ffn_reference(x, f)) <= FFN_TOL
    assert meter.peak_transient_bytes == 32_768


def test_v2_matches_v1_with_zero_transient(rng):
    f = random_ffn(rng, 64, 256, 32)
    x = rng.normal(size=(2, 64, 64)).astype(np.float32)
    m1, m2 = MemoryMeter(), MemoryMeter()
    a = F.ffn_v1(x, f, TilePlan(), m1)
    b = F.ffn_v2(x, f, TilePlan(), m2)
    assert max_abs(a, b) <= FFN_TOL
    assert m2.peak_transient_bytes == 0
    assert m1.persistent_bytes == m2.persistent_bytes == 4 * 32 * (2 * 64 + 2 * 256)


def test_dense_meter_and_64bit_reference(rng):
    f = random_ffn(rng, 64, 256, 16)
    d = F.reconstruct_ffn(f)
    x = rng.normal(size=(2, 64, 64)).astype(np.float32)
    meter = MemoryMeter()
    out = F.ffn_dense(x, d, meter)
    assert meter.peak_transient_bytes == 131_072
    assert meter.persistent_bytes == 4 * 2 * 64 * 256
    assert max_abs(out, ffn_reference(x, f)) <= FFN_TOL


def test_naive_matches_dense_with_same_peak(rng):
    f = random_ffn(rng, 16, 64, 6)
    x = rng.normal(size=(2, 9, 16)).astype(np.float32)
    naive, dense = MemoryMeter(), MemoryMeter()
    a = F.ffn_naive_lowrank(x, f, naive, block_m=4)
    b = F.ffn_dense(x, F.reconstruct_ffn(f), dense)
    assert max_abs(a, b) <= FFN_TOL
    assert naive.peak_transient_bytes == dense.peak_transient_bytes == 4 * 18 * 64


def test_full_rank_naive_reproduces_original_weights(rng):
    d, dff = 16, 48
    dense = F.DenseFfn(rng.normal(size=(d, dff)).astype(np.float32) / 4, rng.normal(size=dff).astype(np.float32),
                       rng.normal(size=(dff, d)).astype(np.float32) / 7, rng.normal(size=d).astype(np.float32))
    f = F.factorize_ffn(dense, rank=d)
    x = rng.normal(size=(1, 6, d)).astype(np.float32)
    want = F.ffn_dense(x, dense, MemoryMeter())
    assert max_abs(F.ffn_naive_lowrank(x, f, MemoryMeter()), want) <= 1e-3


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1), st.integers(1, 2), st.integers(1, 40), st.sampled_from([4, 8, 16]),
       st.sampled_from([4, 8, 16]), st.sampled_from([8, 16, 32]),
       st.sampled_from(["gelu", "gelu_tanh", "relu"]))
def test_kernels_agree_property(seed, b, m, d, bm, bdf, act):
    rng = np.random.default_rng(seed)
    r = int(rng.integers(1, d + 1))
    f = random_ffn(rng, d, 4 * d, r, act)
    x = rng.normal(size=(b, m, d)).astype(np.float32)
    ref = ffn_reference(x, f)
    plan = TilePlan(block_m=bm, block_df=bdf)
    for out in (F.ffn_v1(x, f, plan, MemoryMeter()), F.ffn_v2(x, f, plan, MemoryMeter()),
                F.ffn_naive_lowrank(x, f, MemoryMeter(), bm)):
        assert max_abs(out, ref) <= FFN_TOL


@pytest.mark.parametrize("b,m,d,r", [(1, 8, 16, 2), (2, 16, 16, 7), (2, 5, 8, 3)])
def test_peak_ordering_v2_v1_naive(b, m, d, r):
    g = Geometry(b, m, d, 4 * d, 1, r)
    assert 2 * r < g.d_ff
    peaks = [meter_ffn(g, k).peak_transient_bytes for k in ("v2", "v1", "naive")]
    assert peaks[0] < peaks[1] < peaks[2]
    for kind, fid in (("v2", "ffn_v2"), ("v1", "ffn_v1"), ("naive", "ffn_naive_lowrank")):
        assert meter_ffn(g, kind).peak_transient_bytes == expected_bytes(fid, g.dims())


@pytest.mark.parametrize("b,m,d,r", [(1, 8, 16, 2), (2, 16, 32, 5), (4, 32, 16, 8)])
def test_memory_ratio_is_exact_meter_ratio(b, m, d, r):
    g = Geometry(b, m, d, 4 * d, 1, r)
    v1 = meter_ffn(g, "v1")
    dense = meter_ffn(g, "dense")
    got = (v1.peak_transient_bytes + v1.persistent_bytes) / dense.peak_transient_bytes
    assert got == pytest.approx(float(ffn_memory_ratio(g)), rel=1e-12)


@given(st.integers(1, 64), st.integers(1, 64), st.sampled_from([16, 64, 768]), st.integers(1, 64))
def test_memory_ratio_vanishes_with_tokens(b, m, d, r):
    g = Geometry(b, m, d, 4 * d, 1, r)
    c = 2 + 2 * g.d_model / g.d_ff
    assert float(ffn_memory_ratio(g)) - 2 * r / g.d_ff <= c * r / g.bm + 1e-12


def test_flops_v1_equal_v2_and_counter(rng):
    g = Geometry(2, 20, 16, 64, 1, 6)
    f = random_ffn(rng, 16, 64, 6)
    x = rng.normal(size=(2, 20, 16)).astype(np.float32)
    want = 2 * g.bm * g.rank * (2 * g.d_model + 2 * g.d_ff)
    for kernel in (F.ffn_v1, F.ffn_v2):
        with count_flops() as c:
            kernel(x, f, TilePlan(block_m=8, block_df=16), MemoryMeter())
        assert c.flops == want
    ffn_share = flops_exact(g, "flash-v1") - flops_exact(Geometry(2, 20, 16, 16, 1, 6), "flash-v1")
    assert ffn_share == 2 * g.bm * g.rank * 2 * (64 - 16)


def test_rank_mismatch_and_shape_errors(rng):
    up = FactorizedLinear(np.ones((4, 2), np.float32), np.ones((2, 8), np.float32), np.zeros(8, np.float32))
    down = FactorizedLinear(np.ones((8, 3), np.float32), np.ones((3, 4), np.float32), np.zeros(4, np.float32))
    f = F.FfnFactors(up, down)
    with pytest.raises(RankError):
        F.ffn_v1(np.zeros((1, 2, 4), np.float32), f, TilePlan(), MemoryMeter())
    with pytest.raises(ShapeError):
        F.FfnFactors(up, up)
    ok = random_ffn(rng, 4, 8, 2)
    with pytest.raises(ShapeError):
        F.ffn_v2(np.zeros((1, 2, 5), np.float32), ok, TilePlan(), MemoryMeter())
