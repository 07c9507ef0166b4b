from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flashsvd import planner as P
from flashsvd.errors import ConfigError, RankError
from flashsvd.tensor import count_flops, gemm
from flashsvd.verify import meter_ffn, meter_flash_attention


def geom(b=1, m=128, d=768, f=3072, h=12, r=64, groups=None, layers=1):
    return P.Geometry(b, m, d, f, h, r, groups, layers)


def test_thresholds():
    g = geom()
    assert P.memory_threshold(g, "single") == Fraction(98304, 896)
    assert round(float(P.memory_threshold(g, "single")), 2) == 109.71
    assert P.memory_threshold(g, "multi") == Fraction(98304, 1536 + 768)
    assert round(float(P.memory_threshold(g, "multi")), 2) == 42.67
    assert P.memory_threshold(geom(h=12, groups=3), "grouped") == Fraction(98304, 3 * 128 + 768)
    with pytest.raises(ConfigError):
        P.memory_threshold(g, "diagonal")


@given(st.integers(1, 8), st.integers(1, 256), st.sampled_from([16, 64, 768]))
def test_one_head_multi_equals_single(b, m, d):
    g = P.Geometry(b, m, d, 4 * d, 1, 1)
    assert P.memory_threshold(g, "multi") == P.memory_threshold(g, "single")


def test_speedup_values():
    assert P.speedup_paper(768, 3072, 96) == Fraction(2_949_120, 377_856)
    assert round(float(P.speedup_paper(768, 3072, 96)), 3) == 7.805
    assert P.speedup_paper(64, 64, 64) == Fraction(2, 3)


@given(st.integers(1, 1024), st.integers(1, 4096), st.integers(1, 511))
def test_speedup_decreases_with_rank(d, f, r):
    assert P.speedup_paper(d, f, r + 1) < P.speedup_paper(d, f, r)


def test_single_gemm_flops():
    with count_flops() as c:
        gemm(np.ones((2, 3)), np.ones((3, 4)))
    assert c.flops == 48


def test_io_bytes_closed_forms():
    g = geom()
    dense_in, dense_out = P.io_bytes(g, "dense")
    low_in, low_out = P.io_bytes(g, "lowrank")
    assert dense_in == 4 * (294_912 + 786_432) == 4_325_376
    assert low_in == 4 * (32_768 + 147_456 + 393_216) == 2_293_760
    assert dense_out == low_out == 4 * 2 * 128 * 768
    with pytest.raises(ConfigError):
        P.io_bytes(g, "sparse")


@given(st.integers(1, 16), st.integers(1, 256), st.sampled_from([(64, 4), (128, 8), (768, 12)]),
       st.integers(1, 128))
def test_io_lowrank_smaller_iff_inequality(b, m, dh, r):
    d, h = dh
    g = P.Geometry(b, m, d, 4 * d, h, r)
    bm, f = g.bm, g.d_ff
    smaller = P.io_bytes(g, "lowrank")[0] < P.io_bytes(g, "dense")[0]
    assert smaller == (4 * bm * r + 3 * r * d + 2 * r * f < 3 * bm * d + 2 * bm * f)


def test_roofline_regimes():
    hw = P.HardwareModel(1e12, 1e12)
    assert P.roofline_latency(1e9, 1e6, hw) == pytest.approx(1e-3)
    assert P.roofline_latency(1e6, 1e9, P.HardwareModel(1e12, 1e9)) == pytest.approx(1.0)
    eq = P.roofline_latency(1e9, 1e9, P.HardwareModel(1e9, 1e9))
    assert eq == 1.0
    eps = 1e-6
    assert P.roofline_latency(1e9 * (1 + eps), 1e9, P.HardwareModel(1e9, 1e9)) == pytest.approx(1.0, abs=2e-6)
    with pytest.raises(ConfigError):
        P.HardwareModel(1e12, 0)
    with pytest.raises(ConfigError):
        P.roofline_latency(-1, 0, hw)


def test_rank_deltas_reference_value():
    g = P.Geometry(2, 64, 64, 256, 4, 8)
    assert P.delta_memory_per_rank(g, "attn_multi") == 4 * 3 * (512 + 64) == 6_912
    with pytest.raises(ConfigError):
        P.delta_memory_per_rank(g, "attn_sparse")


@given(st.integers(1, 64), st.integers(1, 512), st.integers(1, 64), st.integers(1, 512))
def test_ffn_v2_delta_ignores_tokens(b1, m1, b2, m2):
    a = P.Geometry(b1, m1, 64, 256, 4, 8)
    c = P.Geometry(b2, m2, 64, 256, 4, 8)
    assert P.delta_memory_per_rank(a, "ffn_v2") == P.delta_memory_per_rank(c, "ffn_v2")


def test_grouped_one_group_equals_single():
    g = P.Geometry(2, 16, 64, 256, 4, 8, groups=1)
    assert P.delta_memory_per_rank(g, "attn_grouped") == P.delta_memory_per_rank(g, "attn_single")


@pytest.mark.parametrize("module,groups", [("attn_multi", None), ("attn_grouped", 2), ("attn_single", 1)])
def test_attention_delta_matches_meter(module, groups):
    g = P.Geometry(2, 7, 32, 64, 4, 4, groups)
    prev = P.Geometry(2, 7, 32, 64, 4, 3, groups)
    diff = meter_flash_attention(g).peak_total_bytes - meter_flash_attention(prev).peak_total_bytes
    assert diff == P.delta_memory_per_rank(g, module)


@pytest.mark.parametrize("kind", ["v1", "v2"])
def test_ffn_delta_matches_meter(kind):
    g, prev = P.Geometry(2, 7, 16, 64, 4, 5), P.Geometry(2, 7, 16, 64, 4, 4)
    diff = meter_ffn(g, kind).peak_total_bytes - meter_ffn(prev, kind).peak_total_bytes
    assert diff == P.delta_memory_per_rank(g, "ffn_" + kind)


def test_decoder_unit_case():
    g = P.Geometry(1, 1, 1, 1, 1, 1)
    kv = P.decoder_memory(g, "prefill") - 4 * (3 + 2)
    assert kv == 8


@given(st.integers(1, 12), st.integers(1, 8), st.integers(1, 256), st.integers(1, 64))
def test_decoder_prefill_linear_and_decode_bounded(layers, b, m, r):
    g = P.Geometry(b, m, 64, 256, 1, r, layers=layers)
    more_layers = P.Geometry(b, m, 64, 256, 1, r, layers=layers + 1)
    longer = P.Geometry(b, m + 1, 64, 256, 1, r, layers=layers)
    base = P.decoder_memory(g, "prefill")
    assert P.decoder_memory(more_layers, "prefill") - base == 4 * 2 * b * m * r
    assert P.decoder_memory(longer, "prefill") - base == 4 * (2 * layers + 5) * b * r
    assert P.decoder_memory(g, "decode", m) <= base
    steps = [P.decoder_memory(g, "decode", t) for t in range(1, min(m, 8) + 1)]
    assert steps == sorted(steps)


def test_decoder_errors():
    g = P.Geometry(1, 4, 8, 8, 1, 2)
    for t in (0, 5, None):
        with pytest.raises(RankError):
            P.decoder_memory(g, "decode", t)
    with pytest.raises(ConfigError):
        P.decoder_memory(g, "train")


def test_ffn_dominance_examples():
    d = 768
    ok, ratio = P.ffn_dominance_check(P.Geometry(64, 512, d, 4 * d, 12, d // 16))
    assert ok and ratio > 50
    ok, ratio = P.ffn_dominance_check(P.Geometry(1, d, d, 3072, 12, 3072))
    assert not ok and ratio == Fraction(1, 2)


@given(st.integers(1, 64), st.integers(1, 64), st.sampled_from([4, 64, 768]), st.integers(1, 64))
def test_ffn_dominance_grows_as_rank_shrinks(b, m, d, r):
    # ratio * r does not depend on r, so the ratio diverges as r -> 0
    g = P.Geometry(b, m, d, 4 * d, 1, r)
    g1 = P.Geometry(b, m, d, 4 * d, 1, 1)
    assert P.ffn_dominance_check(g)[1] * r == P.ffn_dominance_check(g1)[1] > 0


def test_geometry_validation():
    with pytest.raises(ConfigError):
        P.Geometry(0, 1, 4, 4, 1, 1)
    with pytest.raises(ConfigError):
        P.Geometry(1, 1, 6, 4, 4, 1)
    with pytest.raises(ConfigError):
        P.Geometry(1, 1, 8, 4, 4, 1, groups=3)


def test_mode_aliases():
    assert P.normalize_mode("FlashV1") == "flash-v1"
    assert P.normalize_mode("naive_lowrank") == "naive"
    with pytest.raises(ConfigError):
        P.normalize_mode("v3")
