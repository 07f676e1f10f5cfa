import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finemoe.config import HARDWARE_PRESETS, MODEL_PRESETS, HardwareProfile
from finemoe.roofline import (RooflineError, RooflineQuery, ai_limit, arithmetic_intensity,
                              ffn_estimate, ffn_flops, ffn_io, knee_length, knee_length_approx,
                              latency, moe_io_elements, moe_knee, moe_layer_estimate)

A800 = HARDWARE_PRESETS["a800"]
V2 = MODEL_PRESETS["v2-lite"]


def hw(peak, bw):
    return HardwareProfile("t", peak, bw, 1.0, 1.0)


def test_unit_sizes():
    assert ffn_io(RooflineQuery(1, 1, 1)) == 7
    assert ffn_flops(RooflineQuery(1, 1, 1)) == 6


def test_ai_limit():
    assert round(ai_limit(2048, 10944), 1) == 5175.5
    assert arithmetic_intensity(RooflineQuery(2048, 10944, 10**9)) == pytest.approx(5175.5, abs=0.1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4096), st.integers(1, 4096), st.integers(1, 10**5))
def test_ai_monotone_and_bounded(d, d_i, L):
    a = arithmetic_intensity(RooflineQuery(d, d_i, L))
    b = arithmetic_intensity(RooflineQuery(d, d_i, L + 1))
    assert a < b < ai_limit(d, d_i)


def test_latency_memory_bound():
    est = latency(2, 0, hw(1.0, 1.0))
    assert est.time_s == 2.0 and est.bound == "memory"


def test_latency_tie_is_compute():
    est = latency(10, 40, hw(4.0, 1.0))
    assert est.time_s == 10.0 and est.bound == "compute"


def test_invalid_query():
    with pytest.raises(RooflineError):
        RooflineQuery(0, 1, 1)


def _scan_knee(d, d_i, h):
    L = 1
    while ffn_estimate(RooflineQuery(d, d_i, L), h).bound != "compute":
        L += 1
    return L


def test_knee_matches_scan_and_approximation():
    knee = knee_length(2048, 10944, A800)
    assert knee == _scan_knee(2048, 10944, A800) == 172
    assert round(knee_length_approx(A800)) == 161
    assert 135 <= knee_length_approx(A800) <= 185


def test_knee_unbounded_when_compute_free():
    assert knee_length(2048, 10944, hw(math.inf, 1.935e12)) is None


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 512), st.integers(8, 2048), st.floats(1e11, 1e13), st.floats(1e10, 1e12))
def test_knee_is_first_compute_bound_length(d, d_i, peak, bw):
    h = hw(peak, bw)
    knee = knee_length(d, d_i, h)
    if knee is None:
        return
    assert ffn_estimate(RooflineQuery(d, d_i, knee), h).bound == "compute"
    if knee > 1:
        assert ffn_estimate(RooflineQuery(d, d_i, knee - 1), h).bound == "memory"


def test_moe_single_token_loads_own_experts():
    io = moe_io_elements(V2, 1, 6, 64)
    d, d_e, d_s = V2.d, V2.d_e, V2.d_s
    assert io == pytest.approx(3 * d_s * d + 3 * d_e * d * 6 + 64 * d + 2 * (d + d_s + 6 * d_e))


def test_moe_saturates_at_all_experts():
    big = moe_io_elements(V2, 10**6, 6, 64)
    expert_part = big - 3 * V2.d_s * V2.d - 64 * V2.d - 2 * 10**6 * (V2.d + V2.d_s + 6 * V2.d_e)
    assert expert_part == pytest.approx(3 * V2.d_e * V2.d * 64, rel=1e-9)


def test_moe_reduces_to_dense_ffn():
    dense = V2.replace(n_e=1, n_a=1, d_e=1, d_s=4096)
    for T in (1, 7, 300):
        m = moe_layer_estimate(dense, T, 1, 1, A800)
        f = ffn_estimate(RooflineQuery(dense.d, dense.d_s + dense.d_e, T), A800)
        assert m.flops == f.flops


def test_moe_knee_bigger_than_dense_knee():
    k = moe_knee(V2, 6, 64, A800)
    assert k is not None and k > knee_length(V2.d, V2.d_s, A800)


def test_moe_rejects_infeasible_active_count():
    with pytest.raises(RooflineError):
        moe_layer_estimate(V2, 4, 7, 6, A800)


def test_popularity_skew_reduces_io():
    uniform = moe_layer_estimate(V2, 32, 6, 64, A800)
    p = [0.5 / 6] * 6 + [0.5 / 58] * 58
    skewed = moe_layer_estimate(V2, 32, 6, 64, A800, popularity=p)
    assert skewed.io_bytes < uniform.io_bytes
