import pytest

from finemoe.comm import (CommError, ParallelConfig, comm_time, ep_comm_volume, group_limited_ep_volume,
                          link_bandwidth, tp_comm_volume)
from finemoe.config import HARDWARE_PRESETS, MODEL_PRESETS
from finemoe.plan import PLAN_COLUMNS, cmd_comm_plan

A800 = HARDWARE_PRESETS["a800"]


def cfg(**kw):
    base = dict(n_d=8, placement="intra_node", L=1024, d=2048, n_a=2)
    base.update(kw)
    return ParallelConfig(**base)


def test_volumes():
    assert tp_comm_volume(cfg()) == 29_360_128
    assert tp_comm_volume(cfg(n_d=1)) == 0
    assert ep_comm_volume(cfg()) == 8_388_608
    assert ep_comm_volume(cfg(n_a=0)) == 0


def test_group_limited():
    c = cfg(n_a=8)
    assert group_limited_ep_volume(c, 2) == 2 * 2 * 1024 * 2048
    assert group_limited_ep_volume(c, 1) == 2 * 1024 * 2048
    assert group_limited_ep_volume(cfg(), 2) == ep_comm_volume(cfg())
    with pytest.raises(CommError):
        group_limited_ep_volume(c, 9)


def test_times_and_ratios():
    assert comm_time(0, cfg(), A800) == 0
    assert link_bandwidth("inter_node", A800) / link_bandwidth("intra_node", A800) == 0.3125
    ratio = comm_time(ep_comm_volume(cfg()), cfg(placement="inter_node"), A800) / \
        comm_time(tp_comm_volume(cfg()), cfg(), A800)
    assert ratio == pytest.approx(2 / 7 * 160 / 50)
    assert round(ratio, 3) == 0.914


def test_bad_placement():
    with pytest.raises(CommError):
        cfg(placement="rack")


def test_comm_plan_rows():
    rows = cmd_comm_plan(MODEL_PRESETS["v2-lite"], A800, 8, 1024, n_a=2)
    assert [(r.scheme, r.placement) for r in rows] == [
        ("tp", "intra_node"), ("tp", "inter_node"), ("ep", "intra_node"), ("ep", "inter_node"),
        ("group_limited_ep", "inter_node")]
    assert rows[0].ratio_vs_tp_intra == 1.0
    assert rows[2].ratio_vs_tp_intra == pytest.approx(2 / 7)
    assert rows[3].ratio_vs_tp_intra == pytest.approx(0.9142857)
    assert set(PLAN_COLUMNS) <= set(rows[0].__dict__)


def test_comm_plan_v3_group_limit():
    rows = cmd_comm_plan(MODEL_PRESETS["v3"], HARDWARE_PRESETS["h200"], 8, 1024)
    ep, gl = rows[3], rows[4]
    assert gl.volume_bytes * 4 == ep.volume_bytes  # 2 groups vs 8 active experts


def test_comm_plan_needs_two_devices():
    with pytest.raises(ValueError):
        cmd_comm_plan(MODEL_PRESETS["v2-lite"], A800, 1, 1024)
