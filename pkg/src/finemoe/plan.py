"""TP vs EP communication report for the ``comm-plan`` command."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .comm import (ParallelConfig, comm_time, ep_comm_volume, group_limited_ep_volume,
                   tp_comm_volume)
from .config import HardwareProfile, ModelConfig

PLAN_COLUMNS = ("scheme", "placement", "volume_bytes", "time_s", "ratio_vs_tp_intra")


@dataclass(frozen=True)
class PlanRow:
    scheme: str
    placement: str
    volume_bytes: float
    time_s: float
    ratio_vs_tp_intra: float


def cmd_comm_plan(model: ModelConfig, hw: HardwareProfile, n_d: int, L: int,
                  groups_touched: Optional[int] = None, n_a: Optional[int] = None) -> list:
    """Rows for TP and EP within and across nodes, plus group-limited EP.

    ``ratio_vs_tp_intra`` is the time ratio against intra-node TP.
    """
    if n_d < 2:
        raise ValueError("comm-plan needs at least 2 devices")
    n_a = model.n_a if n_a is None else n_a
    if groups_touched is None:
        groups_touched = model.group_config.topk_group if model.group_config else min(n_a, n_d)
    base = dict(n_d=n_d, L=L, d=model.d, n_a=n_a, bytes_per_element=model.bytes_per_element)
    specs = [
        ("tp", "intra_node", tp_comm_volume),
        ("tp", "inter_node", tp_comm_volume),
        ("ep", "intra_node", ep_comm_volume),
        ("ep", "inter_node", ep_comm_volume),
        ("group_limited_ep", "inter_node", lambda c: group_limited_ep_volume(c, groups_touched)),
    ]
    raw = []
    for scheme, placement, volume_fn in specs:
        cfg = ParallelConfig(placement=placement, **base)
        vol = volume_fn(cfg)
        raw.append((scheme, placement, vol * cfg.bytes_per_element, comm_time(vol, cfg, hw)))
    t_ref = raw[0][3]
    return [PlanRow(s, p, v, t, t / t_ref) for s, p, v, t in raw]
