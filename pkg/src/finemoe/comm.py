"""Tensor- vs expert-parallel communication volume and link time.

Volumes are element counts at bound level: the TP all-reduce lower bound
``2 (n_d - 1) L d`` and the EP dispatch/combine worst case ``2 n_a L d``.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import HardwareProfile

PLACEMENTS = ("intra_node", "inter_node")


class CommError(ValueError):
    pass


@dataclass(frozen=True)
class ParallelConfig:
    n_d: int
    placement: str
    L: int
    d: int
    n_a: int
    bytes_per_element: int = 2

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise CommError(f"placement must be one of {PLACEMENTS}")
        if self.L < 1 or self.d < 1:
            raise CommError("L and d must be >= 1")
        if self.n_d < 1 or self.n_a < 0:
            raise CommError("n_d must be >= 1 and n_a >= 0")


def tp_comm_volume(cfg: ParallelConfig) -> int:
    return 2 * (cfg.n_d - 1) * cfg.L * cfg.d


def ep_comm_volume(cfg: ParallelConfig) -> int:
    return 2 * cfg.n_a * cfg.L * cfg.d


def group_limited_ep_volume(cfg: ParallelConfig, groups_touched: int) -> int:
    if not 1 <= groups_touched <= cfg.n_d:
        raise CommError(f"groups_touched={groups_touched} outside [1, n_d={cfg.n_d}]")
    return 2 * groups_touched * cfg.L * cfg.d


def link_bandwidth(placement: str, hw: HardwareProfile) -> float:
    if placement not in PLACEMENTS:
        raise CommError(f"placement must be one of {PLACEMENTS}")
    return hw.intra_node_bw if placement == "intra_node" else hw.inter_node_bw


def comm_time(volume: float, cfg: ParallelConfig, hw: HardwareProfile) -> float:
    bw = link_bandwidth(cfg.placement, hw)
    if bw <= 0:
        raise CommError("link bandwidth must be positive")
    return volume * cfg.bytes_per_element / bw
