"""Roofline cost model for dense GLU FFNs and fine-grained MoE layers.

I/O is counted in elements (weights plus input/output activations) and only
converted to bytes at the latency boundary. Latency is
``max(io_bytes / mem_bw, flops / peak_flops)``; ties are reported as
compute-bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .config import HardwareProfile, ModelConfig
from .routing import expected_distinct_experts, expected_distinct_skewed, inclusion_from_popularity


class RooflineError(ValueError):
    pass


@dataclass(frozen=True)
class RooflineQuery:
    d: int
    d_i: int
    L: int

    def __post_init__(self):
        if min(self.d, self.d_i, self.L) < 1:
            raise RooflineError(f"d, d_i, L must all be >= 1, got {self}")


@dataclass(frozen=True)
class RooflineEstimate:
    io_elements: float
    io_bytes: float
    flops: float
    ai_elements: float
    time_s: float
    bound: str  # "memory" or "compute"


def ffn_io(q: RooflineQuery) -> int:
    return 3 * q.d_i * q.d + 2 * q.L * (q.d + q.d_i)


def ffn_flops(q: RooflineQuery) -> int:
    return 6 * q.L * q.d_i * q.d


def arithmetic_intensity(q: RooflineQuery) -> float:
    return ffn_flops(q) / ffn_io(q)


def ai_limit(d: int, d_i: int) -> float:
    """Arithmetic intensity as L grows without bound."""
    return 3 * d_i * d / (d_i + d)


def latency(io_bytes: float, flops: float, hw: HardwareProfile, overhead_s: float = 0.0,
            io_elements: Optional[float] = None) -> RooflineEstimate:
    mem_t = io_bytes / hw.mem_bw
    comp_t = flops / hw.peak_flops
    bound = "compute" if comp_t >= mem_t else "memory"
    io_el = io_bytes if io_elements is None else io_elements
    return RooflineEstimate(
        io_elements=io_el,
        io_bytes=io_bytes,
        flops=flops,
        ai_elements=flops / io_el if io_el else math.inf,
        time_s=max(mem_t, comp_t) + overhead_s,
        bound=bound,
    )


def ffn_estimate(q: RooflineQuery, hw: HardwareProfile, bytes_per_element: int = 2,
                 overhead_s: float = 0.0) -> RooflineEstimate:
    io = ffn_io(q)
    return latency(io * bytes_per_element, ffn_flops(q), hw, overhead_s, io_elements=io)


def knee_length(d: int, d_i: int, hw: HardwareProfile, bytes_per_element: int = 2) -> Optional[int]:
    """Smallest L at which FFN compute time reaches memory time; None if never."""
    b_over_bw = bytes_per_element / hw.mem_bw
    per_token = 6 * d_i * d / hw.peak_flops - 2 * (d + d_i) * b_over_bw
    if per_token <= 0:
        return None
    L = max(1, math.ceil(3 * d_i * d * b_over_bw / per_token))
    # guard the float ceiling with the exact comparison used by latency()
    while L > 1 and _ffn_compute_bound(d, d_i, L - 1, hw, bytes_per_element):
        L -= 1
    while not _ffn_compute_bound(d, d_i, L, hw, bytes_per_element):
        L += 1
    return L


def knee_length_approx(hw: HardwareProfile, bytes_per_element: int = 2) -> float:
    """Large-dimension limit of :func:`knee_length`."""
    return hw.peak_flops * bytes_per_element / (2 * hw.mem_bw)


def _ffn_compute_bound(d, d_i, L, hw, b) -> bool:
    return ffn_estimate(RooflineQuery(d, d_i, L), hw, b).bound == "compute"


def moe_io_elements(config: ModelConfig, T: int, n_a_eff: int, n_e_eff: int,
                    distinct: Optional[float] = None) -> float:
    if distinct is None:
        distinct = expected_distinct_experts(n_e_eff, n_a_eff, T)
    d, d_e, d_s = config.d, config.d_e, config.d_s
    return (3 * d_s * d
            + 3 * d_e * d * distinct
            + n_e_eff * d
            + 2 * T * (d + d_s + n_a_eff * d_e))


def moe_flops(config: ModelConfig, T: int, n_a_eff: int) -> int:
    return 6 * T * (config.d_s + n_a_eff * config.d_e) * config.d


def moe_layer_estimate(
    config: ModelConfig,
    T: int,
    n_a_eff: int,
    n_e_eff: int,
    hw: HardwareProfile,
    popularity: Optional[Sequence[float]] = None,
    distinct: Optional[float] = None,
    overhead_s: float = 0.0,
) -> RooflineEstimate:
    """Roofline estimate of one MoE layer processing T tokens.

    Routed-expert weight traffic scales with the expected number of distinct
    experts the batch touches (uniform routing unless ``popularity`` is
    given); ``distinct`` overrides that expectation with a sampled value.
    """
    if not 1 <= n_a_eff <= n_e_eff <= config.n_e:
        raise RooflineError(f"need 1 <= n_a_eff <= n_e_eff <= n_e, got {n_a_eff}, {n_e_eff}")
    if T < 1:
        raise RooflineError("T must be >= 1")
    if distinct is None and popularity is not None:
        if len(popularity) != n_e_eff:
            raise RooflineError("popularity must have one entry per retained expert")
        distinct = expected_distinct_skewed(inclusion_from_popularity(popularity, n_a_eff), T)
    io = moe_io_elements(config, T, n_a_eff, n_e_eff, distinct)
    return latency(io * config.bytes_per_element, moe_flops(config, T, n_a_eff), hw,
                   overhead_s, io_elements=io)


def moe_knee(config: ModelConfig, n_a_eff: int, n_e_eff: int, hw: HardwareProfile,
             T_max: int = 1 << 20) -> Optional[int]:
    """Smallest T at which the MoE layer becomes compute-bound (binary search)."""
    def cb(T):
        return moe_layer_estimate(config, T, n_a_eff, n_e_eff, hw).bound == "compute"
    if not cb(T_max):
        return None
    lo, hi = 0, T_max  # cb(hi) holds; cb(lo) treated as False
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cb(mid):
            hi = mid
        else:
            lo = mid
    return hi
