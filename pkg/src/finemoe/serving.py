"""Lockstep continuous-batching throughput model.

All ``C`` requests advance together: one prefill step over ``C * input``
tokens, then ``output`` decode steps over ``C`` tokens each. Every step sums
per-layer roofline costs (dense FFN layers, MoE layers with per-layer active
counts from a skip schedule and expert count from a prune mask), a linear
KV-cache read term and a fixed per-step overhead.

Absolute tokens/s are not meant to match any measured system. The
``compute_efficiency`` factor scales the usable fraction of peak FLOP/s the
engine achieves; :data:`SHAPE_CALIBRATION` holds the values used to
reproduce measured curve shapes.
"""

from __future__ import annotations

import dataclasses
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .config import HardwareProfile, ModelConfig
from .pruning import PruneMask
from .roofline import RooflineQuery, ffn_estimate, moe_layer_estimate
from .routing import monte_carlo_distinct
from .schedule import SkipSchedule, average_active

# Engine-level calibration for DeepSeek-V2-Lite-class models: MLA caches a
# 576-element latent per token per layer (1152 B in bf16).
SHAPE_CALIBRATION = {
    "overhead_per_step": 2e-3,
    "attention_coeff": 1152.0,
    "compute_efficiency": 0.3,
}

CSV_COLUMNS = ("concurrency", "input_tokens", "output_tokens", "avg_n_a", "n_e_eff",
               "tokens_per_second", "speedup_vs_base", "bound_fraction_compute")


class ServingError(ValueError):
    pass


@dataclass(frozen=True)
class ServingConfig:
    concurrency: int
    input_tokens: int = 1024
    output_tokens: int = 1024
    schedule: Optional[SkipSchedule] = None
    mask: Optional[PruneMask] = None
    overhead_per_step: float = 0.0
    attention_coeff: float = 0.0  # bytes per context token per layer
    compute_efficiency: float = 1.0
    distinct_mode: str = "expected"  # or "sampled"
    seed: int = 0

    def __post_init__(self):
        if min(self.concurrency, self.input_tokens, self.output_tokens) < 1:
            raise ServingError("concurrency, input_tokens and output_tokens must be >= 1")
        if self.overhead_per_step < 0 or self.attention_coeff < 0:
            raise ServingError("overhead_per_step and attention_coeff must be >= 0")
        if not 0 < self.compute_efficiency <= 1:
            raise ServingError("compute_efficiency must lie in (0, 1]")
        if self.distinct_mode not in ("expected", "sampled"):
            raise ServingError(f"unknown distinct_mode {self.distinct_mode!r}")

    def replace(self, **changes) -> "ServingConfig":
        return dataclasses.replace(self, **changes)


def calibrated(concurrency: int, **changes) -> ServingConfig:
    return ServingConfig(concurrency, **{**SHAPE_CALIBRATION, **changes})


@dataclass
class ThroughputReport:
    concurrency: int
    input_tokens: int
    output_tokens: int
    avg_n_a: float
    n_e_eff: int
    total_tokens: int
    prefill_time: float
    decode_step_times: tuple
    bound_histogram: dict = field(default_factory=dict)

    @property
    def decode_time(self) -> float:
        return sum(self.decode_step_times)

    @property
    def total_time(self) -> float:
        return self.prefill_time + self.decode_time

    @property
    def tokens_per_second(self) -> float:
        return self.total_tokens / self.total_time

    @property
    def bound_fraction_compute(self) -> float:
        total = sum(self.bound_histogram.values())
        return self.bound_histogram.get("compute", 0) / total if total else 0.0


def _layer_plan(model: ModelConfig, sc: ServingConfig):
    """Per-MoE-layer active counts and the retained expert count."""
    n_moe = model.n_moe_layers
    if sc.schedule is not None:
        if len(sc.schedule) != n_moe:
            raise ServingError(f"schedule has {len(sc.schedule)} layers, model has {n_moe} MoE layers")
        n_a = list(sc.schedule.n_a_per_layer)
    else:
        n_a = [model.n_a] * n_moe
    n_e_eff = model.n_e
    if sc.mask is not None:
        if sc.mask.n_e != model.n_e or sc.mask.n_layers != n_moe:
            raise ServingError("prune mask does not match the model's experts/layers")
        n_e_eff = sc.mask.keep
    if max(n_a) > n_e_eff or min(n_a) < 1:
        raise ServingError(f"active counts {min(n_a)}..{max(n_a)} infeasible with {n_e_eff} experts")
    return n_a, n_e_eff


def _effective_hw(hw: HardwareProfile, sc: ServingConfig) -> HardwareProfile:
    if sc.compute_efficiency == 1.0:
        return hw
    return hw.replace(peak_flops=hw.peak_flops * sc.compute_efficiency)


def _step_layers(model, hw, T, n_a, n_e_eff, distinct=None):
    """Time and bound labels of every layer for one step over T tokens."""
    est = []
    dense = ffn_estimate(RooflineQuery(model.d, model.d_s, T), hw, model.bytes_per_element)
    est += [dense] * model.n_layers_dense
    cache = {}
    for i, k in enumerate(n_a):
        if distinct is not None:
            est.append(moe_layer_estimate(model, T, k, n_e_eff, hw, distinct=distinct[i]))
        else:
            if k not in cache:
                cache[k] = moe_layer_estimate(model, T, k, n_e_eff, hw)
            est.append(cache[k])
    return est


def _tally(hist, estimates, times=1):
    for e in estimates:
        hist[e.bound] = hist.get(e.bound, 0) + times


def simulate_throughput(model: ModelConfig, hw: HardwareProfile, sc: ServingConfig) -> ThroughputReport:
    n_a, n_e_eff = _layer_plan(model, sc)
    hw_eff = _effective_hw(hw, sc)
    C, n_in, n_out = sc.concurrency, sc.input_tokens, sc.output_tokens
    hist = {}

    prefill = _step_layers(model, hw_eff, C * n_in, n_a, n_e_eff)
    _tally(hist, prefill)
    prefill_time = sum(e.time_s for e in prefill) + sc.overhead_per_step

    kv_per_ctx = sc.attention_coeff * C * model.n_layers_total / hw.mem_bw
    if sc.distinct_mode == "expected":
        decode = _step_layers(model, hw_eff, C, n_a, n_e_eff)
        _tally(hist, decode, n_out)
        layer_time = sum(e.time_s for e in decode)
        steps = tuple(layer_time + kv_per_ctx * (n_in + k) + sc.overhead_per_step for k in range(n_out))
    else:
        samples = [monte_carlo_distinct(n_e_eff, k, C, n_out, zlib.crc32(f"{sc.seed}:{i}".encode()))
                   for i, k in enumerate(n_a)]
        steps = []
        for step in range(n_out):
            decode = _step_layers(model, hw_eff, C, n_a, n_e_eff, [s[step] for s in samples])
            _tally(hist, decode)
            steps.append(sum(e.time_s for e in decode) + kv_per_ctx * (n_in + step) + sc.overhead_per_step)
        steps = tuple(steps)

    return ThroughputReport(
        concurrency=C,
        input_tokens=n_in,
        output_tokens=n_out,
        avg_n_a=sum(n_a) / len(n_a),
        n_e_eff=n_e_eff,
        total_tokens=C * (n_in + n_out),
        prefill_time=prefill_time,
        decode_step_times=steps,
        bound_histogram=hist,
    )


def speedup_curve(
    model: ModelConfig,
    hw: HardwareProfile,
    base: ServingConfig,
    variants: Mapping[str, ServingConfig],
    concurrencies: Sequence[int],
    workers: int = 4,
) -> list:
    """Throughput of each variant relative to ``base`` at every concurrency.

    Variants may differ from the base only in schedule and mask; their
    concurrency is replaced by each sweep value.
    """
    for name, v in variants.items():
        if v.replace(schedule=base.schedule, mask=base.mask, concurrency=base.concurrency) != base:
            raise ServingError(f"variant {name!r} differs from base beyond schedule/mask")
    jobs = [(C, None, base.replace(concurrency=C)) for C in concurrencies]
    jobs += [(C, name, v.replace(concurrency=C)) for name, v in variants.items() for C in concurrencies]
    with ThreadPoolExecutor(workers) as pool:
        reports = list(pool.map(lambda j: simulate_throughput(model, hw, j[2]), jobs))
    base_tps = {j[0]: r.tokens_per_second for j, r in zip(jobs, reports) if j[1] is None}
    rows = []
    for (C, name, _), rep in zip(jobs, reports):
        rows.append({
            "concurrency": C,
            "variant": name or "base",
            "input_tokens": rep.input_tokens,
            "output_tokens": rep.output_tokens,
            "avg_n_a": rep.avg_n_a,
            "n_e_eff": rep.n_e_eff,
            "tokens_per_second": rep.tokens_per_second,
            "speedup_vs_base": rep.tokens_per_second / base_tps[C],
            "bound_fraction_compute": rep.bound_fraction_compute,
        })
    return rows


def decode_compute_bound(model: ModelConfig, hw: HardwareProfile, sc: ServingConfig) -> bool:
    """Whether a decode step at ``sc.concurrency`` is compute-bound in most layers."""
    n_a, n_e_eff = _layer_plan(model, sc)
    est = _step_layers(model, _effective_hw(hw, sc), sc.concurrency, n_a, n_e_eff)
    return 2 * sum(e.bound == "compute" for e in est) > len(est)


def knee_concurrency(model: ModelConfig, hw: HardwareProfile, template: ServingConfig,
                     c_max: int = 1 << 20) -> Optional[int]:
    """Smallest concurrency whose decode steps are compute-bound; None if beyond ``c_max``."""
    cb = lambda C: decode_compute_bound(model, hw, template.replace(concurrency=C))
    hi = 1
    while not cb(hi):
        hi *= 2
        if hi > c_max:
            return None
    lo = hi // 2
    if lo == 0:
        return 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cb(mid):
            hi = mid
        else:
            lo = mid
    return hi
