"""Per-layer active-expert schedules from ``(b, h, e, p)`` tuples.

Layer 1 gets ``b`` experts, layer ``p`` gets ``h`` and the last layer ``e``;
layers in between are linearly interpolated and rounded half away from zero.
Layer positions are 1-based over the MoE layers only.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Union


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class SkipTuple:
    b: int
    h: int
    e: int
    p: int

    @classmethod
    def parse(cls, text: str) -> "SkipTuple":
        parts = text.replace("(", "").replace(")", "").split(",")
        try:
            b, h, e, p = (int(x) for x in parts)
        except ValueError:
            raise ScheduleError(f"expected 'b,h,e,p', got {text!r}") from None
        return cls(b, h, e, p)

    def __str__(self):
        return f"{self.b},{self.h},{self.e},{self.p}"


@dataclass(frozen=True)
class SkipSchedule:
    n_a_per_layer: tuple
    source: Union[SkipTuple, str] = "uniform"

    @classmethod
    def uniform(cls, n_a: int, n_layers: int) -> "SkipSchedule":
        if n_a < 1 or n_layers < 1:
            raise ScheduleError("uniform schedule needs n_a >= 1 and n_layers >= 1")
        return cls(tuple([n_a] * n_layers), "uniform")

    def __len__(self):
        return len(self.n_a_per_layer)

    def to_csv(self) -> str:
        rows = ["layer_index,n_a"] + [f"{i},{n}" for i, n in enumerate(self.n_a_per_layer, 1)]
        return "\n".join(rows) + "\n"


def _round_half_away(x: Fraction) -> int:
    n = math.floor(abs(x) + Fraction(1, 2))
    return n if x >= 0 else -n


def build_schedule(t: SkipTuple, N: int, n_e: Optional[int] = None) -> SkipSchedule:
    if N < 1:
        raise ScheduleError("N must be >= 1")
    if not 1 <= t.p <= N:
        raise ScheduleError(f"p={t.p} outside [1, N={N}]")
    for name in ("b", "h", "e"):
        v = getattr(t, name)
        if v < 1 or (n_e is not None and v > n_e):
            raise ScheduleError(f"{name}={v} outside [1, n_e={n_e}]")
    if t.p == 1 and t.b != t.h:
        warnings.warn(f"p=1: layer 1 takes h={t.h}, b={t.b} is ignored", stacklevel=2)
    if t.p == N and N > 1 and t.e != t.h:
        warnings.warn(f"p=N: layer {N} takes h={t.h}, e={t.e} is ignored", stacklevel=2)

    b = t.h if t.p == 1 else t.b
    out = []
    for i in range(1, N + 1):
        if i == t.p:
            v = Fraction(t.h)
        elif i < t.p:
            v = b + Fraction(t.h - b) * (i - 1) / (t.p - 1)
        else:
            v = t.h + Fraction(t.e - t.h) * (i - t.p) / (N - t.p)
        n = _round_half_away(v)
        hi = n_e if n_e is not None else n
        out.append(min(max(n, 1), hi))
    return SkipSchedule(tuple(out), t)


def to_moe_position(p: int, n_layers_dense: int, index_space: str) -> int:
    """Map a tuple's p to a 1-based MoE-layer position."""
    if index_space == "moe":
        return p
    if index_space == "global":
        if p <= n_layers_dense:
            raise ScheduleError(f"global p={p} falls on a dense layer")
        return p - n_layers_dense
    raise ScheduleError(f"unknown index space {index_space!r}")


def schedule_for_model(t: SkipTuple, model, index_space: str = "moe") -> SkipSchedule:
    p = to_moe_position(t.p, model.n_layers_dense, index_space)
    sched = build_schedule(SkipTuple(t.b, t.h, t.e, p), model.n_moe_layers, model.n_e)
    return SkipSchedule(sched.n_a_per_layer, t)


def average_active(s: SkipSchedule) -> float:
    return sum(s.n_a_per_layer) / len(s.n_a_per_layer)


def shape_class(s: Union[SkipSchedule, Sequence[int]]) -> str:
    """Classify a schedule as constant/ascending/descending/peak/valley/mixed.

    Works on the realised sequence: flat steps are ignored and the remaining
    slope signs decide the shape.
    """
    seq = s.n_a_per_layer if isinstance(s, SkipSchedule) else tuple(s)
    signs = []
    for a, b in zip(seq, seq[1:]):
        if b != a:
            sgn = 1 if b > a else -1
            if not signs or signs[-1] != sgn:
                signs.append(sgn)
    if not signs:
        return "constant"
    if signs == [1]:
        return "ascending"
    if signs == [-1]:
        return "descending"
    if signs == [1, -1]:
        return "peak"
    if signs == [-1, 1]:
        return "valley"
    return "mixed"
