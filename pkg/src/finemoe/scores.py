"""Benchmark score aggregation (mean accuracy and margin over chance)."""

from __future__ import annotations

from typing import Mapping, Sequence

TASKS = ("arc_c", "arc_e", "boolq", "obqa", "rte", "winogrande")
CHANCE_BASELINE = 36.0


def aggregate_benchmark_scores(rows: Sequence[Mapping], tasks: Sequence[str] = TASKS) -> list:
    """Mean over ``tasks`` for each row and its delta over the chance baseline.

    Rows carrying a printed ``avg`` also get ``printed_avg`` and a
    ``mismatch`` flag when the recomputed mean disagrees by more than the
    rounding of the one-decimal inputs allows (0.1).
    """
    out = []
    for row in rows:
        missing = [t for t in tasks if t not in row]
        if missing:
            raise ValueError(f"row lacks task scores: {', '.join(missing)}")
        mean = sum(float(row[t]) for t in tasks) / len(tasks)
        rec = {"mean": mean, "delta_vs_baseline": mean - CHANCE_BASELINE}
        if "avg" in row:
            rec["printed_avg"] = float(row["avg"])
            rec["mismatch"] = abs(mean - float(row["avg"])) > 0.1 + 1e-9
        out.append(rec)
    return out
