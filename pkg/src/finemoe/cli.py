"""Command-line entry point: ``finemoe <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 property-suite failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import warnings
from pathlib import Path

from scipy.stats import spearmanr

from . import __version__
from .config import (ConfigError, load_hardware_preset, load_model_preset,
                     compute_reduction_upper_bound)
from .fixtures import FixtureError, load_fixture
from .plan import PLAN_COLUMNS, cmd_comm_plan
from .pruning import STRATEGIES, PruneError, PruneMask, build_mask, mask_memory_savings
from .roofline import (RooflineQuery, ffn_estimate, knee_length, moe_layer_estimate)
from .routing import RoutingError, RoutingStats
from .schedule import (ScheduleError, SkipSchedule, SkipTuple, average_active,
                       schedule_for_model, shape_class)
from .scores import TASKS, aggregate_benchmark_scores
from .serving import (CSV_COLUMNS, SHAPE_CALIBRATION, ServingConfig, ServingError,
                      simulate_throughput)
from .verify import run_suite

ROOFLINE_COLUMNS = ("L", "io_bytes", "flops", "ai", "time_s", "time_per_token_us", "bound")
VALIDATION_ERRORS = (ConfigError, FixtureError, PruneError, RoutingError, ScheduleError,
                     ServingError, ValueError)


class UsageError(ValueError):
    pass


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def render(rows, columns, fmt: str, command: str) -> str:
    """Render dict rows as CSV (with a version header line) or JSON."""
    if fmt == "json":
        return json.dumps({"version": __version__, "command": command,
                           "rows": [{c: r[c] for c in columns} for r in rows]}, indent=1) + "\n"
    buf = io.StringIO()
    buf.write(f"# finemoe {__version__} {command}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def parse_range(text: str) -> range:
    try:
        if ":" in text:
            parts = [int(x) for x in text.split(":")]
            start, stop = parts[0], parts[1]
            step = parts[2] if len(parts) > 2 else 1
        else:
            start = stop = int(text)
            step = 1
    except ValueError:
        raise UsageError(f"bad range {text!r}; expected START:STOP[:STEP]") from None
    if start < 1 or stop < start or step < 1:
        raise UsageError(f"empty or invalid range {text!r}")
    return range(start, stop + 1, step)


def parse_int_list(text: str) -> list:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad integer list {text!r}") from None
    if not vals:
        raise UsageError("empty list")
    return vals


# ---------------------------------------------------------------------------
# commands


def cmd_roofline(model, hw, L_range: range, d_i=None) -> list:
    d_i = model.d_s if d_i is None else d_i
    knee = knee_length(model.d, d_i, hw, model.bytes_per_element)
    rows = []
    for L in L_range:
        f = ffn_estimate(RooflineQuery(model.d, d_i, L), hw, model.bytes_per_element)
        m = moe_layer_estimate(model, L, model.n_a, model.n_e, hw)
        rows.append({
            "L": L, "io_bytes": f.io_bytes, "flops": f.flops, "ai": f.ai_elements,
            "time_s": f.time_s, "time_per_token_us": f.time_s / L * 1e6, "bound": f.bound,
            "moe_io_bytes": m.io_bytes, "moe_flops": m.flops, "moe_ai": m.ai_elements,
            "moe_time_s": m.time_s, "moe_time_per_token_us": m.time_s / L * 1e6,
            "moe_bound": m.bound, "knee_L": knee,
        })
    return rows


ROOFLINE_ALL_COLUMNS = ROOFLINE_COLUMNS + (
    "moe_io_bytes", "moe_flops", "moe_ai", "moe_time_s", "moe_time_per_token_us", "moe_bound", "knee_L")


def cmd_schedule(tuple_text: str, model, index_space: str = "moe"):
    t = SkipTuple.parse(tuple_text)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        sched = schedule_for_model(t, model, index_space)
    avg = average_active(sched)
    base_flops = model.d_s + model.n_a * model.d_e
    summary = {
        "tuple": str(t),
        "index_space": index_space,
        "n_layers": len(sched),
        "average_active": avg,
        "shape_class": shape_class(sched),
        "compute_fraction": (model.d_s + avg * model.d_e) / base_flops,
        "compute_reduction_upper_bound": compute_reduction_upper_bound(model),
        "warnings": [str(w.message) for w in caught],
    }
    return sched, summary


def cmd_prune(model, strategy: str, keep: int, stats_file=None, seed=None):
    stats = RoutingStats.from_json(Path(stats_file).read_text()) if stats_file else None
    mask = build_mask(strategy, keep, model.n_e, model.n_moe_layers, seed=seed, stats=stats,
                      n_a=model.n_a)
    savings = mask_memory_savings(mask, model)
    return mask, {"strategy": strategy, "keep": keep, "n_e": model.n_e,
                  "memory_savings_bytes": savings, "memory_savings_gib": savings / 2**30}


FIXTURE_COLUMNS = {"table9": "na6", "table13": "ne64", "v3_skip_throughput": "na8"}


def compare_with_fixture(rows, fixture_spec: str) -> dict:
    """Spearman rank correlation of modeled vs fixture throughput over concurrency."""
    source, _, column = fixture_spec.partition(":")
    table = load_fixture(source)
    column = column or FIXTURE_COLUMNS.get(source)
    if "concurrency" not in table.columns or column not in table.columns:
        raise UsageError(f"fixture {source!r} has no concurrency/{column} columns")
    ref = {r["concurrency"]: r[column] for i, r in enumerate(table.rows) if i not in table.anomalies}
    pairs = [(r["tokens_per_second"], ref[r["concurrency"]]) for r in rows if r["concurrency"] in ref]
    if len(pairs) < 3:
        raise UsageError("need at least 3 concurrencies shared with the fixture")
    rho = spearmanr([p[0] for p in pairs], [p[1] for p in pairs]).statistic
    return {"fixture": source, "column": column, "n": len(pairs), "spearman": float(rho)}


def cmd_simulate(model, hw, concurrencies, schedule=None, mask=None, input_tokens=1024,
                 output_tokens=1024, calibration=SHAPE_CALIBRATION, base_schedule=None):
    rows = []
    for C in concurrencies:
        sc = ServingConfig(C, input_tokens, output_tokens, schedule=schedule, mask=mask, **calibration)
        rep = simulate_throughput(model, hw, sc)
        base = simulate_throughput(model, hw, sc.replace(schedule=base_schedule, mask=None))
        rows.append({
            "concurrency": C, "input_tokens": input_tokens, "output_tokens": output_tokens,
            "avg_n_a": rep.avg_n_a, "n_e_eff": rep.n_e_eff,
            "tokens_per_second": rep.tokens_per_second,
            "speedup_vs_base": rep.tokens_per_second / base.tokens_per_second,
            "bound_fraction_compute": rep.bound_fraction_compute,
        })
    return rows


def cmd_verify(seed: int = 0, weights=None, rounds: int = 3) -> list:
    return run_suite(seed, rounds=rounds, weights=weights)


def _read_score_rows(path: str) -> list:
    if path.startswith("fixture:"):
        table = load_fixture(path.split(":", 1)[1])
        return table.rows
    with open(path, newline="") as fh:
        return [{k: (v if k not in TASKS + ("avg",) else float(v)) for k, v in r.items()}
                for r in csv.DictReader(line for line in fh if not line.startswith("#"))]


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="finemoe", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", default="v2-lite", help="preset name or model config file")
    common.add_argument("--hw", default="a800", help="preset name or hardware config file")
    common.add_argument("--out", help="write the report here instead of stdout")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("roofline", parents=[common], help="FFN and MoE roofline sweep over L")
    r.add_argument("--range", dest="L_range", default="1:4096", help="START:STOP[:STEP], inclusive")
    r.add_argument("--d-i", type=int, help="dense FFN intermediate size (default: d_s)")

    s = sub.add_parser("schedule", parents=[common], help="expand a b,h,e,p skip tuple")
    s.add_argument("tuple", help="b,h,e,p")
    s.add_argument("--index-space", choices=("moe", "global"), default="moe")

    pr = sub.add_parser("prune", parents=[common], help="build an expert prune mask")
    pr.add_argument("--strategy", choices=STRATEGIES, required=True)
    pr.add_argument("--keep", type=int, required=True)
    pr.add_argument("--stats", help="routing stats JSON (activate_count / soft_count)")

    sm = sub.add_parser("simulate", parents=[common], help="serving throughput sweep")
    sm.add_argument("--concurrency", default="2,4,8,16,32,48,64,96,128,256,384,512,768")
    sm.add_argument("--schedule", help="b,h,e,p tuple or a single integer for a uniform n_a")
    sm.add_argument("--index-space", choices=("moe", "global"), default="moe")
    sm.add_argument("--mask", help="prune mask JSON from 'finemoe prune'")
    sm.add_argument("--input-tokens", type=int, default=1024)
    sm.add_argument("--output-tokens", type=int, default=1024)
    sm.add_argument("--compare", help="fixture id[:column] for a rank-correlation check")
    sm.add_argument("--uncalibrated", action="store_true",
                    help="nominal peak compute, no KV traffic or step overhead")

    v = sub.add_parser("verify", parents=[common], help="run the property suite")
    v.add_argument("--weights", help="toy weight dump to check as well")
    v.add_argument("--rounds", type=int, default=3)

    c = sub.add_parser("comm-plan", parents=[common], help="TP vs EP communication report")
    c.add_argument("--n-d", type=int, default=8)
    c.add_argument("--tokens", type=int, default=1024)
    c.add_argument("--n-a", type=int, help="override active experts per token")
    c.add_argument("--groups-touched", type=int)

    a = sub.add_parser("aggregate", parents=[common], help="mean benchmark score and margin over 36")
    a.add_argument("scores", help="CSV with task columns, or fixture:<id>")
    return p


def _schedule_arg(text, model, index_space):
    if text is None:
        return None
    if "," not in text:
        return SkipSchedule.uniform(int(text), model.n_moe_layers)
    return schedule_for_model(SkipTuple.parse(text), model, index_space)


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _run(args) -> int:
    model = load_model_preset(args.model)
    hw = load_hardware_preset(args.hw)

    if args.command == "roofline":
        rows = cmd_roofline(model, hw, parse_range(args.L_range), args.d_i)
        _emit(render(rows, ROOFLINE_ALL_COLUMNS, args.format, "roofline"), args.out)

    elif args.command == "schedule":
        sched, summary = cmd_schedule(args.tuple, model, args.index_space)
        for w in summary["warnings"]:
            print(f"warning: {w}", file=sys.stderr)
        if args.format == "json":
            _emit(json.dumps({**summary, "n_a_per_layer": list(sched.n_a_per_layer)}, indent=1) + "\n",
                  args.out)
        else:
            _emit(sched.to_csv(), args.out)
            print(f"average_active={summary['average_active']:.4f} shape={summary['shape_class']} "
                  f"compute_fraction={summary['compute_fraction']:.4f}", file=sys.stderr)

    elif args.command == "prune":
        mask, summary = cmd_prune(model, args.strategy, args.keep, args.stats,
                                  args.seed if args.strategy == "random" else None)
        _emit(mask.to_json(), args.out)
        print(json.dumps(summary), file=sys.stderr)

    elif args.command == "simulate":
        sched = _schedule_arg(args.schedule, model, args.index_space)
        mask = PruneMask.from_json(Path(args.mask).read_text()) if args.mask else None
        calib = {} if args.uncalibrated else SHAPE_CALIBRATION
        rows = cmd_simulate(model, hw, parse_int_list(args.concurrency), sched, mask,
                            args.input_tokens, args.output_tokens, calib)
        _emit(render(rows, CSV_COLUMNS, args.format, "simulate"), args.out)
        if args.compare:
            print(json.dumps(compare_with_fixture(rows, args.compare)), file=sys.stderr)

    elif args.command == "verify":
        results = cmd_verify(args.seed, args.weights, args.rounds)
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else ""))
        failed = [r for r in results if not r[1]]
        print(f"{len(results) - len(failed)}/{len(results)} properties passed")
        return 2 if failed else 0

    elif args.command == "comm-plan":
        rows = cmd_comm_plan(model, hw, args.n_d, args.tokens, args.groups_touched, args.n_a)
        dict_rows = [{"n_d": args.n_d, **r.__dict__} for r in rows]
        _emit(render(dict_rows, ("n_d",) + PLAN_COLUMNS, args.format, "comm-plan"), args.out)

    elif args.command == "aggregate":
        rows = _read_score_rows(args.scores)
        agg = aggregate_benchmark_scores(rows)
        out = []
        for src, a in zip(rows, agg):
            label = {k: v for k, v in src.items() if k not in TASKS and k != "avg"}
            out.append({"label": " ".join(f"{k}={v}" for k, v in label.items()),
                        "mean": a["mean"], "delta_vs_36": a["delta_vs_baseline"],
                        "printed_avg": a.get("printed_avg"), "mismatch": a.get("mismatch")})
        _emit(render(out, ("label", "mean", "delta_vs_36", "printed_avg", "mismatch"),
                     args.format, "aggregate"), args.out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except (UsageError, *VALIDATION_ERRORS, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
