import csv
import json
import subprocess
import sys

import pytest

from finemoe import __version__
from finemoe.cli import main, parse_range, UsageError
from finemoe.config import HARDWARE_PRESETS, MODEL_PRESETS, model_to_text
from finemoe.roofline import knee_length
from finemoe.routing import RouterConfig, accumulate_stats, route


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def csv_rows(text):
    lines = text.splitlines()
    assert lines[0].startswith(f"# finemoe {__version__}")
    return list(csv.DictReader(lines[1:]))


def test_roofline_rows_and_knee(capsys):
    code, out, _ = run(capsys, "roofline", "--range", "1:4096")
    rows = csv_rows(out)
    assert code == 0 and len(rows) == 4096
    v2 = MODEL_PRESETS["v2-lite"]
    assert int(rows[0]["knee_L"]) == knee_length(v2.d, v2.d_s, HARDWARE_PRESETS["a800"]) == 172
    assert rows[170]["bound"] == "memory" and rows[171]["bound"] == "compute"
    assert int(rows[0]["io_bytes"]) == 2 * 67_265_920


def test_roofline_empty_range_is_usage_error(capsys):
    code, _, err = run(capsys, "roofline", "--range", "10:5")
    assert code == 1 and "range" in err
    with pytest.raises(UsageError):
        parse_range("a:b")
    assert list(parse_range("3")) == [3]


def test_schedule_outputs(capsys):
    code, out, err = run(capsys, "schedule", "2,2,2,6")
    assert code == 0 and "shape=constant" in err
    assert out.splitlines()[1:] == [f"{i},2" for i in range(1, 27)]
    code, out, err = run(capsys, "schedule", "2,6,2,11", "--format", "json")
    doc = json.loads(out)
    assert doc["shape_class"] == "peak" and len(doc["n_a_per_layer"]) == 26
    code, out, _ = run(capsys, "schedule", "2,5,8,10", "--model", "v3", "--index-space", "global",
                       "--format", "json")
    assert code == 0 and json.loads(out)["n_layers"] == 58


def test_schedule_warning_and_bad_tuple(capsys):
    code, _, err = run(capsys, "schedule", "2,4,4,1")
    assert code == 0 and "warning" in err
    code, _, err = run(capsys, "schedule", "2,4,4,99")
    assert code == 1 and "error" in err


def test_prune_even_golden(capsys, tmp_path):
    out_file = tmp_path / "m.json"
    code, _, err = run(capsys, "prune", "--strategy", "even", "--keep", "32", "--out", str(out_file))
    assert code == 0
    doc = json.loads(out_file.read_text())
    assert doc["layers"]["0"] == list(range(0, 64, 2)) and len(doc["layers"]) == 26
    assert json.loads(err)["memory_savings_bytes"] == 14_394_851_328


def test_prune_soft_count_needs_stats(capsys, tmp_path):
    code, _, err = run(capsys, "prune", "--strategy", "soft_count", "--keep", "32")
    assert code == 1 and "stats" in err
    cfg = RouterConfig("softmax", True, 64, 6)
    items = [(layer, route([(i * 7 + layer) % 64 for i in range(64)], cfg), None) for layer in range(26)]
    stats_path = tmp_path / "stats.json"
    stats_path.write_text(accumulate_stats(items, 64, 6).to_json())
    code, out, _ = run(capsys, "prune", "--strategy", "soft_count", "--keep", "32", "--stats", str(stats_path))
    assert code == 0 and len(json.loads(out)["layers"]["3"]) == 32


def test_prune_random_reproducible(capsys):
    a = run(capsys, "prune", "--strategy", "random", "--keep", "16", "--seed", "4")[1]
    b = run(capsys, "prune", "--strategy", "random", "--keep", "16", "--seed", "4")[1]
    c = run(capsys, "prune", "--strategy", "random", "--keep", "16", "--seed", "5")[1]
    assert a == b != c


def test_simulate_compare_table9(capsys):
    code, out, err = run(capsys, "simulate", "--compare", "table9")
    assert code == 0
    report = json.loads(err)
    assert report["n"] == 13 and report["spearman"] >= 0.9
    rows = csv_rows(out)
    assert [int(r["concurrency"]) for r in rows][:3] == [2, 4, 8]


def test_simulate_schedule_and_mask(capsys, tmp_path):
    mask = tmp_path / "m.json"
    run(capsys, "prune", "--strategy", "first_half", "--keep", "32", "--out", str(mask))
    code, out, _ = run(capsys, "simulate", "--concurrency", "4,64", "--schedule", "2", "--mask", str(mask))
    rows = csv_rows(out)
    assert code == 0 and all(float(r["speedup_vs_base"]) > 1 for r in rows)
    assert rows[0]["avg_n_a"] == "2.0" and rows[0]["n_e_eff"] == "32"


def test_simulate_missing_fixture_is_error(capsys):
    code, _, err = run(capsys, "simulate", "--concurrency", "2,4,8", "--compare", "table42")
    assert code == 1 and "unknown fixture" in err


def test_simulate_byte_identical(capsys):
    a = run(capsys, "simulate", "--concurrency", "2,64,512", "--schedule", "2,6,2,11")[1]
    b = run(capsys, "simulate", "--concurrency", "2,64,512", "--schedule", "2,6,2,11")[1]
    assert a == b


def test_verify_exit_codes(capsys, tmp_path):
    code, out, _ = run(capsys, "verify", "--rounds", "1")
    assert code == 0 and "12/12 properties passed" in out
    bad = tmp_path / "w.bin"
    bad.write_bytes(b"TMOE" + b"\0" * 60)
    code, out, _ = run(capsys, "verify", "--rounds", "1", "--weights", str(bad))
    assert code == 2 and "FAIL weight-dump-integrity" in out


def test_comm_plan(capsys):
    code, out, _ = run(capsys, "comm-plan", "--n-a", "2")
    rows = csv_rows(out)
    assert code == 0 and len(rows) == 5
    assert float(rows[2]["ratio_vs_tp_intra"]) == pytest.approx(2 / 7)
    assert float(rows[3]["ratio_vs_tp_intra"]) == pytest.approx(0.9142857)


def test_aggregate(capsys, tmp_path):
    code, out, _ = run(capsys, "aggregate", "fixture:table3", "--format", "json")
    rows = json.loads(out)["rows"]
    assert code == 0 and rows[0]["printed_avg"] == 66.0 and rows[0]["mismatch"] is True
    path = tmp_path / "s.csv"
    path.write_text("name,arc_c,arc_e,boolq,obqa,rte,winogrande\nchance,36,36,36,36,36,36\n")
    code, out, _ = run(capsys, "aggregate", str(path))
    row = csv_rows(out)[0]
    assert float(row["mean"]) == 36.0 and float(row["delta_vs_36"]) == 0.0


def test_model_file_flag(capsys, tmp_path):
    cfg = tmp_path / "m.cfg"
    cfg.write_text(model_to_text(MODEL_PRESETS["v2-lite"]).replace("n_a = 6", "n_a = 0"))
    code, _, err = run(capsys, "roofline", "--range", "1:2", "--model", str(cfg))
    assert code == 1 and "n_a" in err


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "finemoe.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == __version__
