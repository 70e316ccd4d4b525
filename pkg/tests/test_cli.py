from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from branchbench.cli import main
from branchbench.macrodriver.presets import PARAMETER_SYMBOLS
from branchbench.metrics import load_report

PRESET_TABLE = json.loads((Path(__file__).parent / "data" / "preset_table.json").read_text())


@pytest.fixture(autouse=True)
def out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("BRANCHBENCH_OUT_DIR", str(tmp_path / "out"))
    return tmp_path / "out"


def test_list_presets_table(capsys):
    assert main(["list-presets"]) == 0
    lines = capsys.readouterr().out.splitlines()
    header = lines[0].split()
    assert header == ["preset", *PARAMETER_SYMBOLS, "W"]
    rows = {line.split()[0]: line.split()[1:] for line in lines[1:]}
    for name, cells in PRESET_TABLE.items():
        if name == "symbols":
            continue
        assert rows[name][:len(PARAMETER_SYMBOLS)] == cells
    assert len(rows) == 10


def test_list_presets_json(capsys):
    assert main(["list-presets", "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["mcts"]["M_s"] is None
    assert data["mini:mcts"]["T"] == 5


def test_usage_errors_exit_2(capsys, tmp_path):
    assert main([]) == 2
    assert main(["macro-run", "--bogus"]) == 2
    assert main(["macro-run"]) == 2
    assert main(["macro-run", "--preset", "nope"]) == 2
    assert main(["macro-run", "--preset", "mini:mcts", "--fail-threshold", "2"]) == 2
    assert main(["micro-run", "--scenario", "nope"]) == 2
    assert main(["report", "--in", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.conf"
    bad.write_text("preset = mini:mcts\nT = 0\n")
    assert main(["macro-run", "--config", str(bad)]) == 2


def test_datagen(tmp_path, capsys):
    out = tmp_path / "ds"
    assert main(["datagen", "-W", "1", "--seed", "2", "--multiplier", "customer=5", "--out", str(out)]) == 0
    assert (out / "schema.json").exists()
    with open(out / "customer.csv", newline="") as fh:
        assert sum(1 for _ in csv.reader(fh)) - 1 == 10 * 5
    assert main(["datagen", "--multiplier", "customer"]) == 2


def test_macro_run_and_report(out_dir, capsys):
    assert main(["macro-run", "--preset", "mini:failure_repro", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "branching overhead ratio" in out
    path = out_dir / "macro-mini-failure_repro-fullcopy-seed1.json"
    rep = load_report(path)
    assert rep.status == "completed" and rep.accounting["total"] == 10
    assert main(["report", "--in", str(path), "--emit", "csv", "--out", str(out_dir / "r")]) == 0
    with open(out_dir / "r_records.csv", newline="") as fh:
        assert sum(1 for _ in csv.reader(fh)) - 1 == len(rep.records)


def test_single_worker_runs_are_reproducible(out_dir, tmp_path):
    outs = []
    for i in range(2):
        path = tmp_path / f"r{i}.json"
        assert main(["macro-run", "--preset", "mini:mcts", "--workers", "1", "--seed", "5",
                     "--backend", "deltaoverlay", "--out", str(path)]) == 0
        rep = load_report(path)
        outs.append(([(s["outcome"], s["parent_id"], s["branch_id"]) for s in rep.steps],
                     [q.get("rows") for q in rep.cross_branch], rep.extra["outcomes"]))
    assert outs[0] == outs[1]


def test_failed_steps_exit_1(tmp_path):
    conf = tmp_path / "limit.conf"
    conf.write_text("preset = mini:mcts\nT = 1\nS = 4\n[faults]\nlive_branch_limit = 1\n"
                    "[retry]\nmax_attempts = 1\n")
    assert main(["macro-run", "--config", str(conf), "--out", str(tmp_path / "a.json")]) == 1
    assert main(["macro-run", "--config", str(conf), "--out", str(tmp_path / "b.json"),
                 "--fail-threshold", "1.0"]) == 0


def test_timeout_exits_1(tmp_path):
    conf = tmp_path / "slow.conf"
    conf.write_text("preset = mini:mcts\nT = 1\n[faults]\nlatency_ms.execute = 20\n")
    assert main(["macro-run", "--config", str(conf), "--timeout", "0.05", "--out", str(tmp_path / "t.json")]) == 1
    assert load_report(tmp_path / "t.json").status == "timed_out"


def test_micro_run(out_dir, capsys):
    assert main(["micro-run", "--scenario", "spine_create", "--branches", "5", "--backend", "pathcopy"]) == 0
    out = capsys.readouterr().out
    assert "create_connect" in out
    path = out_dir / "micro-spine_create-pathcopy-seed0.json"
    rep = load_report(path)
    assert rep.kind == "micro" and rep.accounting["samples"] == 10
    assert (out_dir / "micro-spine_create-pathcopy-seed0_plot.csv").exists()


def test_startup_failure_exits_1(tmp_path):
    conf = tmp_path / "ext.conf"
    conf.write_text('preset = mini:mcts\nbackend = external-sql\nbackend_options.url = "postgres://x"\n')
    assert main(["macro-run", "--config", str(conf), "--out", str(tmp_path / "x.json")]) == 1
