from __future__ import annotations

import csv
import json

import pytest

from branchbench.microdriver import (
    BUILTIN_NAMES,
    PLOT_COLUMNS,
    ScenarioConfig,
    ScenarioError,
    get_scenario,
    resolve,
    run_scenario,
    validate,
)
from tests.conftest import loaded


def _mini(tiny_dataset, cfg, backend="fullcopy"):
    cfg.multipliers = dict(tiny_dataset.config.row_multipliers)
    return run_scenario(cfg, loaded(backend, tiny_dataset), dataset=tiny_dataset)


def test_builtins_exist_and_validate():
    for name in BUILTIN_NAMES:
        cfg = get_scenario(name)
        assert cfg.name == name
        assert validate(cfg) >= 0


def test_templating():
    env = {"i": 4, "w": 2}
    assert resolve("b{i-1}", env, {}) == "b3"
    assert resolve("s{w+1}_{i*2}", env, {}) == "s3_8"
    assert resolve("$branches", env, {"branches": 7}) == 7
    with pytest.raises(ScenarioError):
        resolve("{__import__('os')}", env, {})
    with pytest.raises(ScenarioError):
        resolve("$missing", env, {})


def test_spine_creates_a_chain(tiny_dataset):
    cfg = get_scenario("spine_create").with_params(branches=12)
    be = loaded("deltaoverlay", tiny_dataset)
    cfg.multipliers = dict(tiny_dataset.config.row_multipliers)
    res = run_scenario(cfg, be, dataset=tiny_dataset)
    assert len(res.durations("create")) == 12
    assert len(res.durations("connect")) == 12
    assert len(res.durations("create_connect")) == 12
    assert be.depth("b12") == 12
    for d in res.derived:
        assert d.duration_ns > 0
    creates = {s.ordinal: s.duration_ns for s in res.samples if s.op == "create"}
    connects = {s.ordinal: s.duration_ns for s in res.samples if s.op == "connect"}
    for d in res.derived:
        assert d.duration_ns == creates[d.ordinal] + connects[d.ordinal]


def test_setup_is_not_timed(tiny_dataset):
    cfg = get_scenario("read_single_thread").with_params(branches=5, reads=7, range_size=10)
    res = _mini(tiny_dataset, cfg)
    assert {s.op for s in res.samples} == {"range_read"}
    assert len(res.samples) == 7
    assert res.setup_wall_ns > 0
    assert res.timed_total_ns <= res.timed_wall_ns


def test_parallel_workers(tiny_dataset):
    cfg = get_scenario("read_multi_thread").with_params(branches=3, reads=4, range_size=5)
    res = _mini(tiny_dataset, cfg, "pathcopy")
    assert sorted({s.worker for s in res.samples}) == [0, 1, 2]
    assert len(res.samples) == 12
    assert res.throughput() > 0


def test_wide_connect(tiny_dataset):
    cfg = get_scenario("wide_connect").with_params(workers=3, branches=2)
    res = _mini(tiny_dataset, cfg)
    assert len(res.durations("create")) == 6
    assert len(res.derived) == 6


def test_invalid_scenarios_fail_before_timing(tiny_dataset):
    bad = [
        {"name": "x", "execution": [{"op": "connect", "branch": "nope", "as": "s"}]},
        {"name": "x", "execution": [{"op": "point_read", "session": "nope"}]},
        {"name": "x", "execution": [{"op": "fly"}]},
        {"name": "x", "execution": [{"op": "create", "parent": "root"}]},
        {"name": "x", "execution": [{"op": "loop", "var": "i", "from": 1, "to": "$n", "body": []}]},
    ]
    for obj in bad:
        cfg = ScenarioConfig.from_json(obj)
        be = loaded("fullcopy", tiny_dataset)
        with pytest.raises(ScenarioError):
            run_scenario(cfg, be, dataset=tiny_dataset)
        assert be.list_branches() == ["main"]
    with pytest.raises(ScenarioError):
        ScenarioConfig.from_json({"execution": []})
    with pytest.raises(ScenarioError):
        get_scenario("no_such_scenario")


def test_out_of_range_key(tiny_dataset):
    cfg = ScenarioConfig.from_json({"name": "x", "setup": [{"op": "connect", "branch": "root", "as": "s"}],
                                    "execution": [{"op": "point_read", "session": "s", "key": 10**6}]})
    with pytest.raises(ScenarioError):
        _mini(tiny_dataset, cfg)


def test_failures_become_samples(tiny_dataset):
    cfg = ScenarioConfig.from_json({"name": "x", "execution": [
        {"op": "create", "parent": "root", "as": "a"},
        {"op": "create", "parent": "a", "as": "b"},
        {"op": "delete", "branch": "a"},
    ]})
    res = _mini(tiny_dataset, cfg)
    (delete,) = [s for s in res.samples if s.op == "delete"]
    assert delete.outcome == "Conflict"
    assert res.to_report().accounting["failed"] == 1


def test_scenario_file_and_plot_csv(tmp_path, tiny_dataset):
    obj = {"name": "custom", "params": {"n": 3},
           "setup": [{"op": "connect", "branch": "root", "as": "s"}],
           "execution": [{"op": "loop", "var": "i", "from": 1, "to": "$n", "body": [
               {"op": "write", "session": "s", "key": "{i}"},
               {"op": "point_read", "session": "s", "key": "{i}"}]}]}
    path = tmp_path / "s.json"
    path.write_text(json.dumps(obj))
    cfg = get_scenario(str(path))
    res = _mini(tiny_dataset, cfg)
    assert [s.op for s in res.samples] == ["write", "point_read"] * 3
    out = res.write_plot_csv(tmp_path / "plot.csv")
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == PLOT_COLUMNS
    assert len(rows) == 1 + len(res.samples) + len(res.derived)


def test_repetitions_use_fresh_backends(tiny_dataset):
    cfg = get_scenario("spine_create").with_params(branches=3)
    cfg.repetitions = 2
    cfg.multipliers = dict(tiny_dataset.config.row_multipliers)
    res = run_scenario(cfg, dataset=tiny_dataset)
    assert sorted({s.repetition for s in res.samples}) == [0, 1]
    assert len(res.durations("create")) == 6
    with pytest.raises(ScenarioError):
        run_scenario(cfg, loaded("fullcopy", tiny_dataset), dataset=tiny_dataset)


def test_percentile_buckets(tiny_dataset):
    cfg = get_scenario("spine_create").with_params(branches=25)
    res = _mini(tiny_dataset, cfg)
    buckets = [(r["bucket_lo"], r["bucket_hi"], r["count"]) for r in res.percentiles() if r["op"] == "create"]
    assert buckets == [(1, 10, 10), (11, 20, 10), (21, 30, 5)]
