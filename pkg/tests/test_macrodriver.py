from __future__ import annotations

import json
import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branchbench.datagen import ConfigError
from branchbench.errors import SchedulingError
from branchbench.macrodriver import (
    PRESET_NAMES,
    WorkflowConfig,
    final_state_dump,
    load_config,
    preset,
    run_workflow,
)
from branchbench.macrodriver.presets import (
    PARAMETER_SYMBOLS,
    format_cell,
    parse_config_text,
    preset_row,
    trigger_points,
)
from branchbench.macrodriver.tree import (
    COMMITTED,
    BranchTree,
    InvariantViolation,
    NoEligibleParent,
    TreeExhausted,
)
from branchbench.metrics import branching_overhead_ratio
from tests.conftest import loaded

PRESET_TABLE = json.loads((Path(__file__).parent / "data" / "preset_table.json").read_text())


def small(tiny_dataset, workflow, **kw):
    """A quick config over the tiny dataset."""
    base = dict(workflow=workflow, workers=1, steps=6, root_fanout=6, inner_fanout=2, max_depth=3,
                data_ops=2, reads=1, multipliers=dict(tiny_dataset.config.row_multipliers), seed=4)
    base.update(kw)
    return WorkflowConfig(**base)


def checked(run, result):
    run.tree.check_invariants()


# -------------------------------------------------------------------- presets


@pytest.mark.parametrize("name", ["software_dev", "failure_repro", "data_cleaning", "mcts", "simulation"])
def test_published_rows_match_transcription(name):
    row = preset_row(name)
    assert [format_cell(row[s]) for s in PARAMETER_SYMBOLS] == PRESET_TABLE[name]


def test_absent_cells_normalize():
    fr = preset("failure_repro")
    assert fr.cross_branch_queries == 0 and fr.inner_fanout is None
    assert preset("mcts").schema_ops == 0
    assert preset("data_cleaning").prune_prob == 0.0
    sim = preset("simulation")
    assert (sim.workers, sim.steps, sim.root_fanout, sim.prune_prob, sim.warehouses) == (1000, 1, 1000, 1.0, 5)


def test_mini_presets_shrink():
    for name in PRESET_NAMES:
        if not name.startswith("mini:"):
            continue
        cfg = preset(name)
        assert cfg.workers <= 5 and cfg.steps <= 10 and cfg.warehouses == 1
        assert cfg.root_fanout <= cfg.workers * cfg.steps
    sim = preset("mini:simulation")
    assert (sim.workers, sim.steps, sim.root_fanout) == (5, 1, 5)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("nope")
    with pytest.raises(ConfigError):
        preset("mini:nope")


def test_config_validation():
    with pytest.raises(ConfigError):
        WorkflowConfig("mcts", 0, 1, data_ops=1)
    with pytest.raises(ConfigError):
        WorkflowConfig("mcts", 1, 1)
    with pytest.raises(ConfigError):
        WorkflowConfig("mcts", 1, 1, data_ops=1, prune_prob=1.5)
    with pytest.raises(ConfigError):
        WorkflowConfig("bogus", 1, 1, data_ops=1)


def test_key_value_config(tmp_path):
    text = """
    preset = mini:mcts
    T = 3
    γ = 0.5
    F_i = ---
    backend = deltaoverlay
    [faults]
    live_branch_limit = 4
    retry.max_attempts = 2
    """
    path = tmp_path / "run.conf"
    path.write_text(text, encoding="utf-8")
    cfg = load_config(path)
    assert cfg.workers == 3 and cfg.prune_prob == 0.5 and cfg.inner_fanout is None
    assert cfg.faults["live_branch_limit"] == 4
    assert cfg.backend == "deltaoverlay"


def test_parse_sections_and_dotted_keys():
    obj = parse_config_text("workflow = mcts\nretry.max_attempts = 2\n[faults]\nseed = 9\n")
    assert obj == {"workflow": "mcts", "retry": {"max_attempts": 2}, "faults": {"seed": 9}}


def test_json_config_and_errors(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"workflow": "simulation", "T": 7, "seed": 3}))
    cfg = load_config(path)
    assert (cfg.workers, cfg.seed, cfg.root_fanout) == (7, 3, 1000)
    path.write_text(json.dumps({"workflow": "simulation", "bogus": 1}))
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_trigger_points():
    cfg = WorkflowConfig("mcts", 10, 20, cross_branch_queries=2, data_ops=1)
    assert trigger_points(cfg) == [100, 200]
    cfg = WorkflowConfig("mcts", 1, 10, cross_branch_queries=3, data_ops=1)
    assert trigger_points(cfg) == [4, 7, 10]
    assert trigger_points(WorkflowConfig("mcts", 1, 10, data_ops=1)) == []


# ---------------------------------------------------------------------- tree


def _capacity(cfg):
    """Committed nodes a tree can hold: brute-force sum of fanout products."""
    total, width = 0, 1
    for depth in range(cfg.max_depth):
        width *= cfg.fanout(depth)
        total += width
    return total


def test_full_software_dev_capacity_is_65():
    cfg = preset("software_dev")
    tree = BranchTree(cfg, "main")
    rng = random.Random(0)
    n = 0
    while True:
        try:
            res = tree.reserve(rng)
        except TreeExhausted:
            break
        tree.commit(res, tree.attach(res, f"b{n}"))
        n += 1
    tree.check_invariants()
    assert n == _capacity(cfg) == 65 < cfg.total_steps


tree_configs = st.builds(
    lambda fr, fi, d: WorkflowConfig("mcts", 1, 1, root_fanout=fr, inner_fanout=fi, max_depth=d, data_ops=1),
    st.integers(1, 4), st.one_of(st.none(), st.integers(1, 3)), st.integers(1, 4),
)


@settings(max_examples=150, deadline=None)
@given(tree_configs, st.lists(st.tuples(st.sampled_from(["reserve", "commit", "prune", "fail"]),
                                        st.integers(0, 10**6)), max_size=80))
def test_tree_invariants_under_random_transitions(cfg, script):
    tree = BranchTree(cfg, "main")
    rng = random.Random(1)
    open_: list = []
    for action, pick in script:
        if action == "reserve":
            try:
                res = tree.reserve(rng)
            except NoEligibleParent:
                assert not tree.eligible()
                continue
            open_.append((res, tree.attach(res, f"b{res.token}")))
        elif open_:
            res, node = open_.pop(pick % len(open_))
            getattr(tree, action)(res, node)
        tree.check_invariants()
    for n in tree.nodes.values():
        assert tree.free_slots(n) is None or tree.free_slots(n) >= 0


def test_invariant_checker_detects_drift():
    cfg = WorkflowConfig("mcts", 1, 1, root_fanout=2, max_depth=2, inner_fanout=2, data_ops=1)
    tree = BranchTree(cfg, "main")
    res = tree.reserve(random.Random(0))
    tree.commit(res, tree.attach(res, "b1"))
    tree.nodes[0].child_count = 2
    with pytest.raises(InvariantViolation):
        tree.check_invariants()


def test_settling_twice_is_rejected():
    cfg = WorkflowConfig("mcts", 1, 1, root_fanout=2, data_ops=1)
    tree = BranchTree(cfg, "main")
    res = tree.reserve(random.Random(0))
    node = tree.attach(res, "b1")
    tree.commit(res, node)
    with pytest.raises(SchedulingError):
        tree.prune(res, node)


# -------------------------------------------------------------------- driver


def test_chain_shape(tiny_dataset):
    cfg = small(tiny_dataset, "mcts", steps=5, root_fanout=1, inner_fanout=1, max_depth=5)
    rep = run_workflow(cfg, dataset=tiny_dataset, on_step=checked)
    depths = [s["depth"] for s in rep.steps]
    assert depths == [1, 2, 3, 4, 5]
    parents = [s["parent_id"] for s in rep.steps]
    assert parents[1:] == [s["branch_id"] for s in rep.steps][:-1]
    assert len(rep.tree["frontier"]) == 1


def test_star_shape(tiny_dataset):
    cfg = small(tiny_dataset, "mcts", steps=6, root_fanout=6, max_depth=1)
    rep = run_workflow(cfg, dataset=tiny_dataset, on_step=checked)
    assert {s["depth"] for s in rep.steps} == {1}
    assert {s["parent_id"] for s in rep.steps} == {"main"}
    assert len(rep.tree["frontier"]) == 6
    assert rep.accounting == {"committed": 6, "pruned": 0, "failed": 0, "skipped": 0, "total": 6}


def test_prune_everything_keeps_root_frontier(tiny_dataset):
    cfg = small(tiny_dataset, "simulation", steps=4, prune_prob=1.0, cross_branch_queries=1)
    be = loaded("deltaoverlay", tiny_dataset)
    rep = run_workflow(cfg, be, on_step=checked)
    assert rep.accounting["pruned"] == 4
    assert rep.tree["frontier"] == ["main"]
    assert be.list_branches() == ["main"]
    assert rep.extra["mode"] == "outcomes" and len(rep.extra["outcomes"]) == 4
    (q,) = rep.cross_branch
    assert q["status"] == "ok"
    assert dict(zip(q["columns"], q["rows"][0]))["branches"] == 4


def test_no_pruning(tiny_dataset):
    cfg = small(tiny_dataset, "data_cleaning", steps=6, schema_ops=1, prune_prob=0.0, cross_branch_queries=2)
    rep = run_workflow(cfg, dataset=tiny_dataset, on_step=checked)
    assert rep.accounting["committed"] == 6
    assert [q["threshold"] for q in rep.cross_branch] == [3, 6]
    assert all(q["status"] == "ok" for q in rep.cross_branch)
    assert rep.cross_branch[-1]["completed_steps"] == 6


def test_stall_is_reported(tiny_dataset):
    cfg = small(tiny_dataset, "mcts", steps=8, root_fanout=2, inner_fanout=1, max_depth=2)
    rep = run_workflow(cfg, dataset=tiny_dataset, on_step=checked)
    assert rep.status == "stalled"
    assert rep.accounting["committed"] == 4
    assert rep.accounting["skipped"] == 4


def test_same_seed_same_end_state(tiny_dataset):
    dumps = []
    for _ in range(2):
        be = loaded("fullcopy", tiny_dataset)
        rep = run_workflow(small(tiny_dataset, "software_dev", schema_ops=1, prune_prob=0.3), be)
        dumps.append((final_state_dump(rep, be), [(s["outcome"], s["parent_id"]) for s in rep.steps]))
    assert dumps[0] == dumps[1]


def test_fallback_cross_branch_equals_native(tiny_dataset):
    out = []
    for native in (True, False):
        be = loaded("pathcopy", tiny_dataset, cross_branch=native)
        cfg = small(tiny_dataset, "mcts", steps=6, cross_branch_queries=2, prune_prob=0.2)
        rep = run_workflow(cfg, be)
        out.append([(q["branches"], q["rows"]) for q in rep.cross_branch])
        ops = {r.op for r in rep.records if r.category == "cross_branch_query"}
        assert ops == ({"CrossBranchAggregate"} if native else {"Aggregate"})
    assert out[0] == out[1]


def test_timeout_marks_run(tiny_dataset):
    cfg = small(tiny_dataset, "mcts", steps=50, root_fanout=50, max_depth=1, timeout_s=0.05,
                faults={"latency_ms": {"execute": 5.0}})
    rep = run_workflow(cfg, dataset=tiny_dataset)
    assert rep.status == "timed_out"
    assert rep.accounting["skipped"] > 0
    assert rep.accounting["total"] == 50


def test_branch_limit_fails_steps(tiny_dataset):
    cfg = small(tiny_dataset, "mcts", steps=5, root_fanout=5, max_depth=1,
                faults={"live_branch_limit": 2}, retry={"max_attempts": 2, "base_backoff_s": 0.0})
    rep = run_workflow(cfg, dataset=tiny_dataset, on_step=checked)
    assert rep.accounting["committed"] == 2
    assert rep.accounting["failed"] == 3
    fails = [s for s in rep.steps if s["outcome"] == "failed"]
    assert {s["error_class"] for s in fails} == {"BranchLimitExceeded"}
    assert rep.tree["slots"]["consumed_by_failure"] == 3


def test_every_category_is_recorded(tiny_dataset):
    cfg = small(tiny_dataset, "software_dev", schema_ops=1, prune_prob=0.5, cross_branch_queries=1)
    rep = run_workflow(cfg, dataset=tiny_dataset)
    cats = {r.category for r in rep.records}
    assert {"branch_create", "branch_connect", "schema_op", "data_mutation", "read_query",
            "cross_branch_query"} <= cats
    assert 0 < branching_overhead_ratio(rep) < 1
    assert rep.storage["root_footprint"] > 0


def test_multi_worker_run_keeps_invariants(tiny_dataset):
    cfg = small(tiny_dataset, "mcts", workers=4, steps=5, root_fanout=4, inner_fanout=3, max_depth=4,
                prune_prob=0.2, cross_branch_queries=3)
    be = loaded("deltaoverlay", tiny_dataset)
    rep = run_workflow(cfg, be, on_step=checked)
    acc = rep.accounting
    assert acc["total"] == 20
    assert acc["committed"] + acc["pruned"] + acc["failed"] + acc["skipped"] == 20
    committed = [n for n in rep.tree["nodes"] if n["status"] == COMMITTED and n["node_id"]]
    assert len(committed) == acc["committed"]
    assert len(rep.cross_branch) == 3
