from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branchbench.backend import RetryPolicy, make_backend, with_retry
from branchbench.backend.faults import FaultConfig
from branchbench.errors import (
    BranchLimitExceeded,
    Conflict,
    NotFound,
    RateLimited,
    SessionClosed,
    UnsupportedOperation,
)
from branchbench.metrics import MetricSink
from branchbench.opmodel.descriptors import (
    AddColumn,
    AggSpec,
    Aggregate,
    Const,
    CrossBranchAggregate,
    DeleteWhere,
    DropColumn,
    Insert,
    KeyEq,
    KeyRange,
    PointRead,
    RangeRead,
    UpdateWhere,
)
from branchbench.refbackends.pmap import Arena
from branchbench.schema import Column
from tests.conftest import REFERENCE, loaded

STOCK = ("s_w_id", "s_i_id")


def _qty(session, item):
    res = session.execute(PointRead("stock", STOCK, (1, item)))
    return res.dicts()[0]["s_quantity"]


def _set_qty(session, item, value):
    return session.execute(UpdateWhere("stock", (("s_quantity", Const(value)),), KeyEq(STOCK, (1, item))))


def test_lifecycle(ref_backend):
    be = ref_backend
    assert be.list_branches() == [be.root_id]
    b1 = be.create_branch(be.root_id)
    b2 = be.create_branch(b1)
    assert be.list_branches() == [be.root_id, b1, b2]
    assert be.branch_info(b2).parent == b1
    assert be.dump_branch(b2) == be.dump_branch(be.root_id)
    with pytest.raises(Conflict):
        be.delete_branch(b1)
    with pytest.raises(Conflict):
        be.delete_branch(be.root_id)
    be.delete_branch(b2)
    be.delete_branch(b1)
    with pytest.raises(NotFound):
        be.connect_branch(b1)
    with pytest.raises(NotFound):
        be.create_branch("nope")


def test_branches_are_isolated(ref_backend):
    be = ref_backend
    root = be.root_id
    with be.connect_branch(root) as s:
        before = _qty(s, 3)
    b1 = be.create_branch(root)
    b2 = be.create_branch(root)
    with be.connect_branch(b1) as s1, be.connect_branch(b2) as s2:
        _set_qty(s1, 3, 999)
        assert _qty(s1, 3) == 999
        assert _qty(s2, 3) == before
        s2.execute(DeleteWhere("stock", KeyEq(STOCK, (1, 3))))
        assert s2.execute(PointRead("stock", STOCK, (1, 3))).rows == ()
        assert _qty(s1, 3) == 999
    with be.connect_branch(root) as s:
        assert _qty(s, 3) == before
    # Child of a modified branch sees the parent's state at fork time.
    b3 = be.create_branch(b1)
    with be.connect_branch(b1) as s1:
        _set_qty(s1, 3, 1)
    with be.connect_branch(b3) as s3:
        assert _qty(s3, 3) == 999


def test_schema_changes_are_branch_local(ref_backend):
    be = ref_backend
    b1 = be.create_branch(be.root_id)
    with be.connect_branch(b1) as s:
        s.execute(AddColumn("stock", Column("tag", "text", default="x")))
        row = s.execute(PointRead("stock", STOCK, (1, 1))).dicts()[0]
        assert row["tag"] == "x"
        with pytest.raises(Conflict):
            s.execute(AddColumn("stock", Column("tag", "text")))
        s.execute(DropColumn("stock", "tag"))
        with pytest.raises(UnsupportedOperation):
            s.execute(DropColumn("stock", "tag"))
    with be.connect_branch(be.root_id) as s:
        assert "tag" not in s.execute(PointRead("stock", STOCK, (1, 1))).columns


def test_constraint_errors(ref_backend):
    be = ref_backend
    with be.connect_branch(be.root_id) as s:
        with pytest.raises(Conflict):
            s.execute(Insert("item", (("i_id", 1), ("i_name", "dup"))))
        with pytest.raises(Conflict):
            s.execute(Insert("stock", (("s_w_id", 1), ("s_i_id", 10_000_000), ("s_quantity", 5))))
        with pytest.raises(UnsupportedOperation):
            s.execute(PointRead("nope", ("x",), (1,)))
        with pytest.raises(UnsupportedOperation):
            s.execute(UpdateWhere("stock", (("s_i_id", Const(3)),)))


def test_closed_session_rejects_work(ref_backend):
    s = ref_backend.connect_branch(ref_backend.root_id)
    s.close()
    assert s.state == "closed"
    with pytest.raises(SessionClosed):
        s.execute(PointRead("item", ("i_id",), (1,)))


def test_native_cross_branch(ref_backend):
    be = ref_backend
    b1 = be.create_branch(be.root_id)
    with be.connect_branch(b1) as s:
        s.execute(DeleteWhere("stock", KeyRange(STOCK, (1, 1), (1, 10))))
    inner = Aggregate("stock", (AggSpec("count", None, "n"),))
    desc = CrossBranchAggregate(((be.root_id, inner), (b1, inner)))
    with be.connect_branch(be.root_id) as s:
        res = s.execute(desc)
    assert res.columns == ("branch_id", "n")
    assert res.rows == ((be.root_id, 50), (b1, 40))
    outer = CrossBranchAggregate(desc.targets, (AggSpec("sum", "n", "total"),))
    with be.connect_branch(be.root_id) as s:
        assert s.execute(outer).rows == ((90,),)


def _mixed_history(be, root):
    """A deterministic sequence of writes across a small branch tree."""
    b1 = be.create_branch(root)
    with be.connect_branch(b1) as s:
        for i in range(1, 30, 3):
            _set_qty(s, i, i * 7)
        s.execute(DeleteWhere("stock", KeyRange(STOCK, (1, 40), (1, 45))))
        s.execute(Insert("item", (("i_id", 500), ("i_name", "new"), ("i_price", 2.5))))
    b2 = be.create_branch(b1)
    with be.connect_branch(b2) as s:
        s.execute(AddColumn("item", Column("flag", "boolean", default=False)))
        s.execute(UpdateWhere("item", (("flag", Const(True)),), KeyRange(("i_id",), (1,), (20,))))
        _set_qty(s, 1, 0)
    return b1, b2


def test_mechanisms_agree_on_state(tiny_dataset):
    dumps = {}
    for name in REFERENCE:
        be = loaded(name, tiny_dataset)
        b1, b2 = _mixed_history(be, be.root_id)
        dumps[name] = (be.dump_branch(b1), be.dump_branch(b2))
        with be.connect_branch(b2) as s:
            dumps[name] += (s.execute(RangeRead("stock", STOCK, (1, 1), (1, 50))).rows,)
        be.close()
    assert dumps["fullcopy"] == dumps["deltaoverlay"] == dumps["pathcopy"]


def test_deltaoverlay_compaction_preserves_reads(tiny_dataset):
    plain = loaded("deltaoverlay", tiny_dataset)
    compacting = loaded("deltaoverlay", tiny_dataset, compaction_threshold=5)
    for be in (plain, compacting):
        b = be.create_branch(be.root_id)
        with be.connect_branch(b) as s:
            for rnd in range(5):
                for i in range(1, 11):
                    _set_qty(s, i, rnd * 100 + i)
    b = "b1"
    assert plain.dump_branch(b) == compacting.dump_branch(b)
    assert compacting.delta_count(b) < plain.delta_count(b)
    assert compacting.storage_stats().live_bytes < plain.storage_stats().live_bytes


def test_deltaoverlay_depth_tracks_chain(tiny_dataset):
    be = loaded("deltaoverlay", tiny_dataset)
    parent = be.root_id
    for d in range(1, 6):
        parent = be.create_branch(parent)
        assert be.depth(parent) == d


def test_fullcopy_storage_grows_per_branch(tiny_dataset):
    be = loaded("fullcopy", tiny_dataset)
    root = be.storage_stats().live_bytes
    branches = [be.create_branch(be.root_id) for _ in range(3)]
    assert be.storage_stats().live_bytes == 4 * root
    for b in branches:
        be.delete_branch(b)
    st = be.storage_stats()
    assert st.live_bytes == root
    assert st.peak_live_bytes == 4 * root
    assert st.reclaimed_total == 3 * root


def test_pathcopy_gc_matches_reachability(tiny_dataset):
    be = loaded("pathcopy", tiny_dataset)
    b1, b2 = _mixed_history(be, be.root_id)
    b3 = be.create_branch(be.root_id)
    with be.connect_branch(b3) as s:
        s.execute(DeleteWhere("stock", KeyRange(STOCK, (1, 1), (1, 30))))
    be.delete_branch(b2)
    be.delete_branch(b3)
    arena = be.arena
    reachable = arena.reachable(be.live_roots())
    garbage = {n.nid for n in arena.garbage}
    assert garbage.isdisjoint(reachable)
    assert set(arena.nodes) == reachable | garbage
    assert arena.garbage_bytes == be.storage_stats().reclaimable_bytes
    freed = be.reclaim()
    assert freed > 0
    assert set(arena.nodes) == reachable
    live_bytes = sum(arena.nodes[i].nbytes for i in reachable)
    assert be.storage_stats().live_bytes == live_bytes
    assert be.storage_stats().reclaimable_bytes == 0


def test_pathcopy_branch_creation_shares_nodes(tiny_dataset):
    be = loaded("pathcopy", tiny_dataset)
    before = be.arena.allocations
    b = be.create_branch(be.root_id)
    assert be.arena.allocations == before
    assert be.branch_footprint(b) == 0


# -------------------------------------------------------------- pmap oracle

keys = st.tuples(st.integers(0, 3), st.integers(0, 200))
ops = st.lists(st.tuples(st.sampled_from(["put", "remove", "snap"]), keys, st.integers()), max_size=120)


@settings(max_examples=150, deadline=None)
@given(ops, keys, keys)
def test_pmap_matches_dict(history, lo, hi):
    lo, hi = min(lo, hi), max(lo, hi)
    arena = Arena()
    root = arena.empty()
    root.rc += 1
    model: dict = {}
    snaps = []
    for op, key, val in history:
        if op == "put":
            root = arena.put(root, key, {"v": val})
            model[key] = {"v": val}
        elif op == "remove" and key in model:
            root = arena.remove(root, key)
            del model[key]
        elif op == "snap":
            arena.incref(root)
            snaps.append((root, dict(model)))
    assert list(Arena.items(root)) == sorted(model.items())
    assert list(Arena.range(root, lo, hi)) == [(k, v) for k, v in sorted(model.items()) if lo <= k <= hi]
    for key in list(model)[:10]:
        assert Arena.get(root, key) == model[key]
    # Older versions are untouched by later writes.
    for snap_root, snap_model in snaps:
        assert list(Arena.items(snap_root)) == sorted(snap_model.items())
    for snap_root, _ in snaps:
        arena.decref(snap_root)
    arena.gc()
    assert set(arena.nodes) == arena.reachable([root])


# ------------------------------------------------------------ faults, retry


def test_branch_limit_counts_live_branches(tiny_dataset):
    be = make_backend("fullcopy", faults={"live_branch_limit": 2})
    a = be.create_branch(be.root_id)
    be.create_branch(be.root_id)
    with pytest.raises(BranchLimitExceeded):
        be.create_branch(be.root_id)
    be.delete_branch(a)
    be.create_branch(be.root_id)


def test_fault_config_validation():
    with pytest.raises(ValueError):
        FaultConfig.from_mapping({"bogus": 1})
    with pytest.raises(ValueError):
        FaultConfig(rate_limit_prob=2.0)
    assert not FaultConfig().active


def test_retry_records_every_attempt():
    sink = MetricSink()
    calls = []
    slept = []

    def flaky():
        calls.append(1)
        if len(calls) < 3:
            raise RateLimited("busy")
        return "done"

    policy = RetryPolicy(max_attempts=5, base_backoff_s=0.01)
    assert with_retry(flaky, policy, sink=sink, category="branch_create", op="create",
                      sleep=slept.append) == "done"
    recs = sink.records()
    assert [(r.category, r.outcome, r.attempt) for r in recs] == [
        ("branch_create", "RateLimited", 1), ("wait", "ok", 1),
        ("branch_create", "RateLimited", 2), ("wait", "ok", 2),
        ("branch_create", "ok", 3),
    ]
    assert slept == [0.01, 0.02]


def test_retry_gives_up_and_skips_non_retryable():
    policy = RetryPolicy(max_attempts=3, base_backoff_s=0.0)
    sink = MetricSink()

    def always():
        raise RateLimited("busy")

    with pytest.raises(RateLimited):
        with_retry(always, policy, sink=sink, sleep=lambda s: None)
    assert sum(r.category != "wait" for r in sink.records()) == 3

    def conflict():
        raise Conflict("no")

    sink = MetricSink()
    with pytest.raises(Conflict):
        with_retry(conflict, policy, sink=sink, sleep=lambda s: None)
    assert len(sink.records()) == 1


def test_backoff_is_capped():
    p = RetryPolicy(max_attempts=20, base_backoff_s=0.01, multiplier=2.0, max_backoff_s=1.0)
    assert [p.backoff(a) for a in (1, 2, 3)] == [0.01, 0.02, 0.04]
    assert p.backoff(15) == 1.0


def test_rate_limit_injection_is_seeded():
    def outcomes(seed):
        be = make_backend("fullcopy", faults={"rate_limit_prob": 0.5, "seed": seed})
        out = []
        for _ in range(30):
            try:
                be.create_branch(be.root_id)
                out.append(True)
            except RateLimited:
                out.append(False)
        return out

    assert outcomes(1) == outcomes(1)
    assert True in outcomes(1) and False in outcomes(1)


def test_external_sql_lifecycle(tiny_dataset):
    be = loaded("external-sql", tiny_dataset)
    try:
        b = be.create_branch(be.root_id)
        with be.connect_branch(b) as s:
            _set_qty(s, 2, 77)
            assert _qty(s, 2) == 77
            with pytest.raises(UnsupportedOperation):
                s.execute(CrossBranchAggregate(((b, Aggregate("stock", (AggSpec("count", None, "n"),))),)))
        with be.connect_branch(be.root_id) as s:
            assert _qty(s, 2) != 77
        ref = loaded("fullcopy", tiny_dataset)
        assert be.dump_branch(be.root_id) == ref.dump_branch(ref.root_id)
        be.delete_branch(b)
        with pytest.raises(NotFound):
            be.connect_branch(b)
    finally:
        be.close()


def test_unknown_backend():
    with pytest.raises(ValueError):
        make_backend("nope")
