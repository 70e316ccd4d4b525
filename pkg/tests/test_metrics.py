from __future__ import annotations

import csv
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branchbench.metrics import (
    CATEGORIES,
    CSV_COLUMNS,
    MetricRecord,
    WorkflowReport,
    branching_overhead_ratio,
    export,
    latency_percentiles,
    load_report,
    nearest_rank,
    storage_efficiency,
    summary_lines,
)


def _synthetic():
    recs = [MetricRecord("branch_create", 10), MetricRecord("branch_connect", 5),
            MetricRecord("branch_delete", 5, outcome="RateLimited"),
            MetricRecord("data_mutation", 30), MetricRecord("read_query", 40),
            MetricRecord("cross_branch_query", 10), MetricRecord("wait", 1000)]
    return WorkflowReport(records=recs)


def test_overhead_ratio_is_exact():
    # branch = 20, productive = 80; waits are excluded and failures included.
    assert branching_overhead_ratio(_synthetic()) == 20 / 100


def test_overhead_ratio_undefined_without_records():
    with pytest.raises(ValueError):
        branching_overhead_ratio(WorkflowReport())
    with pytest.raises(ValueError):
        branching_overhead_ratio([MetricRecord("wait", 5)])


def test_unknown_category_rejected():
    with pytest.raises(ValueError):
        MetricRecord("bogus", 1)


@settings(max_examples=200)
@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=60), st.integers(1, 100))
def test_nearest_rank_oracle(values, pct):
    values = sorted(values)
    got = nearest_rank(values, pct)
    # Smallest value with at least pct% of the sample at or below it.
    want = next(v for v in values if sum(x <= v for x in values) * 100 >= pct * len(values))
    assert got == want


def test_percentiles_skip_failures():
    recs = [MetricRecord("read_query", n * 1_000_000) for n in range(1, 101)]
    recs.append(MetricRecord("read_query", 10**12, outcome="Timeout"))
    p = latency_percentiles(recs, "read_query")
    assert p["count"] == 100 and p["failures"] == 1
    assert (p["p50"], p["p95"], p["p99"], p["max"]) == (50.0, 95.0, 99.0, 100.0)
    assert latency_percentiles(recs, "schema_op") is None


def test_storage_efficiency():
    rep = WorkflowReport(storage={"root_footprint": 100, "peak_live_bytes": 400, "live_bytes": 100})
    eff = storage_efficiency(rep)
    assert eff == {"available": True, "amplification": 4.0, "reclaimed_fraction": 1.0}
    rep.storage["live_bytes"] = 250
    assert math.isclose(storage_efficiency(rep)["reclaimed_fraction"], 0.5)
    assert storage_efficiency(WorkflowReport())["available"] is False


def test_json_round_trip(tmp_path):
    rep = _synthetic()
    rep.accounting = {"committed": 3, "total": 3}
    rep.extra = {"mode": "frontier"}
    path = export(rep, "json", tmp_path / "r.json")[0]
    back = load_report(path)
    assert back == rep


def test_json_version_checked(tmp_path):
    obj = _synthetic().to_json_obj()
    obj["schema_version"] = 99
    with pytest.raises(ValueError):
        WorkflowReport.from_json_obj(obj)


def test_csv_has_one_row_per_record(tmp_path):
    rep = _synthetic()
    rec_path, sum_path = export(rep, "csv", tmp_path / "r.csv")
    with open(rec_path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) - 1 == len(rep.records)
    with open(sum_path, newline="") as fh:
        cats = [r[1] for r in list(csv.reader(fh))[1:]]
    assert set(cats) <= set(CATEGORIES)


def test_empty_report_summary_is_graceful():
    lines = summary_lines(WorkflowReport())
    assert any("undefined" in line for line in lines)
    assert any("unavailable" in line for line in lines)


def test_bad_format():
    with pytest.raises(ValueError):
        export(WorkflowReport(), "xml", "x")
