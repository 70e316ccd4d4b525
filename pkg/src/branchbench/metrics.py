"""Per-operation samples, the four workflow metrics, and report export.

Durations are kept as integer nanoseconds from a monotonic clock; they are
shown in milliseconds with three decimals only when rendered or flattened
to CSV.
"""

from __future__ import annotations

import csv
import json
import math
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

SCHEMA_VERSION = 1

BRANCH_CATEGORIES = ("branch_create", "branch_connect", "branch_delete")
PRODUCTIVE_CATEGORIES = ("schema_op", "data_mutation", "read_query", "cross_branch_query")
CATEGORIES = BRANCH_CATEGORIES + PRODUCTIVE_CATEGORIES + ("wait",)

CSV_COLUMNS = (
    "schema_version", "category", "op", "outcome", "attempt", "worker", "workflow", "step",
    "phase", "ordinal", "branch_id", "start_ms", "duration_ms",
)

now_ns = time.perf_counter_ns


@dataclass
class MetricRecord:
    category: str
    duration_ns: int
    outcome: str = "ok"
    op: str = ""
    attempt: int = 1
    worker: int | None = None
    workflow: str | None = None
    step: int | None = None
    phase: str | None = None
    ordinal: int | None = None
    branch_id: str | None = None
    start_ns: int = 0

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown metric category {self.category!r}")

    @property
    def ok(self) -> bool:
        return self.outcome == "ok"

    @property
    def duration_ms(self) -> float:
        return self.duration_ns / 1e6

    def with_provenance(self, prov) -> "MetricRecord":
        if prov is not None:
            self.workflow, self.worker, self.step = prov.workflow, prov.worker, prov.step
            self.phase, self.ordinal = prov.phase, prov.ordinal
        return self


class MetricSink:
    """Append-only collector shared by concurrent workers."""

    def __init__(self) -> None:
        self._records: list[MetricRecord] = []
        self._lock = threading.Lock()

    def add(self, record: MetricRecord) -> MetricRecord:
        with self._lock:
            self._records.append(record)
        return record

    def records(self) -> list[MetricRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        return len(self._records)


# ------------------------------------------------------------------ reports


@dataclass
class WorkflowReport:
    config: dict[str, Any] = field(default_factory=dict)
    records: list[MetricRecord] = field(default_factory=list)
    end_to_end_ns: int = 0
    storage: dict[str, Any] | None = None
    accounting: dict[str, int] = field(default_factory=dict)
    steps: list[dict[str, Any]] = field(default_factory=list)
    tree: dict[str, Any] = field(default_factory=dict)
    cross_branch: list[dict[str, Any]] = field(default_factory=list)
    status: str = "completed"
    kind: str = "macro"
    extra: dict[str, Any] = field(default_factory=dict)

    def to_json_obj(self) -> dict[str, Any]:
        obj = asdict(self)
        obj["schema_version"] = SCHEMA_VERSION
        return obj

    @classmethod
    def from_json_obj(cls, obj: Mapping[str, Any]) -> "WorkflowReport":
        version = obj.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {version!r}")
        names = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in obj.items() if k in names}
        kwargs["records"] = [MetricRecord(**r) for r in obj.get("records", [])]
        return cls(**kwargs)


# ------------------------------------------------------------------- metrics


def _records(source) -> list[MetricRecord]:
    return list(source.records if isinstance(source, WorkflowReport) else source)


def branching_overhead_ratio(source: WorkflowReport | Iterable[MetricRecord]) -> float:
    """Branch-management time over branch-management plus productive time.

    Every attempt counts, successful or not; wait records count on neither side.
    """
    branch = productive = 0
    seen = False
    for r in _records(source):
        if r.category in BRANCH_CATEGORIES:
            branch += r.duration_ns
            seen = True
        elif r.category in PRODUCTIVE_CATEGORIES:
            productive += r.duration_ns
            seen = True
    if not seen:
        raise ValueError("overhead ratio is undefined for a report with no branch or productive records")
    total = branch + productive
    return branch / total if total else 0.0


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    if not sorted_values:
        raise ValueError("no values")
    rank = max(1, math.ceil(pct / 100 * len(sorted_values)))
    return sorted_values[rank - 1]


def latency_percentiles(records: Iterable[MetricRecord], category: str) -> dict[str, Any] | None:
    """Nearest-rank p50/p95/p99/max in ms over successful attempts; ``None`` if absent."""
    ok: list[int] = []
    failures = 0
    for r in records:
        if r.category != category:
            continue
        if r.ok:
            ok.append(r.duration_ns)
        else:
            failures += 1
    if not ok and not failures:
        return None
    out: dict[str, Any] = {"count": len(ok), "failures": failures}
    if ok:
        ok.sort()
        for name, p in (("p50", 50), ("p95", 95), ("p99", 99)):
            out[name] = nearest_rank(ok, p) / 1e6
        out["max"] = ok[-1] / 1e6
    return out


def percentile_table(records: Iterable[MetricRecord]) -> dict[str, dict[str, Any]]:
    records = list(records)
    table = {}
    for cat in CATEGORIES:
        entry = latency_percentiles(records, cat)
        if entry is not None:
            table[cat] = entry
    return table


def wait_total_ns(records: Iterable[MetricRecord]) -> int:
    return sum(r.duration_ns for r in records if r.category == "wait")


def storage_efficiency(report: WorkflowReport) -> dict[str, Any]:
    """Peak-over-root amplification and the fraction of growth reclaimed by the end."""
    st = report.storage
    if not st or st.get("root_footprint") in (None, 0):
        return {"available": False}
    root = st["root_footprint"]
    peak = st["peak_live_bytes"]
    final = st["live_bytes"]
    growth = peak - root
    if growth <= 0:
        reclaimed = 1.0
    else:
        reclaimed = min(1.0, max(0.0, (peak - final) / growth))
    return {"available": True, "amplification": peak / root, "reclaimed_fraction": reclaimed}


def end_to_end_seconds(report: WorkflowReport) -> float:
    return report.end_to_end_ns / 1e9


def fmt_ms(ns: int) -> str:
    return f"{ns / 1e6:.3f}"


# -------------------------------------------------------------------- export


def record_row(r: MetricRecord) -> list[Any]:
    return [
        SCHEMA_VERSION, r.category, r.op, r.outcome, r.attempt,
        "" if r.worker is None else r.worker, r.workflow or "", "" if r.step is None else r.step,
        r.phase or "", "" if r.ordinal is None else r.ordinal, r.branch_id or "",
        fmt_ms(r.start_ns), fmt_ms(r.duration_ns),
    ]


def export(report: WorkflowReport, fmt: str, path: str | Path) -> list[Path]:
    """Write ``report`` as JSON (lossless) or CSV (records plus a summary file)."""
    path = Path(path)
    if fmt == "json":
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_json_obj(), indent=1, sort_keys=True), encoding="utf-8")
        return [path]
    if fmt != "csv":
        raise ValueError(f"unknown export format {fmt!r}")
    stem = path.with_suffix("") if path.suffix else path
    stem.parent.mkdir(parents=True, exist_ok=True)
    rec_path = stem.parent / f"{stem.name}_records.csv"
    with open(rec_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in report.records:
            w.writerow(record_row(r))
    sum_path = stem.parent / f"{stem.name}_summary.csv"
    with open(sum_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("schema_version", "category", "count", "failures", "p50_ms", "p95_ms", "p99_ms", "max_ms"))
        for cat, e in percentile_table(report.records).items():
            w.writerow([SCHEMA_VERSION, cat, e["count"], e["failures"]]
                       + [f"{e[k]:.3f}" if k in e else "" for k in ("p50", "p95", "p99", "max")])
    return [rec_path, sum_path]


def load_report(path: str | Path) -> WorkflowReport:
    return WorkflowReport.from_json_obj(json.loads(Path(path).read_text(encoding="utf-8")))


def summary_lines(report: WorkflowReport) -> list[str]:
    lines = [f"status: {report.status}", f"end-to-end: {report.end_to_end_ns / 1e9:.3f} s"]
    try:
        lines.append(f"branching overhead ratio: {branching_overhead_ratio(report):.4f}")
    except ValueError:
        lines.append("branching overhead ratio: undefined (no records)")
    eff = storage_efficiency(report)
    if eff["available"]:
        lines.append(f"storage amplification: {eff['amplification']:.3f}x "
                     f"(reclaimed {eff['reclaimed_fraction']:.1%})")
    else:
        lines.append("storage amplification: unavailable")
    if report.accounting:
        acc = ", ".join(f"{k}={v}" for k, v in report.accounting.items())
        lines.append(f"steps: {acc}")
    lines.append(f"wait: {fmt_ms(wait_total_ns(report.records))} ms")
    for cat, e in percentile_table(report.records).items():
        if "p50" in e:
            lines.append(f"  {cat:<20} n={e['count']:<6} p50={e['p50']:.3f} p95={e['p95']:.3f} "
                         f"p99={e['p99']:.3f} max={e['max']:.3f} ms  failures={e['failures']}")
        else:
            lines.append(f"  {cat:<20} n=0 failures={e['failures']}")
    return lines
