"""The branch-mutate-evaluate-prune loop over T workers and S steps each."""

from __future__ import annotations

import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from ..backend import Backend, RetryPolicy, make_backend, with_retry
from ..datagen import DataGenConfig, Dataset, generate_dataset, load_dataset
from ..errors import BackendError, SchedulingError, UnsupportedOperation
from ..metrics import MetricRecord, MetricSink, WorkflowReport, now_ns
from ..opmodel.descriptors import CrossBranchAggregate, OperationDescriptor, Provenance, category_of, unwrap
from ..opmodel.evaluate import OpResult, group_aggregate, merge_cross_branch
from ..opmodel.templates import (
    FrontierEntry,
    StepContext,
    get_template,
    instantiate_cross_branch_op,
    instantiate_step_ops,
    step_rng,
)
from ..schema import encode_json_value
from .presets import WorkflowConfig, trigger_points
from .tree import BranchNode, BranchTree, NoEligibleParent, Reservation, TreeExhausted

COMMITTED, PRUNED, FAILED, SKIPPED = "committed", "pruned", "failed", "skipped"
PHASES = ("branch", "mutate", "evaluate", "prune")

PARENT_BACKOFF_BASE_S = 0.01
PARENT_BACKOFF_CAP_S = 1.0


class StartupError(RuntimeError):
    """The backend could not be brought up or loaded."""


class _Cancelled(Exception):
    pass


@dataclass
class StepResult:
    worker: int
    step: int
    outcome: str
    branch_id: str | None = None
    parent_id: str | None = None
    depth: int | None = None
    error_class: str | None = None
    phases_ns: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class _Query:
    index: int
    threshold: int
    final: bool


def _rows_json(res: OpResult) -> dict[str, Any]:
    return {
        "columns": list(res.columns or ()),
        "rows": [[encode_json_value(v) for v in r] for r in res.rows or ()],
    }


class MacroRun:
    """State of one workflow execution; :func:`run_workflow` is the entry point."""

    def __init__(self, config: WorkflowConfig, backend: Backend, *, sink: MetricSink | None = None,
                 on_step: Callable[["MacroRun", StepResult], None] | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.backend = backend
        self.template = get_template(config.workflow)
        self.policy = RetryPolicy(**config.retry)
        self.sink = sink if sink is not None else MetricSink()
        self.on_step = on_step
        self.sleep = sleep
        self.tree = BranchTree(config, backend.root_id)
        self.multipliers = DataGenConfig(config.warehouses, config.seed, config.multipliers).multipliers
        # Outcome mode: branches never survive (gamma = 1), so comparisons run
        # over each branch's first evaluation result, captured before pruning.
        self.outcome_mode = config.prune_prob >= 1.0
        self.outcomes: list[dict[str, Any]] = []
        self.results: list[StepResult] = []
        self.queries: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        self._serving = threading.Lock()
        self._completed = 0
        points = trigger_points(config)
        self._pending = deque(_Query(k + 1, t, k + 1 == len(points)) for k, t in enumerate(points))
        self._ready: deque[_Query] = deque()
        self._deferred: list[_Query] = []
        self.deadline_ns = 0
        self.timed_out = False
        self.stalled = False
        self._errors: list[BaseException] = []

    # ------------------------------------------------------------ helpers

    def context(self, worker: int, step: int, branch_id: str) -> StepContext:
        c = self.config
        return StepContext(
            workflow=c.workflow, worker=worker, step=step, branch_id=branch_id,
            schema_ops=c.schema_ops, mutations=c.data_ops, reads=c.reads, seed=c.seed,
            steps_per_worker=c.steps, warehouses=c.warehouses, multipliers=self.multipliers,
        )

    def _past_deadline(self) -> bool:
        if now_ns() >= self.deadline_ns:
            self.timed_out = True
        return self.timed_out

    def _checkpoint(self) -> None:
        if self._past_deadline():
            raise _Cancelled

    def _retry(self, fn, *, category: str, op: str, provenance=None, worker=None, branch_id=None):
        return with_retry(fn, self.policy, sink=self.sink, category=category, op=op, provenance=provenance,
                          worker=worker, branch_id=branch_id, sleep=self.sleep)

    def _wait_record(self, worker: int, step: int, start: int, op: str) -> None:
        rec = MetricRecord("wait", now_ns() - start, "ok", op, worker=worker, workflow=self.config.workflow,
                           step=step, start_ns=start)
        self.sink.add(rec)

    # --------------------------------------------------------------- steps

    def select_parent(self, worker: int, step: int) -> Reservation | None:
        """Reserve a slot, backing off while none is free; ``None`` if the tree is exhausted."""
        rng = random.Random(f"{self.config.seed}:{self.config.workflow}:{worker}:{step}:select")
        delay = PARENT_BACKOFF_BASE_S
        while True:
            try:
                return self.tree.reserve(rng)
            except TreeExhausted:
                return None
            except NoEligibleParent:
                if self._past_deadline():
                    raise _Cancelled from None
                start = now_ns()
                self.sleep(delay)
                self._wait_record(worker, step, start, "no_eligible_parent")
                delay = min(delay * 2, PARENT_BACKOFF_CAP_S)

    def run_step(self, worker: int, step: int) -> StepResult:
        cfg = self.config
        res = self.select_parent(worker, step)
        if res is None:
            self.stalled = True
            return StepResult(worker, step, SKIPPED, error_class="TreeExhausted")
        parent = self.tree.nodes[res.parent]
        result = StepResult(worker, step, FAILED, parent_id=parent.branch_id, depth=res.depth)
        phases = result.phases_ns
        node: BranchNode | None = None
        session = None
        phase = "branch"
        prov = Provenance(cfg.workflow, worker, step, "branch", 0)
        end_prov = Provenance(cfg.workflow, worker, step, "prune", 0)
        t0 = now_ns()
        try:
            bid = self._retry(lambda: self.backend.create_branch(parent.branch_id), category="branch_create",
                              op="create_branch", provenance=prov)
            result.branch_id = bid
            node = self.tree.attach(res, bid, worker, step)
            session = self._retry(lambda: self.backend.connect_branch(bid), category="branch_connect",
                                  op="connect_branch", provenance=prov, branch_id=bid)
            phases["branch"] = now_ns() - t0
            self._checkpoint()

            ops = instantiate_step_ops(self.template, self.context(worker, step, bid),
                                       step_rng(cfg.seed, cfg.workflow, worker, step))
            phase = "mutate"
            t0 = now_ns()
            outcome_row = None
            for op in ops:
                if op.provenance.phase == "evaluate" and phase == "mutate":
                    phases["mutate"] = now_ns() - t0
                    self._checkpoint()
                    phase = "evaluate"
                    t0 = now_ns()
                out = self._execute(session, op, worker, bid)
                if phase == "evaluate" and outcome_row is None:
                    outcome_row = out
            phases[phase] = now_ns() - t0
            self._checkpoint()

            phase = "prune"
            t0 = now_ns()
            coin = random.Random(f"{cfg.seed}:{cfg.workflow}:{worker}:{step}:prune").random()
            session.close()
            session = None
            if outcome_row is not None and self.outcome_mode:
                with self._lock:
                    self.outcomes.append({"worker": worker, "step": step, "branch_id": bid,
                                          "result": outcome_row})
            if coin < cfg.prune_prob:
                self._retry(lambda: self.backend.delete_branch(bid), category="branch_delete",
                            op="delete_branch", provenance=end_prov, branch_id=bid)
                self.tree.prune(res, node)
                result.outcome = PRUNED
            else:
                self.tree.commit(res, node)
                result.outcome = COMMITTED
            phases["prune"] = now_ns() - t0
            return result
        except (BackendError, _Cancelled) as exc:
            phases.setdefault(phase, now_ns() - t0)
            result.error_class = exc.error_class if isinstance(exc, BackendError) else "Timeout"
            if session is not None:
                session.close()
            if node is not None:
                try:
                    self._retry(lambda: self.backend.delete_branch(node.branch_id), category="branch_delete",
                                op="delete_branch", provenance=end_prov, branch_id=node.branch_id)
                except BackendError:
                    pass
            self.tree.fail(res, node)
            return result

    def _execute(self, session, op: OperationDescriptor, worker: int, branch_id: str) -> OpResult:
        kind = type(unwrap(op)).__name__
        return self._retry(lambda: session.execute(op), category=category_of(op), op=kind,
                           provenance=op.provenance, branch_id=branch_id)

    # ----------------------------------------------------- cross-branch

    def _finish_step(self, result: StepResult) -> None:
        with self._lock:
            self.results.append(result)
            if result.outcome != SKIPPED:
                self._completed += 1
            while self._pending and not self._pending[0].final and self._completed >= self._pending[0].threshold:
                self._ready.append(self._pending.popleft())
        if self.on_step is not None:
            self.on_step(self, result)
        self.serve_queries()

    def serve_queries(self) -> None:
        """Run ready queries FIFO; one claiming worker at a time."""
        if not self._serving.acquire(blocking=False):
            return
        try:
            while True:
                with self._lock:
                    if not self._ready:
                        return
                    q = self._ready.popleft()
                if not self.run_query(q):
                    self._deferred.append(q)
        finally:
            self._serving.release()

    def run_query(self, q: _Query) -> bool:
        """Execute query ``q``; ``False`` when the frontier is empty (deferred)."""
        cfg = self.config
        with self._lock:
            completed = self._completed
        entry = {"index": q.index, "threshold": q.threshold, "completed_steps": completed,
                 "mode": "outcomes" if self.outcome_mode else "frontier"}
        start = now_ns()
        try:
            if self.outcome_mode:
                with self._lock:
                    outcomes = list(self.outcomes)
                if not outcomes:
                    return False
                rows = []
                for o in outcomes:
                    r = o["result"]
                    rows.extend(dict(zip(r.columns or (), v)) for v in r.rows or ())
                res = group_aggregate(rows, (), self.template.outcome_outer)
                self.sink.add(MetricRecord("cross_branch_query", now_ns() - start, "ok", "outcome_aggregate",
                                           workflow=cfg.workflow, step=q.index, phase="cross_branch",
                                           start_ns=start))
                entry["branches"] = [o["branch_id"] for o in outcomes]
            else:
                nodes = self.tree.frontier_nodes()
                if not nodes:
                    return False
                frontier = [FrontierEntry(n.branch_id, n.worker, n.step) for n in nodes]
                op = instantiate_cross_branch_op(
                    self.template, frontier, random.Random(f"{cfg.seed}:{cfg.workflow}:cross:{q.index}"),
                    query_index=q.index, base_ctx=self.context(0, 0, self.backend.root_id),
                    subset=cfg.cross_branch_subset,
                )
                res = self._cross_branch(op)
                entry["branches"] = list(unwrap(op).branches)
            entry.update(status="ok", **_rows_json(res))
        except SchedulingError:
            return False
        except BackendError as exc:
            entry.update(status="failed", error_class=exc.error_class, message=str(exc))
        with self._lock:
            self.queries.append(entry)
        return True

    def _cross_branch(self, op: OperationDescriptor) -> OpResult:
        kind: CrossBranchAggregate = unwrap(op)
        root = self.backend.root_id
        if self.backend.capabilities.cross_branch:
            session = self._retry(lambda: self.backend.connect_branch(root), category="branch_connect",
                                  op="connect_branch", branch_id=root)
            try:
                return self._retry(lambda: session.execute(op), category="cross_branch_query",
                                   op="CrossBranchAggregate", provenance=op.provenance, branch_id=root)
            except UnsupportedOperation:
                pass
            finally:
                session.close()
        # Fallback: each target on its own session, merged harness-side.
        results = []
        for bid, inner in kind.targets:
            session = self._retry(lambda b=bid: self.backend.connect_branch(b), category="branch_connect",
                                  op="connect_branch", branch_id=bid)
            try:
                out = self._retry(lambda s=session, i=inner: s.execute(i), category="cross_branch_query",
                                  op="Aggregate", provenance=op.provenance, branch_id=bid)
            finally:
                session.close()
            results.append((bid, out))
        return merge_cross_branch(kind, results)

    # ------------------------------------------------------------- workers

    def worker_loop(self, worker: int) -> None:
        try:
            for step in range(self.config.steps):
                if self.timed_out or self.stalled or self._errors or self._past_deadline():
                    result = StepResult(worker, step, SKIPPED,
                                        error_class="Timeout" if self.timed_out else None)
                else:
                    result = self.run_step(worker, step)
                self._finish_step(result)
        except BaseException as exc:  # surfaced by run()
            with self._lock:
                self._errors.append(exc)

    def run(self) -> None:
        cfg = self.config
        self.deadline_ns = now_ns() + int(cfg.timeout_s * 1e9)
        if cfg.workers == 1:
            self.worker_loop(0)
        else:
            threads = [threading.Thread(target=self.worker_loop, args=(w,), name=f"worker-{w}", daemon=True)
                       for w in range(cfg.workers)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        if self._errors:
            raise self._errors[0]
        # Everything still queued, then the final query once all workers are done.
        with self._lock:
            leftover = list(self._ready) + self._deferred + list(self._pending)
            self._ready.clear()
            self._pending.clear()
            self._deferred = []
        for q in sorted(leftover, key=lambda q: q.index):
            if not self.run_query(q):
                self.queries.append({"index": q.index, "threshold": q.threshold, "status": "skipped",
                                     "reason": "no branches to compare"})

    # -------------------------------------------------------------- report

    def accounting(self) -> dict[str, int]:
        counts = {COMMITTED: 0, PRUNED: 0, FAILED: 0, SKIPPED: 0}
        for r in self.results:
            counts[r.outcome] += 1
        counts["total"] = sum(counts.values())
        return counts

    @property
    def status(self) -> str:
        if self.timed_out:
            return "timed_out"
        if self.stalled:
            return "stalled"
        return "completed"


def _load_root(backend: Backend, config: WorkflowConfig, dataset: Dataset | None) -> None:
    session = backend.connect_branch(backend.root_id)
    try:
        if session.list_tables():
            return
        if dataset is None:
            dataset = generate_dataset(DataGenConfig(config.warehouses, config.seed, config.multipliers))
        load_dataset(dataset, session)
    finally:
        session.close()


def _storage(backend: Backend) -> dict[str, Any] | None:
    if not backend.capabilities.storage_stats:
        return None
    return backend.storage_stats().to_json()


def run_workflow(config: WorkflowConfig, backend: Backend | None = None, *, dataset: Dataset | None = None,
                 on_step: Callable[[MacroRun, StepResult], None] | None = None,
                 sleep: Callable[[float], None] = time.sleep) -> WorkflowReport:
    """Run one workflow end to end and return its report.

    Without ``backend`` one is built from ``config.backend`` (wrapped with
    ``config.faults``) and closed afterwards. Loading the dataset into an
    empty root is not timed.
    """
    owned = backend is None
    try:
        if owned:
            backend = make_backend(config.backend, faults=config.faults or None, **config.backend_options)
        _load_root(backend, config, dataset)
    except (BackendError, ValueError, OSError) as exc:
        raise StartupError(f"backend {config.backend!r} unavailable: {exc}") from exc
    try:
        run = MacroRun(config, backend, on_step=on_step, sleep=sleep)
        root_footprint = backend.branch_footprint(backend.root_id) if backend.capabilities.storage_stats else None
        start = now_ns()
        run.run()
        elapsed = now_ns() - start
        reclaimed = backend.reclaim() if backend.capabilities.reclaim else 0
        storage = _storage(backend)
        if storage is not None:
            storage.update(root_footprint=root_footprint, reclaimed_at_end=reclaimed)
        run.results.sort(key=lambda r: (r.worker, r.step))
        return WorkflowReport(
            config=config.to_json(),
            records=run.sink.records(),
            end_to_end_ns=elapsed,
            storage=storage,
            accounting=run.accounting(),
            steps=[r.to_json() for r in run.results],
            tree=run.tree.snapshot(),
            cross_branch=sorted(run.queries, key=lambda q: q["index"]),
            status=run.status,
            kind="macro",
            extra={
                "mode": "outcomes" if run.outcome_mode else "frontier",
                "outcomes": [{"worker": o["worker"], "step": o["step"], "branch_id": o["branch_id"],
                              **_rows_json(o["result"])}
                             for o in sorted(run.outcomes, key=lambda o: (o["worker"], o["step"]))],
                "backend": backend.name,
            },
        )
    finally:
        if owned:
            backend.close()


def final_state_dump(report: WorkflowReport, backend: Backend | None = None) -> str:
    """Canonical text of a run's end state, comparable across backends.

    Frontier-mode runs dump every table of every frontier branch (needs the
    backend the run used); outcome-mode runs list the captured outcome rows.
    """
    lines: list[str] = []
    if report.extra.get("mode") == "outcomes":
        for o in report.extra["outcomes"]:
            lines.append(f"# outcome worker={o['worker']} step={o['step']} branch={o['branch_id']}")
            lines.append(",".join(o["columns"]))
            lines.extend(",".join(repr(v) for v in row) for row in o["rows"])
        return "\n".join(lines) + "\n"
    if backend is None:
        raise ValueError("a frontier dump needs the backend the run used")
    for bid in report.tree["frontier"]:
        for table, text in backend.dump_branch(bid).items():
            lines.append(f"# branch {bid} table {table}")
            lines.append(text.rstrip("\n"))
    return "\n".join(lines) + "\n"
