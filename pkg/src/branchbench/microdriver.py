"""Scripted branch-lifecycle scenarios: an untimed setup script, then a timed one.

A scenario is plain JSON::

    {"name": "spine_create",
     "params": {"branches": 100},
     "setup": [],
     "execution": [
        {"op": "loop", "var": "i", "from": 1, "to": "$branches", "body": [
            {"op": "create", "parent": "b{i-1}", "as": "b{i}"},
            {"op": "connect", "branch": "b{i}", "as": "s{i}"}]}]}

Operations: ``create`` (parent, as), ``connect`` (branch, as), ``delete``
(branch), ``write`` (session, key), ``point_read`` (session, key),
``range_read`` (session, size, start), plus the constructs ``loop`` (var,
from, to inclusive, body), ``repeat`` (count, body) and ``parallel``
(workers, var, body). ``$name`` substitutes a parameter; ``{expr}`` inside a
string substitutes simple integer arithmetic over loop variables. The
handle ``root`` (alias ``b0``) names the root branch. Reads and writes
target the stock table; a ``key`` is either ``"random"`` or a stock item
number.

Every execution-phase lifecycle/read/write call yields exactly one sample.
A ``connect`` that follows the same worker's ``create`` of that branch also
yields a derived ``create_connect`` sample holding the sum of the two.
"""

from __future__ import annotations

import ast
import csv
import json
import operator
import random
import re
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping

from .backend import Backend, BackendSession, make_backend
from .datagen import SCHEMAS, DataGenConfig, Dataset, generate_dataset, load_dataset
from .errors import BackendError
from .metrics import (
    SCHEMA_VERSION,
    MetricRecord,
    WorkflowReport,
    fmt_ms,
    nearest_rank,
    now_ns,
)
from .opmodel.descriptors import Arith, KeyEq, PointRead, RangeRead, UpdateWhere

LIFECYCLE_OPS = ("create", "connect", "delete")
DATA_OPS = ("write", "point_read", "range_read")
SAMPLED_OPS = LIFECYCLE_OPS + DATA_OPS
READ_OPS = ("point_read", "range_read")
CONSTRUCTS = ("loop", "repeat", "parallel")

OP_CATEGORY = {
    "create": "branch_create",
    "connect": "branch_connect",
    "delete": "branch_delete",
    "write": "data_mutation",
    "point_read": "read_query",
    "range_read": "read_query",
}

DEFAULT_RANGE_SIZE = 100
DEFAULT_BUCKET_WIDTH = 10
STOCK_KEY = SCHEMAS["stock"].primary_key

PLOT_COLUMNS = ("schema_version", "scenario", "backend", "op", "ordinal", "worker", "repetition",
                "branches", "workers", "range_size", "duration_ms", "outcome")


class ScenarioError(ValueError):
    """The script is malformed or names a handle that does not exist."""


# ------------------------------------------------------------------ config


@dataclass
class ScenarioConfig:
    name: str
    execution: list[dict[str, Any]]
    setup: list[dict[str, Any]] = field(default_factory=list)
    params: dict[str, Any] = field(default_factory=dict)
    repetitions: int = 1
    backend: str = "fullcopy"
    warehouses: int = 1
    seed: int = 0
    bucket_width: int = DEFAULT_BUCKET_WIDTH
    multipliers: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise ScenarioError("repetitions must be at least 1")
        if self.bucket_width < 1:
            raise ScenarioError("bucket_width must be at least 1")
        if not isinstance(self.execution, list) or not isinstance(self.setup, list):
            raise ScenarioError("setup and execution must be lists of operations")

    @property
    def workers(self) -> int:
        return int(self.params.get("workers", 1))

    def with_params(self, **params: Any) -> "ScenarioConfig":
        merged = {**self.params, **{k: v for k, v in params.items() if v is not None}}
        return ScenarioConfig(**{**asdict(self), "params": merged})

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "ScenarioConfig":
        if not isinstance(obj, Mapping) or "execution" not in obj or "name" not in obj:
            raise ScenarioError("a scenario needs at least 'name' and 'execution'")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from None


def load_scenario(path: str | Path) -> ScenarioConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
    return ScenarioConfig.from_json(obj)


def _op(kind: str, **fields: Any) -> dict[str, Any]:
    return {"op": kind, **fields}


def builtin_scenarios() -> dict[str, ScenarioConfig]:
    loop = lambda var, to, body, start=1: _op("loop", var=var, **{"from": start}, to=to, body=body)  # noqa: E731
    return {
        # Chain of branches, each forked from the previous one.
        "spine_create": ScenarioConfig(
            "spine_create",
            params={"branches": 100},
            execution=[loop("i", "$branches", [
                _op("create", parent="b{i-1}", **{"as": "b{i}"}),
                _op("connect", branch="b{i}", **{"as": "s{i}"}),
            ])],
        ),
        # k concurrent workers, each forking from root: a wide depth-1 tree.
        "wide_connect": ScenarioConfig(
            "wide_connect",
            params={"workers": 8, "branches": 1},
            execution=[_op("parallel", workers="$workers", var="w", body=[loop("i", "$branches", [
                _op("create", parent="root", **{"as": "w{w}_{i}"}),
                _op("connect", branch="w{w}_{i}", **{"as": "s{w}_{i}"}),
            ])])],
        ),
        # One active branch; the others only exist.
        "read_single_thread": ScenarioConfig(
            "read_single_thread",
            params={"branches": 1, "reads": 200, "range_size": DEFAULT_RANGE_SIZE},
            setup=[
                loop("i", "$branches", [_op("create", parent="root", **{"as": "b{i}"})]),
                _op("connect", branch="b1", **{"as": "s"}),
            ],
            execution=[_op("repeat", count="$reads", body=[
                _op("range_read", session="s", size="$range_size", start="random"),
            ])],
        ),
        # Each branch is read by its own worker.
        "read_multi_thread": ScenarioConfig(
            "read_multi_thread",
            params={"branches": 8, "reads": 100, "range_size": DEFAULT_RANGE_SIZE},
            setup=[loop("i", "$branches", [
                _op("create", parent="root", **{"as": "b{i}"}),
                _op("connect", branch="b{i}", **{"as": "s{i}"}),
            ])],
            execution=[_op("parallel", workers="$branches", var="w", body=[
                _op("repeat", count="$reads", body=[
                    _op("range_read", session="s{w+1}", size="$range_size", start="random"),
                ]),
            ])],
        ),
        "point_vs_range": ScenarioConfig(
            "point_vs_range",
            params={"reads": 200, "range_size": DEFAULT_RANGE_SIZE},
            setup=[_op("create", parent="root", **{"as": "b1"}), _op("connect", branch="b1", **{"as": "s"})],
            execution=[
                _op("repeat", count="$reads", body=[_op("point_read", session="s", key="random")]),
                _op("repeat", count="$reads", body=[
                    _op("range_read", session="s", size="$range_size", start="random"),
                ]),
            ],
        ),
    }


BUILTIN_NAMES = ("spine_create", "wide_connect", "read_single_thread", "read_multi_thread", "point_vs_range")


def get_scenario(name_or_path: str) -> ScenarioConfig:
    builtins = builtin_scenarios()
    if name_or_path in builtins:
        return builtins[name_or_path]
    if Path(name_or_path).is_file():
        return load_scenario(name_or_path)
    raise ScenarioError(f"unknown scenario {name_or_path!r}; builtins are {', '.join(BUILTIN_NAMES)}")


# -------------------------------------------------------------- templating

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.FloorDiv: operator.floordiv,
           ast.Mod: operator.mod}
_TEMPLATE = re.compile(r"\{([^{}]*)\}")


def _eval_int(expr: str, env: Mapping[str, int]) -> int:
    def ev(node: ast.AST) -> int:
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, int):
            return node.value
        if isinstance(node, ast.Name):
            if node.id not in env:
                raise ScenarioError(f"undefined variable {node.id!r} in {{{expr}}}")
            return env[node.id]
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -ev(node.operand)
        raise ScenarioError(f"unsupported expression {{{expr}}}")

    try:
        tree = ast.parse(expr.strip(), mode="eval")
    except SyntaxError:
        raise ScenarioError(f"bad expression {{{expr}}}") from None
    return ev(tree)


def resolve(value: Any, env: Mapping[str, int], params: Mapping[str, Any]) -> Any:
    if isinstance(value, list):
        return [resolve(v, env, params) for v in value]
    if not isinstance(value, str):
        return value
    if value.startswith("$"):
        name = value[1:]
        if name not in params:
            raise ScenarioError(f"undefined parameter {value}")
        return params[name]
    whole = _TEMPLATE.fullmatch(value)
    if whole:
        return _eval_int(whole.group(1), env)
    return _TEMPLATE.sub(lambda m: str(_eval_int(m.group(1), env)), value)


@dataclass(frozen=True)
class Call:
    op: str
    args: dict[str, Any]


@dataclass(frozen=True)
class Parallel:
    workers: int
    var: str
    body: list
    env: dict[str, int]


def expand(script: list, env: Mapping[str, int], params: Mapping[str, Any]) -> Iterator[Call | Parallel]:
    """Flatten loops into concrete calls; ``parallel`` blocks stay nested."""
    for raw in script:
        if not isinstance(raw, Mapping) or "op" not in raw:
            raise ScenarioError(f"not an operation: {raw!r}")
        kind = raw["op"]
        if kind == "loop":
            lo = int(resolve(raw.get("from", 1), env, params))
            hi = int(resolve(raw["to"], env, params))
            for v in range(lo, hi + 1):
                yield from expand(raw["body"], {**env, raw.get("var", "i"): v}, params)
        elif kind == "repeat":
            for _ in range(int(resolve(raw["count"], env, params))):
                yield from expand(raw["body"], env, params)
        elif kind == "parallel":
            n = int(resolve(raw["workers"], env, params))
            if n < 1:
                raise ScenarioError("parallel needs at least one worker")
            yield Parallel(n, raw.get("var", "w"), raw["body"], dict(env))
        elif kind in SAMPLED_OPS:
            args = {k: resolve(v, env, params) for k, v in raw.items() if k != "op"}
            yield Call(kind, args)
        else:
            raise ScenarioError(f"unknown operation {kind!r}")


_REQUIRED = {
    "create": ("parent", "as"),
    "connect": ("branch", "as"),
    "delete": ("branch",),
    "write": ("session",),
    "point_read": ("session",),
    "range_read": ("session",),
}


def _check_call(call: Call, branches: set[str], sessions: set[str]) -> None:
    for name in _REQUIRED[call.op]:
        if name not in call.args:
            raise ScenarioError(f"{call.op} needs '{name}'")
    a = call.args
    if call.op == "create":
        if a["parent"] not in branches:
            raise ScenarioError(f"create from undefined branch handle {a['parent']!r}")
        branches.add(a["as"])
    elif call.op == "connect":
        if a["branch"] not in branches:
            raise ScenarioError(f"connect to undefined branch handle {a['branch']!r}")
        sessions.add(a["as"])
    elif call.op == "delete":
        if a["branch"] not in branches:
            raise ScenarioError(f"delete of undefined branch handle {a['branch']!r}")
        branches.discard(a["branch"])
    elif a["session"] not in sessions:
        raise ScenarioError(f"{call.op} on undefined session handle {a['session']!r}")


def validate(config: ScenarioConfig, params: Mapping[str, Any] | None = None) -> int:
    """Dry-run both scripts; returns the number of execution calls. Raises :class:`ScenarioError`."""
    params = config.params if params is None else params
    branches, sessions = {"root", "b0"}, set()

    def walk(script, env) -> int:
        n = 0
        for item in expand(script, env, params):
            if isinstance(item, Parallel):
                for w in range(item.workers):
                    n += walk(item.body, {**item.env, item.var: w})
            else:
                _check_call(item, branches, sessions)
                n += 1
        return n

    walk(config.setup, {})
    return walk(config.execution, {})


# ---------------------------------------------------------------- running


@dataclass
class Sample:
    op: str
    ordinal: int
    worker: int
    duration_ns: int
    outcome: str = "ok"
    repetition: int = 0
    start_ns: int = 0

    @property
    def ok(self) -> bool:
        return self.outcome == "ok"


class _State:
    def __init__(self, backend: Backend):
        self.backend = backend
        self.branches: dict[str, str] = {"root": backend.root_id, "b0": backend.root_id}
        self.sessions: dict[str, BackendSession] = {}
        self.lock = threading.Lock()

    def branch(self, handle: str) -> str:
        with self.lock:
            try:
                return self.branches[handle]
            except KeyError:
                raise ScenarioError(f"undefined branch handle {handle!r}") from None

    def session(self, handle: str) -> BackendSession:
        with self.lock:
            try:
                return self.sessions[handle]
            except KeyError:
                raise ScenarioError(f"undefined session handle {handle!r}") from None

    def close(self) -> None:
        for s in self.sessions.values():
            s.close()
        self.sessions.clear()


class _Worker:
    def __init__(self, run: "_Run", worker: int, timed: bool):
        self.run = run
        self.worker = worker
        self.timed = timed
        self.rng = random.Random(f"{run.config.seed}:{run.repetition}:{worker}:{'exec' if timed else 'setup'}")
        self.ordinals: dict[str, int] = {}
        self.created: dict[str, tuple[int, int]] = {}

    def key_for(self, spec: Any) -> tuple[int, int]:
        n = self.run.stock_rows
        item = self.rng.randint(1, n) if spec in (None, "random") else int(spec)
        if not 1 <= item <= n:
            raise ScenarioError(f"stock item {item} outside 1..{n}")
        return (1, item)

    def call(self, c: Call) -> None:
        st = self.run.state
        a = c.args
        op = None
        if c.op == "write":
            op = UpdateWhere("stock", (("s_quantity", Arith("s_quantity", "+", 1)),),
                             KeyEq(STOCK_KEY, self.key_for(a.get("key"))))
        elif c.op == "point_read":
            op = PointRead("stock", STOCK_KEY, self.key_for(a.get("key")))
        elif c.op == "range_read":
            size = int(a.get("size", DEFAULT_RANGE_SIZE))
            n = self.run.stock_rows
            if not 1 <= size <= n:
                raise ScenarioError(f"range size {size} outside 1..{n}")
            start = a.get("start", "random")
            lo = self.rng.randint(1, n - size + 1) if start in (None, "random") else int(start)
            op = RangeRead("stock", STOCK_KEY, (1, lo), (1, lo + size - 1))

        outcome = "ok"
        t0 = now_ns()
        try:
            if c.op == "create":
                result = st.backend.create_branch(st.branch(a["parent"]))
            elif c.op == "connect":
                result = st.backend.connect_branch(st.branch(a["branch"]))
            elif c.op == "delete":
                result = st.backend.delete_branch(st.branch(a["branch"]))
            else:
                result = st.session(a["session"]).execute(op)
        except BackendError as exc:
            if not self.timed:
                raise ScenarioError(f"setup {c.op} failed: {exc.error_class}: {exc}") from exc
            result, outcome = None, exc.error_class
        dur = now_ns() - t0

        if outcome == "ok":
            with st.lock:
                if c.op == "create":
                    st.branches[a["as"]] = result
                elif c.op == "connect":
                    st.sessions[a["as"]] = result
                elif c.op == "delete":
                    st.branches.pop(a["branch"], None)
        if not self.timed:
            return
        ordinal = self.ordinals.get(c.op, 0) + 1
        self.ordinals[c.op] = ordinal
        self.run.add(Sample(c.op, ordinal, self.worker, dur, outcome, self.run.repetition, t0))
        if c.op == "create" and outcome == "ok":
            self.created[a["as"]] = (ordinal, dur)
        elif c.op == "connect" and outcome == "ok" and a["branch"] in self.created:
            ordinal0, create_dur = self.created.pop(a["branch"])
            self.run.add_derived(Sample("create_connect", ordinal0, self.worker, create_dur + dur, "ok",
                                        self.run.repetition, t0))

    def walk(self, script: list, env: Mapping[str, int]) -> None:
        for item in expand(script, env, self.run.params):
            if isinstance(item, Parallel):
                self.run.parallel(item, self.timed)
            else:
                self.call(item)


class _Run:
    def __init__(self, config: ScenarioConfig, backend: Backend, repetition: int, stock_rows: int):
        self.config = config
        self.params = config.params
        self.state = _State(backend)
        self.repetition = repetition
        self.stock_rows = stock_rows
        self.samples: list[Sample] = []
        self.derived: list[Sample] = []
        self._lock = threading.Lock()

    def add(self, s: Sample) -> None:
        with self._lock:
            self.samples.append(s)

    def add_derived(self, s: Sample) -> None:
        with self._lock:
            self.derived.append(s)

    def parallel(self, block: Parallel, timed: bool) -> None:
        errors: list[BaseException] = []

        def body(w: int) -> None:
            try:
                _Worker(self, w, timed).walk(block.body, {**block.env, block.var: w})
            except BaseException as exc:
                errors.append(exc)

        threads = [threading.Thread(target=body, args=(w,), daemon=True) for w in range(block.workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    backend: str
    samples: list[Sample]
    derived: list[Sample]
    timed_wall_ns: int
    setup_wall_ns: int

    @property
    def timed_total_ns(self) -> int:
        """Sum of execution-phase samples (setup never contributes)."""
        return sum(s.duration_ns for s in self.samples)

    def durations(self, op: str, *, ok_only: bool = True) -> list[int]:
        pool = self.derived if op == "create_connect" else self.samples
        return [s.duration_ns for s in pool if s.op == op and (s.ok or not ok_only)]

    def median_ms(self, op: str) -> float:
        vals = sorted(self.durations(op))
        return nearest_rank(vals, 50) / 1e6

    def throughput(self, ops: tuple[str, ...] = READ_OPS) -> float:
        """Completed ops per second of timed wall-clock."""
        done = sum(1 for s in self.samples if s.op in ops and s.ok)
        return done / (self.timed_wall_ns / 1e9) if self.timed_wall_ns else 0.0

    def percentiles(self) -> list[dict[str, Any]]:
        """p50/p95/p99 per (op, ordinal bucket) over successful samples."""
        width = self.config.bucket_width
        groups: dict[tuple[str, int], list[int]] = {}
        failures: dict[tuple[str, int], int] = {}
        for s in self.samples + self.derived:
            b = (s.ordinal - 1) // width * width + 1
            if s.ok:
                groups.setdefault((s.op, b), []).append(s.duration_ns)
            else:
                failures[(s.op, b)] = failures.get((s.op, b), 0) + 1
        out = []
        for (op, b) in sorted(set(groups) | set(failures)):
            vals = sorted(groups.get((op, b), []))
            row = {"op": op, "bucket_lo": b, "bucket_hi": b + width - 1, "count": len(vals),
                   "failures": failures.get((op, b), 0)}
            if vals:
                row.update({f"p{p}": nearest_rank(vals, p) / 1e6 for p in (50, 95, 99)})
            out.append(row)
        return out

    def to_report(self) -> WorkflowReport:
        records = [MetricRecord(OP_CATEGORY[s.op], s.duration_ns, s.outcome, s.op, worker=s.worker,
                                step=s.ordinal, phase="execution", start_ns=s.start_ns)
                   for s in self.samples]
        failed = sum(1 for s in self.samples if not s.ok)
        return WorkflowReport(
            config={"scenario": self.config.to_json(), "backend": self.backend},
            records=records,
            end_to_end_ns=self.timed_wall_ns,
            accounting={"samples": len(self.samples), "failed": failed, "derived": len(self.derived)},
            status="completed",
            kind="micro",
            extra={
                "percentiles": self.percentiles(),
                "throughput_ops_per_s": self.throughput(),
                "timed_total_ns": self.timed_total_ns,
                "setup_wall_ns": self.setup_wall_ns,
                "derived": [asdict(s) for s in self.derived],
            },
        )

    def plot_rows(self) -> list[list[Any]]:
        p = self.config.params
        rows = []
        for s in self.samples + self.derived:
            rows.append([SCHEMA_VERSION, self.config.name, self.backend, s.op, s.ordinal, s.worker, s.repetition,
                         p.get("branches", ""), p.get("workers", ""), p.get("range_size", ""),
                         fmt_ms(s.duration_ns), s.outcome])
        return rows

    def write_plot_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PLOT_COLUMNS)
            w.writerows(self.plot_rows())
        return path


def run_scenario(config: ScenarioConfig, backend: Backend | None = None, *,
                 dataset: Dataset | None = None) -> ScenarioResult:
    """Validate, then run setup (untimed) and execution (timed) ``repetitions`` times.

    With ``backend`` given only one repetition is allowed, since each
    repetition needs a fresh store; without it a fresh backend is built per
    repetition.
    """
    validate(config)
    if backend is not None and config.repetitions != 1:
        raise ScenarioError("a caller-supplied backend supports a single repetition")
    if dataset is None:
        dataset = generate_dataset(DataGenConfig(config.warehouses, config.seed, config.multipliers))
    stock_rows = dataset.row_counts()["stock"] // config.warehouses
    samples: list[Sample] = []
    derived: list[Sample] = []
    timed = setup = 0
    name = backend.name if backend is not None else config.backend
    for rep in range(config.repetitions):
        be = backend if backend is not None else make_backend(config.backend)
        try:
            with be.connect_branch(be.root_id) as session:
                if not session.list_tables():
                    load_dataset(dataset, session)
            run = _Run(config, be, rep, stock_rows)
            t0 = now_ns()
            _Worker(run, 0, timed=False).walk(config.setup, {})
            t1 = now_ns()
            _Worker(run, 0, timed=True).walk(config.execution, {})
            t2 = now_ns()
            run.state.close()
        finally:
            if backend is None:
                be.close()
        setup += t1 - t0
        timed += t2 - t1
        samples.extend(run.samples)
        derived.extend(run.derived)
    return ScenarioResult(config, name, samples, derived, timed, setup)
