"""Branch lifecycle contract, sessions, retry policy and backend selection."""

from __future__ import annotations

import random
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence, TypeVar

from ..errors import (
    BackendError,
    BranchLimitExceeded,
    Conflict,
    InternalError,
    NotFound,
    RateLimited,
    SessionClosed,
    Timeout,
    UnsupportedOperation,
)
from ..metrics import MetricRecord, MetricSink, now_ns
from ..opmodel.evaluate import OpResult
from ..schema import TableSchema

__all__ = [
    "Backend", "BackendSession", "BranchInfo", "Capabilities", "StorageStats", "RetryPolicy",
    "with_retry", "make_backend", "BACKEND_NAMES", "register_backend", "BackendError", "RateLimited",
    "BranchLimitExceeded", "Timeout", "NotFound", "UnsupportedOperation", "Conflict", "InternalError",
    "SessionClosed",
]

T = TypeVar("T")


@dataclass(frozen=True)
class BranchInfo:
    branch_id: str
    parent: str | None
    created_at_ns: int


@dataclass(frozen=True)
class Capabilities:
    cross_branch: bool = False
    storage_stats: bool = False
    reclaim: bool = False


@dataclass
class StorageStats:
    """Logical-byte accounting; ``live + reclaimable`` is everything still allocated."""

    live_bytes: int
    reclaimable_bytes: int = 0
    per_branch: dict[str, int] = field(default_factory=dict)
    peak_live_bytes: int = 0
    reclaimed_total: int = 0

    @property
    def allocated_bytes(self) -> int:
        return self.live_bytes + self.reclaimable_bytes

    def to_json(self) -> dict[str, Any]:
        return {
            "live_bytes": self.live_bytes,
            "reclaimable_bytes": self.reclaimable_bytes,
            "per_branch": dict(self.per_branch),
            "peak_live_bytes": self.peak_live_bytes,
            "reclaimed_total": self.reclaimed_total,
        }


class BackendSession(ABC):
    """A connection bound to one branch; executes one operation at a time."""

    branch_id: str

    @property
    @abstractmethod
    def state(self) -> str:
        """``connected`` or ``closed``."""

    @abstractmethod
    def execute(self, op) -> OpResult:
        """Run one descriptor; raises :class:`BackendError` on failure."""

    @abstractmethod
    def list_tables(self) -> list[str]: ...

    @abstractmethod
    def load_table(self, schema: TableSchema, rows: Iterable[Sequence[Any]]) -> int: ...

    @abstractmethod
    def close(self) -> None: ...

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class Backend(ABC):
    name = ""
    capabilities = Capabilities()

    @property
    @abstractmethod
    def root_id(self) -> str: ...

    @abstractmethod
    def create_branch(self, parent: str) -> str: ...

    @abstractmethod
    def connect_branch(self, branch_id: str) -> BackendSession: ...

    @abstractmethod
    def delete_branch(self, branch_id: str) -> None: ...

    @abstractmethod
    def list_branches(self) -> list[str]:
        """Live (non-deleted) branch ids, root first."""

    @abstractmethod
    def branch_info(self, branch_id: str) -> BranchInfo: ...

    def storage_stats(self) -> StorageStats:
        raise UnsupportedOperation(f"{self.name} does not report storage statistics")

    def branch_footprint(self, branch_id: str) -> int:
        raise UnsupportedOperation(f"{self.name} does not report storage statistics")

    def reclaim(self) -> int:
        """Free reclaimable storage; returns bytes freed."""
        return 0

    def dump_branch(self, branch_id: str) -> dict[str, str]:
        """Canonical CSV text per table, rows sorted by primary key."""
        raise UnsupportedOperation(f"{self.name} cannot dump branch state")

    def close(self) -> None:
        pass


# --------------------------------------------------------------------- retry


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_backoff_s: float = 0.01
    multiplier: float = 2.0
    max_backoff_s: float = 1.0
    op_timeout_s: float = 30.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        if self.base_backoff_s < 0 or self.max_backoff_s < 0:
            raise ValueError("backoff must be non-negative")
        if self.multiplier < 1:
            raise ValueError("backoff multiplier must be at least 1")
        if self.op_timeout_s <= 0:
            raise ValueError("op_timeout_s must be positive")

    def backoff(self, attempt: int) -> float:
        """Delay after failed attempt number ``attempt`` (1-based)."""
        return min(self.max_backoff_s, self.base_backoff_s * self.multiplier ** (attempt - 1))

    def worst_case_wait(self) -> float:
        return sum(self.backoff(a) for a in range(1, self.max_attempts))


def with_retry(
    fn: Callable[[], T],
    policy: RetryPolicy,
    *,
    sink: MetricSink | None = None,
    category: str = "read_query",
    op: str = "",
    provenance=None,
    worker: int | None = None,
    branch_id: str | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> T:
    """Call ``fn`` until it succeeds, retrying retryable errors with backoff.

    Every attempt becomes one record in ``sink``; each backoff sleep becomes a
    ``wait`` record.
    """

    def record(cat: str, start: int, end: int, outcome: str, attempt: int, name: str) -> None:
        if sink is None:
            return
        rec = MetricRecord(cat, end - start, outcome, name, attempt, worker, branch_id=branch_id, start_ns=start)
        rec.with_provenance(provenance)
        if worker is not None:
            rec.worker = worker
        sink.add(rec)

    attempt = 0
    while True:
        attempt += 1
        start = now_ns()
        try:
            result = fn()
        except BackendError as exc:
            record(category, start, now_ns(), exc.error_class, attempt, op)
            if not exc.retryable or attempt >= policy.max_attempts:
                raise
            delay = policy.backoff(attempt)
            w0 = now_ns()
            sleep(delay)
            record("wait", w0, now_ns(), "ok", attempt, f"backoff:{op}")
            continue
        record(category, start, now_ns(), "ok", attempt, op)
        return result


# ------------------------------------------------------------------- registry

_FACTORIES: dict[str, Callable[..., Backend]] = {}
BACKEND_NAMES = ("fullcopy", "deltaoverlay", "pathcopy", "external-sql")


def register_backend(name: str, factory: Callable[..., Backend]) -> None:
    _FACTORIES[name] = factory


def _ensure_registered() -> None:
    # Both imports are idempotent; either may already have run on its own.
    from .. import refbackends  # noqa: F401  (registers the reference stores)
    from . import sql  # noqa: F401


def make_backend(name: str, *, faults: Mapping[str, Any] | None = None, **options: Any) -> Backend:
    """Instantiate a backend by name, optionally wrapped in fault injection."""
    _ensure_registered()
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise ValueError(f"unknown backend {name!r}; expected one of {sorted(_FACTORIES)}") from None
    backend = factory(**options)
    if faults:
        from .faults import FaultConfig, FaultInjectingBackend

        cfg = faults if isinstance(faults, FaultConfig) else FaultConfig.from_mapping(faults)
        if cfg.active:
            backend = FaultInjectingBackend(backend, cfg)
    return backend


def stable_rng(seed: int, *parts: object) -> random.Random:
    return random.Random(":".join([str(seed), *map(str, parts)]))
