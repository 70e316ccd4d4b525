"""Synthetic fault injection: live-branch limits, rate limiting and latency."""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from ..errors import BranchLimitExceeded, RateLimited, Timeout
from ..schema import TableSchema
from . import Backend, BackendSession, BranchInfo, StorageStats

FAULT_OPS = ("create_branch", "connect_branch", "delete_branch", "execute")


@dataclass(frozen=True)
class FaultConfig:
    """``live_branch_limit`` counts live branches other than the root."""

    live_branch_limit: int | None = None
    rate_limit_prob: float = 0.0
    rate_limited_ops: tuple[str, ...] = ("create_branch", "connect_branch")
    latency_ms: Mapping[str, float] = field(default_factory=dict)
    op_timeout_ms: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.live_branch_limit is not None and self.live_branch_limit < 0:
            raise ValueError("live_branch_limit must be non-negative")
        if not 0.0 <= self.rate_limit_prob <= 1.0:
            raise ValueError("rate_limit_prob must lie in [0, 1]")
        for op in tuple(self.rate_limited_ops) + tuple(self.latency_ms):
            if op not in FAULT_OPS:
                raise ValueError(f"unknown fault target {op!r}; expected one of {FAULT_OPS}")

    @property
    def active(self) -> bool:
        return (self.live_branch_limit is not None or self.rate_limit_prob > 0
                or any(v > 0 for v in self.latency_ms.values()))

    @classmethod
    def from_mapping(cls, obj: Mapping[str, Any]) -> "FaultConfig":
        known = {"live_branch_limit", "rate_limit_prob", "rate_limited_ops", "latency_ms", "op_timeout_ms", "seed"}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown fault setting(s): {sorted(unknown)}")
        kwargs = dict(obj)
        if "rate_limited_ops" in kwargs:
            ops = kwargs["rate_limited_ops"]
            kwargs["rate_limited_ops"] = tuple(ops.split(",") if isinstance(ops, str) else ops)
        lat = kwargs.get("latency_ms")
        if isinstance(lat, (int, float)):
            kwargs["latency_ms"] = {op: float(lat) for op in FAULT_OPS}
        return cls(**kwargs)

    def to_json(self) -> dict[str, Any]:
        return {
            "live_branch_limit": self.live_branch_limit,
            "rate_limit_prob": self.rate_limit_prob,
            "rate_limited_ops": list(self.rate_limited_ops),
            "latency_ms": dict(self.latency_ms),
            "op_timeout_ms": self.op_timeout_ms,
            "seed": self.seed,
        }


class _Injector:
    def __init__(self, config: FaultConfig):
        self.config = config
        self._rng = random.Random(config.seed)
        self._lock = threading.Lock()

    def before(self, op: str) -> None:
        cfg = self.config
        delay = cfg.latency_ms.get(op, 0.0)
        if delay > 0:
            if cfg.op_timeout_ms is not None and delay >= cfg.op_timeout_ms:
                time.sleep(cfg.op_timeout_ms / 1000)
                raise Timeout(f"{op} exceeded {cfg.op_timeout_ms} ms")
            time.sleep(delay / 1000)
        if cfg.rate_limit_prob > 0 and op in cfg.rate_limited_ops:
            with self._lock:
                hit = self._rng.random() < cfg.rate_limit_prob
            if hit:
                raise RateLimited(f"injected rate limit on {op}")


class FaultInjectingSession(BackendSession):
    def __init__(self, inner: BackendSession, injector: _Injector):
        self.inner = inner
        self.injector = injector
        self.branch_id = inner.branch_id

    @property
    def state(self) -> str:
        return self.inner.state

    def execute(self, op):
        self.injector.before("execute")
        return self.inner.execute(op)

    def list_tables(self) -> list[str]:
        return self.inner.list_tables()

    def load_table(self, schema: TableSchema, rows: Iterable[Sequence[Any]]) -> int:
        return self.inner.load_table(schema, rows)

    def close(self) -> None:
        self.inner.close()


class FaultInjectingBackend(Backend):
    """Wraps a backend and injects the configured faults before delegating."""

    def __init__(self, inner: Backend, config: FaultConfig):
        self.inner = inner
        self.config = config
        self.name = inner.name
        self.capabilities = inner.capabilities
        self._injector = _Injector(config)
        self._create_lock = threading.Lock()

    @property
    def root_id(self) -> str:
        return self.inner.root_id

    def create_branch(self, parent: str) -> str:
        self._injector.before("create_branch")
        limit = self.config.live_branch_limit
        if limit is None:
            return self.inner.create_branch(parent)
        # Check-and-create must be atomic or concurrent creators overshoot.
        with self._create_lock:
            live = len(self.inner.list_branches()) - 1
            if live >= limit:
                raise BranchLimitExceeded(f"{live} live branches; limit is {limit}")
            return self.inner.create_branch(parent)

    def connect_branch(self, branch_id: str) -> BackendSession:
        self._injector.before("connect_branch")
        return FaultInjectingSession(self.inner.connect_branch(branch_id), self._injector)

    def delete_branch(self, branch_id: str) -> None:
        self._injector.before("delete_branch")
        self.inner.delete_branch(branch_id)

    def list_branches(self) -> list[str]:
        return self.inner.list_branches()

    def branch_info(self, branch_id: str) -> BranchInfo:
        return self.inner.branch_info(branch_id)

    def storage_stats(self) -> StorageStats:
        return self.inner.storage_stats()

    def branch_footprint(self, branch_id: str) -> int:
        return self.inner.branch_footprint(branch_id)

    def reclaim(self) -> int:
        return self.inner.reclaim()

    def dump_branch(self, branch_id: str) -> dict[str, str]:
        return self.inner.dump_branch(branch_id)

    def close(self) -> None:
        self.inner.close()
