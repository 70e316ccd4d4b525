"""Lifecycle bookkeeping and sessions shared by the reference stores."""

from __future__ import annotations

import itertools
import threading
from abc import abstractmethod
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from ..backend import Backend, BackendSession, BranchInfo, Capabilities, StorageStats
from ..errors import Conflict, NotFound, SessionClosed, UnsupportedOperation
from ..metrics import now_ns
from ..opmodel.descriptors import CrossBranchAggregate, unwrap
from ..opmodel.evaluate import OpResult, merge_cross_branch
from ..schema import TableSchema
from .interpreter import BranchView, dump_view, interpret, load_rows

ROOT_ID = "main"


@dataclass
class BranchEntry:
    branch_id: str
    parent: str | None
    created_at_ns: int
    state: Any
    lock: threading.RLock = field(default_factory=threading.RLock)
    children: set[str] = field(default_factory=set)
    deleted: bool = False


class RefSession(BackendSession):
    def __init__(self, backend: "RefBackend", branch_id: str):
        self.backend = backend
        self.branch_id = branch_id
        self._closed = False
        self._lock = threading.Lock()

    @property
    def state(self) -> str:
        return "closed" if self._closed else "connected"

    def _check(self) -> None:
        if self._closed:
            raise SessionClosed(f"session on {self.branch_id} is closed")

    def execute(self, op) -> OpResult:
        with self._lock:
            self._check()
            if isinstance(unwrap(op), CrossBranchAggregate):
                return self.backend.cross_branch(unwrap(op))
            return self.backend.run(self.branch_id, lambda view: interpret(view, op), write=True)

    def list_tables(self) -> list[str]:
        with self._lock:
            self._check()
            return self.backend.run(self.branch_id, lambda view: view.tables())

    def load_table(self, schema: TableSchema, rows: Iterable[Sequence[Any]]) -> int:
        with self._lock:
            self._check()
            dict_rows = load_rows(schema, rows)

            def load(view: BranchView) -> int:
                if schema.name in view.tables():
                    raise Conflict(f"table {schema.name} already exists on {self.branch_id}")
                return view.create_table(schema, dict_rows)

            return self.backend.run(self.branch_id, load, write=True)

    def close(self) -> None:
        self._closed = True


class RefBackend(Backend):
    """Branch registry plus hooks each storage mechanism fills in.

    Lifecycle calls serialize on a catalog lock; data operations take only
    the target branch's lock, so sessions on distinct branches run
    concurrently.
    """

    capabilities = Capabilities(cross_branch=True, storage_stats=True, reclaim=True)

    def __init__(self, *, cross_branch: bool = True):
        if not cross_branch:
            self.capabilities = Capabilities(cross_branch=False, storage_stats=True, reclaim=True)
        self._catalog = threading.Lock()
        self._ids = itertools.count(1)
        self._branches: dict[str, BranchEntry] = {}
        root = BranchEntry(ROOT_ID, None, now_ns(), self._new_root())
        self._branches[ROOT_ID] = root

    # -- mechanism hooks ----------------------------------------------------

    @abstractmethod
    def _new_root(self) -> Any: ...

    @abstractmethod
    def _fork(self, parent_state: Any) -> Any:
        """New branch state equal to ``parent_state`` (caller holds the parent lock)."""

    @abstractmethod
    def _drop(self, state: Any) -> None: ...

    @abstractmethod
    def _view(self, state: Any) -> BranchView: ...

    @abstractmethod
    def _footprint(self, state: Any) -> int: ...

    @abstractmethod
    def storage_stats(self) -> StorageStats: ...

    # -- lifecycle ----------------------------------------------------------

    @property
    def root_id(self) -> str:
        return ROOT_ID

    def _entry(self, branch_id: str) -> BranchEntry:
        entry = self._branches.get(branch_id)
        if entry is None or entry.deleted:
            raise NotFound(f"branch {branch_id} does not exist")
        return entry

    def create_branch(self, parent: str) -> str:
        with self._catalog:
            pentry = self._entry(parent)
            with pentry.lock:
                state = self._fork(pentry.state)
            branch_id = f"b{next(self._ids)}"
            self._branches[branch_id] = BranchEntry(branch_id, parent, now_ns(), state)
            pentry.children.add(branch_id)
            return branch_id

    def connect_branch(self, branch_id: str) -> RefSession:
        self._entry(branch_id)
        return RefSession(self, branch_id)

    def delete_branch(self, branch_id: str) -> None:
        with self._catalog:
            entry = self._entry(branch_id)
            if entry.parent is None:
                raise Conflict("the root branch cannot be deleted")
            if entry.children:
                raise Conflict(f"branch {branch_id} has live children {sorted(entry.children)}")
            with entry.lock:
                entry.deleted = True
                self._drop(entry.state)
                entry.state = None
            self._branches[entry.parent].children.discard(branch_id)
            del self._branches[branch_id]

    def list_branches(self) -> list[str]:
        with self._catalog:
            return [b for b, e in self._branches.items() if not e.deleted]

    def branch_info(self, branch_id: str) -> BranchInfo:
        e = self._entry(branch_id)
        return BranchInfo(e.branch_id, e.parent, e.created_at_ns)

    # -- data ---------------------------------------------------------------

    def run(self, branch_id: str, fn, write: bool = False):
        entry = self._entry(branch_id)
        with entry.lock:
            if entry.deleted:
                raise NotFound(f"branch {branch_id} was deleted")
            return fn(self._view(entry.state))

    def cross_branch(self, desc: CrossBranchAggregate) -> OpResult:
        if not self.capabilities.cross_branch:
            raise UnsupportedOperation(f"{self.name} has cross-branch queries disabled")
        results = [(b, self.run(b, lambda view, inner=inner: interpret(view, inner)))
                   for b, inner in desc.targets]
        return merge_cross_branch(desc, results)

    def dump_branch(self, branch_id: str) -> dict[str, str]:
        return self.run(branch_id, dump_view)

    def branch_footprint(self, branch_id: str) -> int:
        entry = self._entry(branch_id)
        with entry.lock:
            return self._footprint(entry.state)

    def live_entries(self) -> list[BranchEntry]:
        return [e for e in self._branches.values() if not e.deleted]


class ByteCounter:
    """Live-byte total with a running peak, shared by all branches of a store."""

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0
        self.reclaimed_total = 0
        self._lock = threading.Lock()

    def add(self, n: int) -> None:
        if n == 0:
            return
        with self._lock:
            self.live += n
            if self.live > self.peak:
                self.peak = self.live

    def reclaimed(self, n: int) -> None:
        with self._lock:
            self.reclaimed_total += n
