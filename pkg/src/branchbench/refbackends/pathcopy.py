"""Path-copying store: a branch is a set of root pointers into shared trees."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..backend import StorageStats
from ..schema import TableSchema
from .base import ByteCounter, RefBackend
from .interpreter import BranchView
from .pmap import Arena, Node


@dataclass
class _State:
    roots: dict[str, Node] = field(default_factory=dict)
    schemas: dict[str, TableSchema] = field(default_factory=dict)


class _View(BranchView):
    def __init__(self, state: _State, arena: Arena):
        self.state = state
        self.arena = arena

    def tables(self) -> list[str]:
        return list(self.state.schemas)

    def schema(self, table: str) -> TableSchema:
        return self.state.schemas[table]

    def get(self, table, key):
        return Arena.get(self.state.roots[table], key)

    def scan(self, table):
        return Arena.items(self.state.roots[table])

    def scan_range(self, table, lo, hi):
        return Arena.range(self.state.roots[table], lo, hi)

    def put(self, table, key, row) -> None:
        roots = self.state.roots
        roots[table] = self.arena.put(roots[table], key, row)

    def remove(self, table, key) -> None:
        roots = self.state.roots
        roots[table] = self.arena.remove(roots[table], key)

    def alter(self, table, schema, change) -> None:
        # Column changes live in branch metadata; stored rows are untouched.
        self.state.schemas[table] = schema

    def create_table(self, schema, rows) -> int:
        with self.arena.lock:
            root = self.arena.bulk_load([(schema.key_of(r), r) for r in rows])
            root.rc += 1
            self.state.roots[schema.name] = root
            self.state.schemas[schema.name] = schema
        return len(rows)


class PathCopyBackend(RefBackend):
    """O(1) branch creation; writes copy one root-to-leaf path per row."""

    name = "pathcopy"

    def __init__(self, *, arena_slack_bytes: int = 0, **options):
        self.counter = ByteCounter()
        self.arena = Arena(self.counter)
        self.arena_slack_bytes = arena_slack_bytes
        super().__init__(**options)

    def _new_root(self) -> _State:
        return _State()

    def _fork(self, parent: _State) -> _State:
        with self.arena.lock:
            for root in parent.roots.values():
                root.rc += 1
            return _State(dict(parent.roots), dict(parent.schemas))

    def _drop(self, state: _State) -> None:
        with self.arena.lock:
            for root in state.roots.values():
                self.arena.decref(root)
            state.roots = {}

    def _view(self, state: _State) -> BranchView:
        return _View(state, self.arena)

    def _footprint(self, state: _State) -> int:
        with self.arena.lock:
            return sum(Arena.exclusive_bytes(r) for r in state.roots.values())

    def reclaim(self) -> int:
        return self.arena.gc()

    gc = reclaim

    def live_roots(self) -> list[Node]:
        with self._catalog:
            return [r for e in self.live_entries() for r in e.state.roots.values()]

    def storage_stats(self) -> StorageStats:
        with self._catalog, self.arena.lock:
            per = {e.branch_id: sum(Arena.exclusive_bytes(r) for r in e.state.roots.values())
                   for e in self.live_entries()}
            return StorageStats(self.counter.live, self.arena.garbage_bytes, per,
                                self.counter.peak, self.counter.reclaimed_total)
