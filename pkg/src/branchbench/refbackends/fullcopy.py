"""Full-copy store: every branch owns a private deep copy of all tables."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Any, Iterator

from ..backend import StorageStats
from ..opmodel.descriptors import CreateIndex
from ..schema import TableSchema, row_bytes
from .base import ByteCounter, RefBackend
from .interpreter import BranchView


@dataclass
class _Table:
    schema: TableSchema
    rows: dict[tuple, dict[str, Any]] = field(default_factory=dict)
    keys: list[tuple] = field(default_factory=list)
    nbytes: int = 0

    def copy(self) -> "_Table":
        return _Table(self.schema, {k: dict(r) for k, r in self.rows.items()}, list(self.keys), self.nbytes)


@dataclass
class _State:
    tables: dict[str, _Table] = field(default_factory=dict)

    @property
    def nbytes(self) -> int:
        return sum(t.nbytes for t in self.tables.values())


class _View(BranchView):
    def __init__(self, state: _State, counter: ByteCounter):
        self.state = state
        self.counter = counter

    def _t(self, table: str) -> _Table:
        return self.state.tables[table]

    def tables(self) -> list[str]:
        return list(self.state.tables)

    def schema(self, table: str) -> TableSchema:
        return self._t(table).schema

    def get(self, table, key):
        return self._t(table).rows.get(key)

    def scan(self, table) -> Iterator:
        t = self._t(table)
        rows = t.rows
        for k in t.keys:
            yield k, rows[k]

    def scan_range(self, table, lo, hi) -> Iterator:
        t = self._t(table)
        keys = t.keys
        i = bisect.bisect_left(keys, lo)
        j = bisect.bisect_right(keys, hi)
        rows = t.rows
        for k in keys[i:j]:
            yield k, rows[k]

    def put(self, table, key, row) -> None:
        t = self._t(table)
        old = t.rows.get(key)
        delta = row_bytes(row) - (row_bytes(old) if old is not None else 0)
        if old is None:
            bisect.insort(t.keys, key)
        t.rows[key] = row
        t.nbytes += delta
        self.counter.add(delta)

    def remove(self, table, key) -> None:
        t = self._t(table)
        old = t.rows.pop(key)
        del t.keys[bisect.bisect_left(t.keys, key)]
        t.nbytes -= row_bytes(old)
        self.counter.add(-row_bytes(old))

    def alter(self, table, schema, change) -> None:
        t = self._t(table)
        if isinstance(change, CreateIndex):
            t.schema = schema
            return
        before = t.nbytes
        # Materialize: every stored row is rewritten to the new column set.
        names = schema.column_names
        for k, raw in t.rows.items():
            full = t.schema.visible(raw)
            t.rows[k] = {n: full.get(n, schema.column(n).default) for n in names}
        t.schema = schema
        t.nbytes = sum(row_bytes(r) for r in t.rows.values())
        self.counter.add(t.nbytes - before)

    def create_table(self, schema, rows) -> int:
        t = _Table(schema)
        for r in rows:
            key = schema.key_of(r)
            t.rows[key] = r
            t.keys.append(key)
            t.nbytes += row_bytes(r)
        self.state.tables[schema.name] = t
        self.counter.add(t.nbytes)
        return len(rows)


class FullCopyBackend(RefBackend):
    """Branch creation deep-copies the parent, so its cost grows with data size."""

    name = "fullcopy"

    def __init__(self, **options):
        self.counter = ByteCounter()
        super().__init__(**options)

    def _new_root(self) -> _State:
        return _State()

    def _fork(self, parent_state: _State) -> _State:
        state = _State({name: t.copy() for name, t in parent_state.tables.items()})
        self.counter.add(state.nbytes)
        return state

    def _drop(self, state: _State) -> None:
        freed = state.nbytes
        self.counter.add(-freed)
        self.counter.reclaimed(freed)

    def _view(self, state: _State) -> BranchView:
        return _View(state, self.counter)

    def _footprint(self, state: _State) -> int:
        return state.nbytes

    def storage_stats(self) -> StorageStats:
        with self._catalog:
            per = {e.branch_id: e.state.nbytes for e in self.live_entries()}
            return StorageStats(self.counter.live, 0, per, self.counter.peak, self.counter.reclaimed_total)
