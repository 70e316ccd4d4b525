"""Delta-overlay store: a branch is a parent pointer plus its own change log.

The root holds immutable base tables. Every level records data deltas
(row images or tombstones) and schema deltas, each stamped with a per-level
sequence number. A child forked when its parent's counter read ``n`` sees
only parent entries with ``seq < n``. Reads walk the chain leaf to root, so
their cost grows with branch depth.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Any, Iterator

from ..backend import StorageStats
from ..schema import TableSchema, key_bytes, row_bytes
from .base import ByteCounter, RefBackend
from .interpreter import BranchView

DELTA_HEADER_BYTES = 16
TOMBSTONE = None
_ALL = float("inf")


def _seq(entry: tuple) -> int:
    return entry[0]


def _latest(entries: list, limit: float):
    """Newest ``(seq, value)`` with ``seq < limit``, or ``None``."""
    if limit == _ALL:
        return entries[-1] if entries else None
    i = bisect.bisect_left(entries, limit, key=_seq)
    return entries[i - 1] if i else None


@dataclass
class _Base:
    schema: TableSchema
    rows: dict[tuple, dict[str, Any]]
    keys: list[tuple]


@dataclass
class _Level:
    parent: "_Level | None" = None
    fork_seq: int = 0
    seq: int = 0
    data: dict[str, dict[tuple, list]] = field(default_factory=dict)
    schemas: dict[str, list] = field(default_factory=dict)
    base: dict[str, _Base] = field(default_factory=dict)
    base_bytes: int = 0
    log_bytes: int = 0
    entries: int = 0
    children: int = 0

    def chain(self) -> Iterator[tuple["_Level", float]]:
        cur, limit = self, _ALL
        while cur is not None:
            yield cur, limit
            limit = cur.fork_seq
            cur = cur.parent

    def root(self) -> "_Level":
        cur = self
        while cur.parent is not None:
            cur = cur.parent
        return cur

    @property
    def depth(self) -> int:
        return sum(1 for _ in self.chain()) - 1


class _View(BranchView):
    def __init__(self, level: _Level, backend: "DeltaOverlayBackend"):
        self.level = level
        self.backend = backend

    # -- resolution ------------------------------------------------------------

    def tables(self) -> list[str]:
        names = list(self.level.root().base)
        for t in self._schema_tables():
            if t not in names:
                names.append(t)
        return [t for t in names if self._resolve_schema(t) is not None]

    def _schema_tables(self) -> list[str]:
        seen: list[str] = []
        for lvl, _ in reversed(list(self.level.chain())):
            for t in lvl.schemas:
                if t not in seen:
                    seen.append(t)
        return seen

    def _resolve_schema(self, table: str) -> TableSchema | None:
        for lvl, limit in self.level.chain():
            entries = lvl.schemas.get(table)
            if entries:
                hit = _latest(entries, limit)
                if hit is not None:
                    return hit[1]
            if lvl.parent is None:
                base = lvl.base.get(table)
                return base.schema if base is not None else None
        return None

    def schema(self, table: str) -> TableSchema:
        s = self._resolve_schema(table)
        if s is None:
            raise KeyError(table)
        return s

    def get(self, table, key):
        for lvl, limit in self.level.chain():
            d = lvl.data.get(table)
            if d is not None:
                entries = d.get(key)
                if entries:
                    hit = _latest(entries, limit)
                    if hit is not None:
                        return hit[1]
            if lvl.parent is None:
                base = lvl.base.get(table)
                return base.rows.get(key) if base is not None else None
        return None

    def _overlay(self, table: str, lo=None, hi=None) -> dict[tuple, Any]:
        """Newest visible delta per key (row image or tombstone)."""
        decided: dict[tuple, Any] = {}
        for lvl, limit in self.level.chain():
            d = lvl.data.get(table)
            if not d:
                continue
            for key, entries in d.items():
                if key in decided or (lo is not None and not lo <= key <= hi):
                    continue
                hit = _latest(entries, limit)
                if hit is not None:
                    decided[key] = hit[1]
        return decided

    def _merged(self, table: str, base_keys: list, base_rows: dict, overlay: dict) -> Iterator:
        extra = sorted(overlay)
        i = j = 0
        nb, ne = len(base_keys), len(extra)
        while i < nb or j < ne:
            if j >= ne or (i < nb and base_keys[i] < extra[j]):
                k = base_keys[i]
                i += 1
                if k in overlay:
                    continue
                yield k, base_rows[k]
            else:
                k = extra[j]
                j += 1
                if i < nb and base_keys[i] == k:
                    i += 1
                row = overlay[k]
                if row is not TOMBSTONE:
                    yield k, row

    def _base(self, table: str) -> _Base | None:
        return self.level.root().base.get(table)

    def scan(self, table) -> Iterator:
        self.schema(table)
        base = self._base(table)
        keys, rows = (base.keys, base.rows) if base is not None else ([], {})
        return self._merged(table, keys, rows, self._overlay(table))

    def scan_range(self, table, lo, hi) -> Iterator:
        self.schema(table)
        base = self._base(table)
        if base is not None:
            i = bisect.bisect_left(base.keys, lo)
            j = bisect.bisect_right(base.keys, hi)
            keys, rows = base.keys[i:j], base.rows
        else:
            keys, rows = [], {}
        return self._merged(table, keys, rows, self._overlay(table, lo, hi))

    # -- writes ----------------------------------------------------------------

    def _append(self, table: str, key: tuple, value, nbytes: int) -> None:
        lvl = self.level
        lvl.data.setdefault(table, {}).setdefault(key, []).append((lvl.seq, value))
        lvl.seq += 1
        lvl.entries += 1
        lvl.log_bytes += nbytes
        self.backend.counter.add(nbytes)
        self.backend.maybe_compact(lvl)

    def put(self, table, key, row) -> None:
        self._append(table, key, row, DELTA_HEADER_BYTES + key_bytes(key) + row_bytes(row))

    def remove(self, table, key) -> None:
        self._append(table, key, TOMBSTONE, DELTA_HEADER_BYTES + key_bytes(key))

    def alter(self, table, schema, change) -> None:
        # Schema deltas are metadata only; reads project rows through them.
        lvl = self.level
        name = getattr(change, "column", None)
        label = name.name if hasattr(name, "name") else str(name or ",".join(getattr(change, "columns", ())))
        nbytes = DELTA_HEADER_BYTES + len(label.encode("utf-8"))
        lvl.schemas.setdefault(table, []).append((lvl.seq, schema, nbytes))
        lvl.seq += 1
        lvl.entries += 1
        lvl.log_bytes += nbytes
        self.backend.counter.add(nbytes)

    def create_table(self, schema, rows) -> int:
        lvl = self.level
        if lvl.parent is None and lvl.seq == 0 and lvl.children == 0:
            keys = [schema.key_of(r) for r in rows]
            lvl.base[schema.name] = _Base(schema, dict(zip(keys, rows)), keys)
            nbytes = sum(row_bytes(r) for r in rows)
            lvl.base_bytes += nbytes
            self.backend.counter.add(nbytes)
            return len(rows)
        self.alter(schema.name, schema, None)
        for r in rows:
            self.put(schema.name, schema.key_of(r), r)
        return len(rows)


class DeltaOverlayBackend(RefBackend):
    """O(1) branch creation; read cost proportional to the ancestor chain."""

    name = "deltaoverlay"

    def __init__(self, *, compaction_threshold: int | None = None, **options):
        self.counter = ByteCounter()
        self.compaction_threshold = compaction_threshold
        super().__init__(**options)

    def _new_root(self) -> _Level:
        return _Level()

    def _fork(self, parent: _Level) -> _Level:
        parent.children += 1
        return _Level(parent=parent, fork_seq=parent.seq)

    def _drop(self, level: _Level) -> None:
        # Leaves only (the registry refuses branches with live children), so
        # nothing else can reference this level's log.
        freed = level.log_bytes
        self.counter.add(-freed)
        self.counter.reclaimed(freed)
        if level.parent is not None:
            level.parent.children -= 1
        level.data = {}
        level.schemas = {}
        level.log_bytes = 0

    def _view(self, level: _Level) -> BranchView:
        return _View(level, self)

    def _footprint(self, level: _Level) -> int:
        return level.base_bytes + level.log_bytes

    def maybe_compact(self, level: _Level) -> None:
        limit = self.compaction_threshold
        if limit is None or level.entries <= limit or level.children:
            return
        self.compact(level)

    def compact(self, level: _Level) -> int:
        """Keep only the newest delta per key of a childless level; returns bytes freed."""
        if level.children:
            return 0
        before = level.log_bytes
        nbytes = 0
        for table, d in level.data.items():
            for key, entries in d.items():
                last = entries[-1]
                d[key] = [last]
                nbytes += DELTA_HEADER_BYTES + key_bytes(key) + (0 if last[1] is TOMBSTONE else row_bytes(last[1]))
        for table, entries in level.schemas.items():
            level.schemas[table] = [entries[-1]]
            nbytes += entries[-1][2]
        level.log_bytes = nbytes
        level.entries = sum(len(d) for d in level.data.values()) + len(level.schemas)
        freed = before - level.log_bytes
        self.counter.add(-freed)
        self.counter.reclaimed(freed)
        return freed

    def depth(self, branch_id: str) -> int:
        return self._entry(branch_id).state.depth

    def delta_count(self, branch_id: str) -> int:
        """Data deltas recorded by this branch itself."""
        level = self._entry(branch_id).state
        return sum(len(e) for d in level.data.values() for e in d.values())

    def storage_stats(self) -> StorageStats:
        with self._catalog:
            per = {e.branch_id: self._footprint(e.state) for e in self.live_entries()}
            return StorageStats(self.counter.live, 0, per, self.counter.peak, self.counter.reclaimed_total)
