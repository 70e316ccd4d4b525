"""External SQL adapter: renders descriptors to SQL text and ships them to an engine.

Concrete wire drivers are out of scope. The adapter carries a connection
URL and derives a per-branch connection string from it; the only engine
wired up is a file-per-branch SQLite layout (``sqlite:///DIR``), where a
branch is a copy of its parent's database file. That is enough to exercise
rendering end to end and to check render/interpret agreement offline.
"""

from __future__ import annotations

import datetime as _dt
import itertools
import os
import shutil
import sqlite3
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence
from urllib.parse import urlparse

from ..errors import Conflict, InternalError, NotFound, SessionClosed, Timeout, UnsupportedOperation
from ..metrics import now_ns
from ..opmodel.descriptors import (
    AddColumn,
    Aggregate,
    CreateIndex,
    CrossBranchAggregate,
    DropColumn,
    PointRead,
    RangeRead,
    unwrap,
)
from ..opmodel.evaluate import OpResult
from ..opmodel.render import create_table_sql, render_sql
from ..schema import BOOLEAN, DECIMAL, INTEGER, TIMESTAMP, TIMESTAMP_FORMAT, SchemaError, TableSchema, format_value
from . import Backend, BackendSession, BranchInfo, Capabilities, register_backend

ROOT_ID = "main"


def _to_param(value: Any) -> Any:
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, _dt.datetime):
        return value.strftime(TIMESTAMP_FORMAT)
    return value


def _from_sql(value: Any, type_: str | None) -> Any:
    if value is None or type_ is None:
        return value
    if type_ == BOOLEAN:
        return bool(value)
    if type_ == DECIMAL:
        return float(value)
    if type_ == TIMESTAMP and isinstance(value, str):
        return _dt.datetime.strptime(value, TIMESTAMP_FORMAT)
    if type_ == INTEGER and isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def _map_error(exc: sqlite3.Error) -> Exception:
    msg = str(exc)
    if isinstance(exc, sqlite3.IntegrityError):
        return Conflict(msg)
    if isinstance(exc, sqlite3.OperationalError):
        if "locked" in msg or "busy" in msg:
            return Timeout(msg)
        if "no such" in msg or "duplicate column" in msg or "syntax" in msg:
            return UnsupportedOperation(msg)
    return InternalError(msg)


@dataclass
class _Branch:
    branch_id: str
    parent: str | None
    created_at_ns: int
    path: Path
    schemas: dict[str, TableSchema] = field(default_factory=dict)
    children: set[str] = field(default_factory=set)
    lock: threading.RLock = field(default_factory=threading.RLock)


class SQLSession(BackendSession):
    def __init__(self, backend: "ExternalSQLBackend", branch: _Branch):
        self.backend = backend
        self.branch = branch
        self.branch_id = branch.branch_id
        self.conn = sqlite3.connect(branch.path, check_same_thread=False, isolation_level=None,
                                    timeout=backend.busy_timeout_s)
        self._closed = False
        self._lock = threading.Lock()

    @property
    def state(self) -> str:
        return "closed" if self._closed else "connected"

    def _check(self) -> None:
        if self._closed:
            raise SessionClosed(f"session on {self.branch_id} is closed")
        if self.backend._branches.get(self.branch_id) is not self.branch:
            raise NotFound(f"branch {self.branch_id} was deleted")

    def execute(self, op) -> OpResult:
        kind = unwrap(op)
        with self._lock:
            self._check()
            if isinstance(kind, CrossBranchAggregate):
                raise UnsupportedOperation("external SQL engines have no cross-branch queries")
            sql = render_sql(kind, self.backend.dialect)
            with self.branch.lock:
                new_schema = self._schema_after(kind)
                try:
                    cur = self.conn.execute(sql)
                    rows = cur.fetchall()
                except sqlite3.Error as exc:
                    raise _map_error(exc) from None
                if new_schema is not None:
                    self.branch.schemas[kind.table] = new_schema
                    return OpResult.count(0)
                if isinstance(kind, (PointRead, RangeRead)):
                    schema = self.branch.schemas[kind.table]
                    types = [c.type for c in schema.columns]
                    return OpResult.table(schema.column_names,
                                          [[_from_sql(v, t) for v, t in zip(r, types)] for r in rows])
                if isinstance(kind, Aggregate):
                    types = self._aggregate_types(kind)
                    return OpResult.table(kind.output_columns,
                                          [[_from_sql(v, t) for v, t in zip(r, types)] for r in rows])
                return OpResult.count(cur.rowcount)

    def _schema_after(self, kind) -> TableSchema | None:
        if not isinstance(kind, (AddColumn, DropColumn, CreateIndex)):
            return None
        schema = self.branch.schemas.get(kind.table)
        if schema is None:
            raise UnsupportedOperation(f"unknown table {kind.table}")
        try:
            if isinstance(kind, AddColumn):
                return schema.with_column(kind.column)
            if isinstance(kind, DropColumn):
                return schema.without_column(kind.column)
            return schema.with_index(kind.columns)
        except SchemaError as exc:
            raise UnsupportedOperation(str(exc)) from None

    def _aggregate_types(self, kind: Aggregate) -> list[str | None]:
        col_types: dict[str, str] = {}
        for table in (kind.table, kind.join.table if kind.join else None):
            if table is not None and table in self.branch.schemas:
                col_types.update({c.name: c.type for c in self.branch.schemas[table].columns})
        types: list[str | None] = [col_types.get(g) for g in kind.group_by]
        for a in kind.aggregates:
            if a.func in ("count", "count_if"):
                types.append(INTEGER)
            elif a.func == "avg":
                types.append(DECIMAL)
            else:
                types.append(col_types.get(a.column))
        return types

    def list_tables(self) -> list[str]:
        with self._lock:
            self._check()
            return list(self.branch.schemas)

    def load_table(self, schema: TableSchema, rows: Iterable[Sequence[Any]]) -> int:
        with self._lock:
            self._check()
            if schema.name in self.branch.schemas:
                raise Conflict(f"table {schema.name} already exists on {self.branch_id}")
            rows = [tuple(_to_param(v) for v in r) for r in rows]
            marks = ", ".join("?" for _ in schema.columns)
            try:
                with self.branch.lock:
                    self.conn.execute("BEGIN")
                    self.conn.execute(create_table_sql(schema))
                    self.conn.executemany(f"INSERT INTO {schema.name} VALUES ({marks})", rows)
                    self.conn.execute("COMMIT")
            except sqlite3.Error as exc:
                self.conn.execute("ROLLBACK")
                raise _map_error(exc) from None
            self.branch.schemas[schema.name] = schema
            return len(rows)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self.conn.close()


class ExternalSQLBackend(Backend):
    """Adapter skeleton; ``sqlite:///DIR`` is the one concrete engine."""

    name = "external-sql"
    capabilities = Capabilities(cross_branch=False, storage_stats=False, reclaim=False)

    def __init__(self, url: str = "sqlite://", dialect: str = "generic_pg_like", busy_timeout_s: float = 5.0):
        parsed = urlparse(url)
        if parsed.scheme != "sqlite":
            raise UnsupportedOperation(f"no driver for {parsed.scheme!r} URLs in this build; use sqlite:///DIR")
        self.url = url
        self.dialect = dialect
        self.busy_timeout_s = busy_timeout_s
        if parsed.path in ("", "/"):
            self._tmp = tempfile.TemporaryDirectory(prefix="branchbench-sql-")
            self.directory = Path(self._tmp.name)
        else:
            self._tmp = None
            self.directory = Path(parsed.path)
            self.directory.mkdir(parents=True, exist_ok=True)
        self._catalog = threading.Lock()
        self._ids = itertools.count(1)
        root_path = self.directory / f"{ROOT_ID}.db"
        if root_path.exists():
            root_path.unlink()
        sqlite3.connect(root_path).close()
        self._branches = {ROOT_ID: _Branch(ROOT_ID, None, now_ns(), root_path)}

    def connection_string(self, branch_id: str) -> str:
        return f"sqlite:///{self._entry(branch_id).path}"

    @property
    def root_id(self) -> str:
        return ROOT_ID

    def _entry(self, branch_id: str) -> _Branch:
        b = self._branches.get(branch_id)
        if b is None:
            raise NotFound(f"branch {branch_id} does not exist")
        return b

    def create_branch(self, parent: str) -> str:
        with self._catalog:
            p = self._entry(parent)
            branch_id = f"b{next(self._ids)}"
            path = self.directory / f"{branch_id}.db"
            with p.lock:
                src = sqlite3.connect(p.path)
                dst = sqlite3.connect(path)
                try:
                    src.backup(dst)
                finally:
                    src.close()
                    dst.close()
                schemas = dict(p.schemas)
            self._branches[branch_id] = _Branch(branch_id, parent, now_ns(), path, schemas)
            p.children.add(branch_id)
            return branch_id

    def connect_branch(self, branch_id: str) -> SQLSession:
        return SQLSession(self, self._entry(branch_id))

    def delete_branch(self, branch_id: str) -> None:
        with self._catalog:
            b = self._entry(branch_id)
            if b.parent is None:
                raise Conflict("the root branch cannot be deleted")
            if b.children:
                raise Conflict(f"branch {branch_id} has live children {sorted(b.children)}")
            del self._branches[branch_id]
            self._branches[b.parent].children.discard(branch_id)
            with b.lock:
                try:
                    os.unlink(b.path)
                except FileNotFoundError:
                    pass

    def list_branches(self) -> list[str]:
        with self._catalog:
            return list(self._branches)

    def branch_info(self, branch_id: str) -> BranchInfo:
        b = self._entry(branch_id)
        return BranchInfo(b.branch_id, b.parent, b.created_at_ns)

    def dump_branch(self, branch_id: str) -> dict[str, str]:
        b = self._entry(branch_id)
        out = {}
        with b.lock, sqlite3.connect(b.path) as conn:
            for name in sorted(b.schemas):
                schema = b.schemas[name]
                types = [c.type for c in schema.columns]
                cur = conn.execute(f"SELECT {', '.join(schema.column_names)} FROM {name} "
                                   f"ORDER BY {', '.join(schema.primary_key)}")
                lines = [",".join(schema.column_names)]
                for r in cur:
                    lines.append(",".join(format_value(_from_sql(v, t)) for v, t in zip(r, types)))
                out[name] = "\n".join(lines) + "\n"
        return out

    def close(self) -> None:
        if self._tmp is not None:
            shutil.rmtree(self._tmp.name, ignore_errors=True)
            self._tmp = None


register_backend("external-sql", ExternalSQLBackend)
