"""Descriptor interpreter shared by the three reference stores.

Stores expose a :class:`BranchView` over one branch; the interpreter only
ever sees stored ("raw") row dicts and projects them through the current
table schema, so metadata-only column changes behave the same as
materialized ones.
"""

from __future__ import annotations

import datetime as _dt
from abc import ABC, abstractmethod
from typing import Any, Iterable, Iterator, Mapping, Sequence

from ..errors import Conflict, UnsupportedOperation
from ..opmodel.descriptors import (
    AddColumn,
    Aggregate,
    CreateIndex,
    CrossBranchAggregate,
    DeleteWhere,
    DropColumn,
    Insert,
    KeyEq,
    KeyRange,
    PointRead,
    RangeRead,
    UpdateWhere,
    unwrap,
)
from ..opmodel.evaluate import (
    OpResult,
    agg_columns,
    compile_predicate,
    eval_expr,
    expr_columns,
    group_aggregate,
    predicate_columns,
    require_columns,
)
from ..schema import BOOLEAN, DECIMAL, INTEGER, TEXT, TIMESTAMP, SchemaError, TableSchema, format_value

Key = tuple
Raw = Mapping[str, Any]


class BranchView(ABC):
    """Read/write access to one branch's tables, rows kept in primary-key order."""

    @abstractmethod
    def tables(self) -> list[str]: ...

    @abstractmethod
    def schema(self, table: str) -> TableSchema:
        """Current schema; raises ``KeyError`` for an unknown table."""

    @abstractmethod
    def get(self, table: str, key: Key) -> Raw | None: ...

    @abstractmethod
    def scan(self, table: str) -> Iterator[tuple[Key, Raw]]: ...

    @abstractmethod
    def scan_range(self, table: str, lo: Key, hi: Key) -> Iterator[tuple[Key, Raw]]:
        """Rows with ``lo <= key <= hi``."""

    def scan_prefix(self, table: str, prefix: Key) -> Iterator[tuple[Key, Raw]]:
        n = len(prefix)
        for key, raw in self.scan_range(table, prefix, prefix + (_TOP,)):
            if key[:n] == prefix:
                yield key, raw

    @abstractmethod
    def put(self, table: str, key: Key, row: dict[str, Any]) -> None: ...

    @abstractmethod
    def remove(self, table: str, key: Key) -> None: ...

    @abstractmethod
    def alter(self, table: str, schema: TableSchema, change) -> None:
        """Install ``schema`` after ``change`` (an AddColumn/DropColumn/CreateIndex)."""

    @abstractmethod
    def create_table(self, schema: TableSchema, rows: Sequence[dict[str, Any]]) -> int: ...


class _Top:
    """Sorts after every value; pads range bounds for prefix scans."""

    def __lt__(self, other): return False
    def __gt__(self, other): return True
    def __le__(self, other): return self is other
    def __ge__(self, other): return True
    def __eq__(self, other): return self is other
    def __hash__(self): return 0


_TOP = _Top()

# ------------------------------------------------------------------- helpers

_PY_TYPES = {INTEGER: int, DECIMAL: float, TEXT: str, BOOLEAN: bool, TIMESTAMP: _dt.datetime}


def coerce(schema: TableSchema, column: str, value: Any) -> Any:
    col = schema.column(column)
    if value is None:
        if not col.nullable:
            raise UnsupportedOperation(f"{schema.name}.{column} is NOT NULL")
        return None
    if col.type == DECIMAL and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    want = _PY_TYPES[col.type]
    if not isinstance(value, want) or (want is int and isinstance(value, bool)):
        raise UnsupportedOperation(
            f"value {value!r} does not fit {schema.name}.{column} of type {col.type}")
    return value


def table_schema(view: BranchView, table: str) -> TableSchema:
    try:
        return view.schema(table)
    except KeyError:
        raise UnsupportedOperation(f"unknown table {table}") from None


def _ref_key(ref_schema: TableSchema, ref_columns: Sequence[str], values: Sequence[Any]) -> Key | None:
    if set(ref_columns) != set(ref_schema.primary_key):
        return None
    by_col = dict(zip(ref_columns, values))
    return tuple(by_col[c] for c in ref_schema.primary_key)


def check_foreign_keys(view: BranchView, schema: TableSchema, row: Mapping[str, Any],
                       columns: Iterable[str] | None = None) -> None:
    """Referencing rows must point at existing rows; only checked on write."""
    touched = None if columns is None else set(columns)
    for fk in schema.foreign_keys:
        if touched is not None and not touched.intersection(fk.columns):
            continue
        values = tuple(row[c] for c in fk.columns)
        if any(v is None for v in values):
            continue
        ref_schema = table_schema(view, fk.ref_table)
        key = _ref_key(ref_schema, fk.ref_columns, values)
        if key is not None and view.get(fk.ref_table, key) is None:
            raise Conflict(f"foreign key {schema.name}{fk.columns} -> {fk.ref_table}{values} has no target")


def candidates(view: BranchView, schema: TableSchema, where) -> Iterator[tuple[Key, dict[str, Any]]]:
    """Visible rows matching ``where`` in key order, using the key when possible."""
    table, pk = schema.name, schema.primary_key
    require_columns(schema.column_names, predicate_columns(where), f"predicate on {table}")
    if isinstance(where, KeyEq) and tuple(where.columns) == pk:
        raw = view.get(table, tuple(where.key))
        if raw is not None:
            yield tuple(where.key), schema.visible(raw)
        return
    if isinstance(where, KeyEq) and tuple(where.columns) == pk[:len(where.columns)]:
        source: Iterable = view.scan_prefix(table, tuple(where.key))
        test = None
    elif isinstance(where, KeyRange) and tuple(where.columns) == pk:
        source = view.scan_range(table, tuple(where.lo), tuple(where.hi))
        test = None
    else:
        source = view.scan(table)
        test = compile_predicate(where)
    for key, raw in source:
        row = schema.visible(raw)
        if test is None or test(row):
            yield key, row


# ----------------------------------------------------------------- execution


def interpret(view: BranchView, op) -> OpResult:
    kind = unwrap(op)
    try:
        handler = _HANDLERS[type(kind)]
    except KeyError:
        raise UnsupportedOperation(f"no interpreter rule for {type(kind).__name__}") from None
    return handler(view, kind)


def _schema_error(exc: SchemaError) -> Exception:
    if "already exists" in str(exc):
        return Conflict(str(exc))
    return UnsupportedOperation(str(exc))


def _add_column(view: BranchView, d: AddColumn) -> OpResult:
    schema = table_schema(view, d.table)
    col = d.column
    if not col.nullable and col.default is None and next(iter(view.scan(d.table)), None) is not None:
        raise UnsupportedOperation(f"cannot add NOT NULL column {col.name} without a default to a non-empty table")
    try:
        new = schema.with_column(col)
    except SchemaError as exc:
        raise _schema_error(exc) from None
    view.alter(d.table, new, d)
    return OpResult.count(0)


def _drop_column(view: BranchView, d: DropColumn) -> OpResult:
    schema = table_schema(view, d.table)
    try:
        new = schema.without_column(d.column)
    except SchemaError as exc:
        raise _schema_error(exc) from None
    view.alter(d.table, new, d)
    return OpResult.count(0)


def _create_index(view: BranchView, d: CreateIndex) -> OpResult:
    schema = table_schema(view, d.table)
    try:
        new = schema.with_index(d.columns)
    except SchemaError as exc:
        raise _schema_error(exc) from None
    if new is not schema:
        view.alter(d.table, new, d)
    return OpResult.count(0)


def _insert(view: BranchView, d: Insert) -> OpResult:
    schema = table_schema(view, d.table)
    given = dict(d.values)
    if len(given) != len(d.values):
        raise UnsupportedOperation(f"duplicate column in insert into {d.table}")
    require_columns(schema.column_names, given, f"insert into {d.table}")
    row = {c.name: coerce(schema, c.name, given.get(c.name, c.default)) for c in schema.columns}
    key = schema.key_of(row)
    if view.get(d.table, key) is not None:
        raise Conflict(f"duplicate key {key} in {d.table}")
    check_foreign_keys(view, schema, row)
    view.put(d.table, key, row)
    return OpResult.count(1)


def _update(view: BranchView, d: UpdateWhere) -> OpResult:
    schema = table_schema(view, d.table)
    targets = [c for c, _ in d.assignments]
    require_columns(schema.column_names, targets, f"update of {d.table}")
    for _, expr in d.assignments:
        require_columns(schema.column_names, expr_columns(expr), f"update of {d.table}")
    if set(targets) & set(schema.primary_key):
        raise UnsupportedOperation(f"cannot update primary key columns of {d.table}")
    fk_cols = {c for fk in schema.foreign_keys for c in fk.columns}
    changed = []
    for key, row in list(candidates(view, schema, d.where)):
        new = dict(row)
        for col, expr in d.assignments:
            new[col] = coerce(schema, col, eval_expr(expr, row))
        changed.append((key, new))
    check_fk = bool(fk_cols & set(targets))
    for key, new in changed:
        if check_fk:
            check_foreign_keys(view, schema, new, targets)
        view.put(d.table, key, new)
    return OpResult.count(len(changed))


def _delete(view: BranchView, d: DeleteWhere) -> OpResult:
    schema = table_schema(view, d.table)
    keys = [key for key, _ in candidates(view, schema, d.where)]
    for key in keys:
        view.remove(d.table, key)
    return OpResult.count(len(keys))


def _point_read(view: BranchView, d: PointRead) -> OpResult:
    schema = table_schema(view, d.table)
    rows = [tuple(r.values()) for _, r in candidates(view, schema, KeyEq(d.columns, d.key))]
    return OpResult.table(schema.column_names, rows)


def _range_read(view: BranchView, d: RangeRead) -> OpResult:
    schema = table_schema(view, d.table)
    rows = [tuple(r.values()) for _, r in candidates(view, schema, KeyRange(d.columns, d.lo, d.hi))]
    return OpResult.table(schema.column_names, rows)


def _same_pairs(a: Sequence[str], b: Sequence[str], left: Sequence[str], right: Sequence[str]) -> bool:
    return set(zip(a, b)) == set(zip(left, right))


def joined_rows(view: BranchView, d: Aggregate) -> tuple[list[dict[str, Any]], tuple[str, ...]]:
    """Rows of ``d.table`` (joined with ``d.join`` if present) in key order."""
    left = table_schema(view, d.table)
    if d.join is None:
        return [left.visible(raw) for _, raw in view.scan(d.table)], left.column_names
    right = table_schema(view, d.join.table)
    lcols = tuple(a for a, _ in d.join.on)
    rcols = tuple(b for _, b in d.join.on)
    require_columns(left.column_names, lcols, f"join of {d.table}")
    require_columns(right.column_names, rcols, f"join with {d.join.table}")
    clash = set(left.column_names) & set(right.column_names)
    if clash:
        raise UnsupportedOperation(f"ambiguous columns in join: {sorted(clash)}")
    many_to_one = any(fk.ref_table == right.name and _same_pairs(fk.columns, fk.ref_columns, lcols, rcols)
                      for fk in left.foreign_keys)
    one_to_many = any(fk.ref_table == left.name and _same_pairs(fk.columns, fk.ref_columns, rcols, lcols)
                      for fk in right.foreign_keys)
    if not (many_to_one or one_to_many):
        raise UnsupportedOperation(f"join {d.table} -> {d.join.table} does not follow a declared foreign key")
    out: list[dict[str, Any]] = []
    pairs = dict(zip(rcols, lcols))
    rpk = right.primary_key
    if set(rcols) == set(rpk):
        order = tuple(pairs[c] for c in rpk)
        for _, raw in view.scan(d.table):
            lrow = left.visible(raw)
            rraw = view.get(right.name, tuple(lrow[c] for c in order))
            if rraw is not None:
                out.append({**lrow, **right.visible(rraw)})
    elif set(rcols) == set(rpk[:len(rcols)]):
        order = tuple(pairs[c] for c in rpk[:len(rcols)])
        for _, raw in view.scan(d.table):
            lrow = left.visible(raw)
            for _, rraw in view.scan_prefix(right.name, tuple(lrow[c] for c in order)):
                out.append({**lrow, **right.visible(rraw)})
    else:
        index: dict[tuple, list[dict[str, Any]]] = {}
        for _, rraw in view.scan(right.name):
            rrow = right.visible(rraw)
            index.setdefault(tuple(rrow[c] for c in rcols), []).append(rrow)
        for _, raw in view.scan(d.table):
            lrow = left.visible(raw)
            for rrow in index.get(tuple(lrow[c] for c in lcols), ()):
                out.append({**lrow, **rrow})
    return out, left.column_names + right.column_names


def _aggregate(view: BranchView, d: Aggregate) -> OpResult:
    rows, available = joined_rows(view, d)
    where = f"aggregate over {d.table}"
    require_columns(available, d.group_by, where)
    for spec in d.aggregates:
        require_columns(available, agg_columns(spec), where)
    if d.having is not None:
        require_columns(available, agg_columns(d.having.agg), where)
        if hasattr(d.having.right, "column"):
            if d.having.right.column not in d.group_by:
                raise UnsupportedOperation(f"HAVING column {d.having.right.column} is not grouped")
    if d.where is not None:
        require_columns(available, predicate_columns(d.where), where)
        test = compile_predicate(d.where)
        rows = [r for r in rows if test(r)]
    return group_aggregate(rows, d.group_by, d.aggregates, d.having, d.group_names)


def _cross_branch(view: BranchView, d: CrossBranchAggregate) -> OpResult:
    raise UnsupportedOperation("cross-branch aggregates run at the backend level, not on one branch")


_HANDLERS = {
    AddColumn: _add_column,
    DropColumn: _drop_column,
    CreateIndex: _create_index,
    Insert: _insert,
    UpdateWhere: _update,
    DeleteWhere: _delete,
    PointRead: _point_read,
    RangeRead: _range_read,
    Aggregate: _aggregate,
    CrossBranchAggregate: _cross_branch,
}


# ---------------------------------------------------------------------- dumps


def load_rows(schema: TableSchema, rows: Iterable[Sequence[Any]]) -> list[dict[str, Any]]:
    """Validate positional rows against ``schema`` and return them as dicts."""
    names = schema.column_names
    out = []
    seen = set()
    for i, values in enumerate(rows):
        if len(values) != len(names):
            raise UnsupportedOperation(f"{schema.name} row {i}: expected {len(names)} values, got {len(values)}")
        row = {n: coerce(schema, n, v) for n, v in zip(names, values)}
        key = schema.key_of(row)
        if key in seen:
            raise Conflict(f"duplicate key {key} loading {schema.name}")
        seen.add(key)
        out.append(row)
    out.sort(key=schema.key_of)
    return out


def dump_table(view: BranchView, table: str) -> str:
    schema = view.schema(table)
    lines = [",".join(schema.column_names)]
    for _, raw in view.scan(table):
        row = schema.visible(raw)
        lines.append(",".join(_csv_field(format_value(v)) for v in row.values()))
    return "\n".join(lines) + "\n"


def _csv_field(text: str) -> str:
    if any(ch in text for ch in ',"\n'):
        return '"' + text.replace('"', '""') + '"'
    return text


def dump_view(view: BranchView) -> dict[str, str]:
    return {t: dump_table(view, t) for t in sorted(view.tables())}
