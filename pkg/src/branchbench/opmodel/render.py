"""Render descriptors as SQL text for external (wire-protocol) backends."""

from __future__ import annotations

import datetime as _dt
from typing import Any

from ..errors import UnsupportedOperation
from ..schema import BOOLEAN, DECIMAL, INTEGER, TEXT, TIMESTAMP, TIMESTAMP_FORMAT, Column, TableSchema
from .descriptors import (
    AddColumn,
    AggSpec,
    Aggregate,
    Arith,
    CaseWhen,
    ColRef,
    Compare,
    Const,
    CreateIndex,
    CrossBranchAggregate,
    DeleteWhere,
    DropColumn,
    Insert,
    IsNull,
    KeyEq,
    KeyRange,
    PointRead,
    RangeRead,
    TruePred,
    UpdateWhere,
    unwrap,
)

DIALECTS = ("generic_pg_like",)

SQL_TYPES = {
    INTEGER: "INTEGER",
    DECIMAL: "DECIMAL(14,2)",
    TEXT: "TEXT",
    BOOLEAN: "BOOLEAN",
    TIMESTAMP: "TIMESTAMP",
}


def literal(value: Any) -> str:
    if value is None:
        return "NULL"
    if isinstance(value, bool):
        return "TRUE" if value else "FALSE"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, _dt.datetime):
        return "'" + value.strftime(TIMESTAMP_FORMAT) + "'"
    if isinstance(value, str):
        return "'" + value.replace("'", "''") + "'"
    raise UnsupportedOperation(f"cannot render literal of type {type(value).__name__}")


def _tuple(items) -> str:
    items = list(items)
    if len(items) == 1:
        return items[0]
    return "(" + ", ".join(items) + ")"


def predicate_sql(pred) -> str | None:
    if pred is None or isinstance(pred, TruePred):
        return None
    if isinstance(pred, KeyEq):
        return f"{_tuple(pred.columns)} = {_tuple(literal(v) for v in pred.key)}"
    if isinstance(pred, KeyRange):
        cols = _tuple(pred.columns)
        lo = _tuple(literal(v) for v in pred.lo)
        hi = _tuple(literal(v) for v in pred.hi)
        return f"{cols} >= {lo} AND {cols} <= {hi}"
    if isinstance(pred, IsNull):
        return f"{pred.column} IS {'NOT ' if pred.negate else ''}NULL"
    if isinstance(pred, Compare):
        return f"{pred.column} {pred.op} {literal(pred.value)}"
    raise UnsupportedOperation(f"cannot render predicate {type(pred).__name__}")


def expr_sql(expr) -> str:
    if isinstance(expr, Const):
        return literal(expr.value)
    if isinstance(expr, ColRef):
        return expr.column
    if isinstance(expr, Arith):
        return f"{expr.column} {expr.op} {literal(expr.operand)}"
    if isinstance(expr, CaseWhen):
        parts = [f"WHEN {expr.column} {op} {literal(v)} THEN {literal(r)}" for op, v, r in expr.branches]
        return "CASE " + " ".join(parts) + f" ELSE {literal(expr.otherwise)} END"
    raise UnsupportedOperation(f"cannot render expression {type(expr).__name__}")


def agg_sql(spec: AggSpec) -> str:
    if spec.func == "count":
        return "COUNT(*)" if spec.column is None else f"COUNT({spec.column})"
    if spec.func == "count_if":
        return f"COUNT(CASE WHEN {predicate_sql(spec.when)} THEN 1 END)"
    if spec.func == "spread":
        return f"MAX({spec.column}) - MIN({spec.column})"
    return f"{spec.func.upper()}({spec.column})"


def column_sql(column: Column) -> str:
    text = f"{column.name} {SQL_TYPES[column.type]}"
    if not column.nullable:
        text += " NOT NULL"
    if column.default is not None:
        text += f" DEFAULT {literal(column.default)}"
    return text


def create_table_sql(schema: TableSchema) -> str:
    cols = [column_sql(c) for c in schema.columns]
    cols.append(f"PRIMARY KEY ({', '.join(schema.primary_key)})")
    return f"CREATE TABLE {schema.name} ({', '.join(cols)})"


def index_name(table: str, columns) -> str:
    return f"idx_{table}_{'_'.join(columns)}"


def aggregate_sql(desc: Aggregate) -> str:
    select = []
    for col, name in zip(desc.group_by, desc.group_names):
        select.append(col if col == name else f"{col} AS {name}")
    select += [f"{agg_sql(a)} AS {a.alias}" for a in desc.aggregates]
    sql = f"SELECT {', '.join(select)} FROM {desc.table}"
    if desc.join is not None:
        on = " AND ".join(f"{left} = {right}" for left, right in desc.join.on)
        sql += f" JOIN {desc.join.table} ON {on}"
    where = predicate_sql(desc.where)
    if where:
        sql += f" WHERE {where}"
    if desc.group_by:
        sql += f" GROUP BY {', '.join(desc.group_by)}"
    if desc.having is not None:
        right = desc.having.right
        right_sql = right.column if isinstance(right, ColRef) else literal(right.value)
        sql += f" HAVING {agg_sql(desc.having.agg)} {desc.having.op} {right_sql}"
    if desc.group_by:
        sql += " ORDER BY " + ", ".join(f"{g} NULLS LAST" for g in desc.group_by)
    return sql


def render_sql(op, dialect: str = "generic_pg_like") -> str:
    """One statement of ``dialect`` text for ``op``."""
    if dialect not in DIALECTS:
        raise UnsupportedOperation(f"unknown dialect {dialect!r}")
    d = unwrap(op)
    if isinstance(d, AddColumn):
        return f"ALTER TABLE {d.table} ADD COLUMN {column_sql(d.column)}"
    if isinstance(d, DropColumn):
        return f"ALTER TABLE {d.table} DROP COLUMN {d.column}"
    if isinstance(d, CreateIndex):
        return f"CREATE INDEX {index_name(d.table, d.columns)} ON {d.table} ({', '.join(d.columns)})"
    if isinstance(d, Insert):
        cols = ", ".join(c for c, _ in d.values)
        vals = ", ".join(literal(v) for _, v in d.values)
        return f"INSERT INTO {d.table} ({cols}) VALUES ({vals})"
    if isinstance(d, UpdateWhere):
        sets = ", ".join(f"{c} = {expr_sql(e)}" for c, e in d.assignments)
        where = predicate_sql(d.where)
        return f"UPDATE {d.table} SET {sets}" + (f" WHERE {where}" if where else "")
    if isinstance(d, DeleteWhere):
        where = predicate_sql(d.where)
        return f"DELETE FROM {d.table}" + (f" WHERE {where}" if where else "")
    if isinstance(d, PointRead):
        return f"SELECT * FROM {d.table} WHERE {predicate_sql(KeyEq(d.columns, d.key))}"
    if isinstance(d, RangeRead):
        pred = predicate_sql(KeyRange(d.columns, d.lo, d.hi))
        return f"SELECT * FROM {d.table} WHERE {pred} ORDER BY {', '.join(d.columns)}"
    if isinstance(d, Aggregate):
        return aggregate_sql(d)
    if isinstance(d, CrossBranchAggregate):
        raise UnsupportedOperation(f"dialect {dialect} has no cross-branch queries")
    raise UnsupportedOperation(f"cannot render {type(d).__name__}")
