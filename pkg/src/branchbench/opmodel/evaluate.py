"""Row-level evaluation of expressions, predicates and aggregates.

Semantics follow SQL three-valued logic where it matters: comparisons with
NULL are false, arithmetic with NULL is NULL, aggregates skip NULLs and an
ungrouped aggregate over no rows still yields one row.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence

from ..errors import BackendError, UnsupportedOperation
from .descriptors import (
    AggSpec,
    Arith,
    CaseWhen,
    ColRef,
    Compare,
    Const,
    CrossBranchAggregate,
    Having,
    IsNull,
    KeyEq,
    KeyRange,
    TruePred,
)

_CMP: dict[str, Callable[[Any, Any], bool]] = {
    "=": operator.eq,
    "<>": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}
_ARITH = {"+": operator.add, "-": operator.sub, "*": operator.mul}

Row = Mapping[str, Any]


@dataclass(frozen=True)
class OpResult:
    status: str = "ok"
    rowcount: int | None = None
    columns: tuple[str, ...] | None = None
    rows: tuple[tuple, ...] | None = None
    error_class: str | None = None
    message: str = ""

    @classmethod
    def count(cls, n: int) -> "OpResult":
        return cls(rowcount=n)

    @classmethod
    def table(cls, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> "OpResult":
        rows = tuple(tuple(r) for r in rows)
        return cls(rowcount=len(rows), columns=tuple(columns), rows=rows)

    @classmethod
    def failed(cls, exc: BackendError) -> "OpResult":
        return cls(status="error", error_class=exc.error_class, message=str(exc))

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def dicts(self) -> list[dict[str, Any]]:
        return [dict(zip(self.columns or (), r)) for r in self.rows or ()]


def compare(a: Any, op: str, b: Any) -> bool:
    if a is None or b is None:
        return False
    return _CMP[op](a, b)


def require_columns(available: Iterable[str], names: Iterable[str], where: str) -> None:
    avail = set(available)
    for n in names:
        if n not in avail:
            raise UnsupportedOperation(f"unknown column {n} in {where}")


def predicate_columns(pred) -> tuple[str, ...]:
    if pred is None or isinstance(pred, TruePred):
        return ()
    if isinstance(pred, (KeyEq, KeyRange)):
        return tuple(pred.columns)
    return (pred.column,)


def expr_columns(expr) -> tuple[str, ...]:
    if isinstance(expr, Const):
        return ()
    return (expr.column,)


def compile_predicate(pred) -> Callable[[Row], bool]:
    if pred is None or isinstance(pred, TruePred):
        return lambda row: True
    if isinstance(pred, KeyEq):
        cols, key = tuple(pred.columns), tuple(pred.key)
        return lambda row: tuple(row[c] for c in cols) == key
    if isinstance(pred, KeyRange):
        cols, lo, hi = tuple(pred.columns), tuple(pred.lo), tuple(pred.hi)
        return lambda row: lo <= tuple(row[c] for c in cols) <= hi
    if isinstance(pred, IsNull):
        col, neg = pred.column, pred.negate
        return lambda row: (row[col] is None) != neg
    if isinstance(pred, Compare):
        col, op, val = pred.column, pred.op, pred.value
        return lambda row: compare(row[col], op, val)
    raise UnsupportedOperation(f"unsupported predicate {type(pred).__name__}")


def eval_expr(expr, row: Row) -> Any:
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, ColRef):
        return row[expr.column]
    if isinstance(expr, Arith):
        v = row[expr.column]
        if v is None or expr.operand is None:
            return None
        return _ARITH[expr.op](v, expr.operand)
    if isinstance(expr, CaseWhen):
        v = row[expr.column]
        for op, value, result in expr.branches:
            if compare(v, op, value):
                return result
        return expr.otherwise
    raise UnsupportedOperation(f"unsupported expression {type(expr).__name__}")


def aggregate_value(spec: AggSpec, rows: Sequence[Row]) -> Any:
    func = spec.func
    if func == "count":
        if spec.column is None:
            return len(rows)
        return sum(1 for r in rows if r[spec.column] is not None)
    if func == "count_if":
        test = compile_predicate(spec.when)
        return sum(1 for r in rows if test(r))
    vals = [r[spec.column] for r in rows if r[spec.column] is not None]
    if not vals:
        return None
    if func == "sum":
        return _sum(vals)
    if func == "avg":
        return _sum(vals) / len(vals)
    if func == "min":
        return min(vals)
    if func == "max":
        return max(vals)
    if func == "spread":
        return max(vals) - min(vals)
    raise UnsupportedOperation(f"unsupported aggregate {func}")


def _sum(vals: Sequence[Any]) -> Any:
    total = vals[0]
    for v in vals[1:]:
        total = total + v
    return total


def agg_columns(spec: AggSpec) -> tuple[str, ...]:
    cols = () if spec.column is None else (spec.column,)
    return cols + predicate_columns(spec.when)


def null_last_key(values: Sequence[Any]) -> tuple:
    return tuple((v is None, v if v is not None else 0) for v in values)


def group_aggregate(
    rows: Iterable[Row],
    group_by: Sequence[str],
    aggregates: Sequence[AggSpec],
    having: Having | None = None,
    group_names: Sequence[str] | None = None,
) -> OpResult:
    """GROUP BY over visible rows; groups come back ordered, NULLs last."""
    columns = tuple(group_names or group_by) + tuple(a.alias for a in aggregates)
    groups: dict[tuple, list[Row]] = {}
    for r in rows:
        groups.setdefault(tuple(r[g] for g in group_by), []).append(r)
    if not group_by and not groups:
        groups[()] = []
    out = []
    for gkey in sorted(groups, key=null_last_key):
        members = groups[gkey]
        if having is not None:
            left = aggregate_value(having.agg, members)
            if isinstance(having.right, Const):
                right = having.right.value
            else:
                right = members[0][having.right.column] if members else None
            if not compare(left, having.op, right):
                continue
        out.append(gkey + tuple(aggregate_value(a, members) for a in aggregates))
    return OpResult.table(columns, out)


def merge_cross_branch(desc: CrossBranchAggregate, results: Sequence[tuple[str, OpResult]]) -> OpResult:
    """Union per-branch results tagged with ``branch_id``; apply ``outer`` if set."""
    union_cols: tuple[str, ...] | None = None
    union: list[dict[str, Any]] = []
    tagged: list[tuple] = []
    for branch_id, res in results:
        if not res.ok:
            raise BackendError(f"branch {branch_id}: {res.error_class}: {res.message}")
        if union_cols is None:
            union_cols = res.columns
        for row in res.rows or ():
            tagged.append((branch_id,) + tuple(row))
            union.append(dict(zip(res.columns, row)))
    if desc.outer is None:
        cols = ("branch_id",) + (union_cols or desc.targets[0][1].output_columns)
        return OpResult.table(cols, tagged)
    for spec in desc.outer:
        for c in agg_columns(spec):
            for row in union:
                if c not in row:
                    raise UnsupportedOperation(f"outer aggregate column {c} missing from branch results")
    return group_aggregate(union, (), desc.outer)
