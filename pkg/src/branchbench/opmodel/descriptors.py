"""Dialect-neutral operation descriptors and their canonical JSON form."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Any, Union

from ..schema import Column, decode_json_value, encode_json_value

# ---------------------------------------------------------------- expressions

COMPARE_OPS = ("=", "<>", "<", "<=", ">", ">=")
ARITH_OPS = ("+", "-", "*")


@dataclass(frozen=True)
class Const:
    value: Any


@dataclass(frozen=True)
class ColRef:
    column: str


@dataclass(frozen=True)
class Arith:
    """``column <op> operand`` with a constant operand."""

    column: str
    op: str
    operand: Any

    def __post_init__(self) -> None:
        if self.op not in ARITH_OPS:
            raise ValueError(f"unsupported arithmetic operator {self.op!r}")


@dataclass(frozen=True)
class CaseWhen:
    """``CASE WHEN column <op> value THEN result ... ELSE otherwise END``."""

    column: str
    branches: tuple[tuple[str, Any, Any], ...]
    otherwise: Any = None

    def __post_init__(self) -> None:
        for op, _, _ in self.branches:
            if op not in COMPARE_OPS:
                raise ValueError(f"unsupported comparison {op!r}")


Expr = Union[Const, ColRef, Arith, CaseWhen]

# ----------------------------------------------------------------- predicates


@dataclass(frozen=True)
class TruePred:
    pass


@dataclass(frozen=True)
class KeyEq:
    columns: tuple[str, ...]
    key: tuple


@dataclass(frozen=True)
class KeyRange:
    columns: tuple[str, ...]
    lo: tuple
    hi: tuple

    def __post_init__(self) -> None:
        if tuple(self.lo) > tuple(self.hi):
            raise ValueError(f"empty key range {self.lo} > {self.hi}")


@dataclass(frozen=True)
class IsNull:
    column: str
    negate: bool = False


@dataclass(frozen=True)
class Compare:
    column: str
    op: str
    value: Any

    def __post_init__(self) -> None:
        if self.op not in COMPARE_OPS:
            raise ValueError(f"unsupported comparison {self.op!r}")


Predicate = Union[TruePred, KeyEq, KeyRange, IsNull, Compare]

# ----------------------------------------------------------------- aggregates

AGG_FUNCS = ("count", "count_if", "sum", "avg", "min", "max", "spread")


@dataclass(frozen=True)
class AggSpec:
    """One aggregate output column.

    ``column`` is ``None`` only for ``count`` (COUNT(*)); ``count_if`` counts
    rows satisfying ``when``; ``spread`` is MAX - MIN.
    """

    func: str
    column: str | None
    alias: str
    when: Predicate | None = None

    def __post_init__(self) -> None:
        if self.func not in AGG_FUNCS:
            raise ValueError(f"unsupported aggregate {self.func!r}")
        if self.func == "count_if" and self.when is None:
            raise ValueError("count_if needs a predicate")
        if self.column is None and self.func not in ("count", "count_if"):
            raise ValueError(f"{self.func} needs a column")


@dataclass(frozen=True)
class Join:
    table: str
    on: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class Having:
    agg: AggSpec
    op: str
    right: Union[Const, ColRef]

    def __post_init__(self) -> None:
        if self.op not in COMPARE_OPS:
            raise ValueError(f"unsupported comparison {self.op!r}")


# ---------------------------------------------------------------- descriptors


@dataclass(frozen=True)
class AddColumn:
    table: str
    column: Column


@dataclass(frozen=True)
class DropColumn:
    table: str
    column: str


@dataclass(frozen=True)
class CreateIndex:
    table: str
    columns: tuple[str, ...]


@dataclass(frozen=True)
class Insert:
    table: str
    values: tuple[tuple[str, Any], ...]


@dataclass(frozen=True)
class UpdateWhere:
    table: str
    assignments: tuple[tuple[str, Expr], ...]
    where: Predicate = TruePred()


@dataclass(frozen=True)
class DeleteWhere:
    table: str
    where: Predicate


@dataclass(frozen=True)
class PointRead:
    """Whole row(s) whose ``columns`` (a key or key prefix) equal ``key``."""

    table: str
    columns: tuple[str, ...]
    key: tuple


@dataclass(frozen=True)
class RangeRead:
    """Whole rows with ``lo <= (columns) <= hi``, in key order."""

    table: str
    columns: tuple[str, ...]
    lo: tuple
    hi: tuple

    def __post_init__(self) -> None:
        if tuple(self.lo) > tuple(self.hi):
            raise ValueError(f"RangeRead needs lo <= hi, got {self.lo} > {self.hi}")


@dataclass(frozen=True)
class Aggregate:
    table: str
    aggregates: tuple[AggSpec, ...]
    group_by: tuple[str, ...] = ()
    join: Join | None = None
    where: Predicate | None = None
    having: Having | None = None
    group_aliases: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.group_aliases and len(self.group_aliases) != len(self.group_by):
            raise ValueError("group_aliases must name every group-by column")

    @property
    def group_names(self) -> tuple[str, ...]:
        return self.group_aliases or self.group_by

    @property
    def output_columns(self) -> tuple[str, ...]:
        return self.group_names + tuple(a.alias for a in self.aggregates)


@dataclass(frozen=True)
class CrossBranchAggregate:
    """Per-branch inner aggregates, tagged with branch id and unioned.

    When ``outer`` is given the union is collapsed into one row of outer
    aggregates over the inner output columns.
    """

    targets: tuple[tuple[str, Aggregate], ...]
    outer: tuple[AggSpec, ...] | None = None

    def __post_init__(self) -> None:
        if not self.targets:
            raise ValueError("cross-branch aggregate needs at least one branch")

    @property
    def branches(self) -> tuple[str, ...]:
        return tuple(b for b, _ in self.targets)


Kind = Union[AddColumn, DropColumn, CreateIndex, Insert, UpdateWhere, DeleteWhere,
             PointRead, RangeRead, Aggregate, CrossBranchAggregate]

SCHEMA_KINDS = (AddColumn, DropColumn, CreateIndex)
MUTATION_KINDS = (Insert, UpdateWhere, DeleteWhere)
READ_KINDS = (PointRead, RangeRead, Aggregate)

PHASES = ("mutate", "evaluate", "cross_branch", "setup", "micro")


@dataclass(frozen=True)
class Provenance:
    workflow: str
    worker: int
    step: int
    phase: str
    ordinal: int


def make_op_id(worker: int, step: int, phase: str, ordinal: int) -> int:
    """Pack provenance into 64 bits: worker:24 | step:20 | phase:4 | ordinal:16."""
    if not (0 <= worker < 1 << 24 and 0 <= step < 1 << 20 and 0 <= ordinal < 1 << 16):
        raise ValueError("provenance out of op-id range")
    return (worker << 40) | (step << 20) | (PHASES.index(phase) << 16) | ordinal


@dataclass(frozen=True)
class OperationDescriptor:
    kind: Kind
    op_id: int = 0
    provenance: Provenance | None = None

    @classmethod
    def build(cls, kind: Kind, workflow: str, worker: int, step: int, phase: str, ordinal: int):
        return cls(kind, make_op_id(worker, step, phase, ordinal),
                   Provenance(workflow, worker, step, phase, ordinal))


def unwrap(op) -> Kind:
    return op.kind if isinstance(op, OperationDescriptor) else op


def category_of(op) -> str:
    """Metric category for a descriptor."""
    kind = unwrap(op)
    if isinstance(kind, SCHEMA_KINDS):
        return "schema_op"
    if isinstance(kind, MUTATION_KINDS):
        return "data_mutation"
    if isinstance(kind, CrossBranchAggregate):
        return "cross_branch_query"
    return "read_query"


# ----------------------------------------------------------------- JSON codec

_CLASSES = {
    cls.__name__: cls
    for cls in (Const, ColRef, Arith, CaseWhen, TruePred, KeyEq, KeyRange, IsNull, Compare, AggSpec,
                Join, Having, AddColumn, DropColumn, CreateIndex, Insert, UpdateWhere, DeleteWhere,
                PointRead, RangeRead, Aggregate, CrossBranchAggregate, Provenance, OperationDescriptor)
}


# Type tag key; distinct from every dataclass field name.
TAG = "@type"


def _encode(obj: Any) -> Any:
    if isinstance(obj, Column):
        return {TAG: "Column", **obj.to_json()}
    if dataclasses.is_dataclass(obj):
        out = {TAG: type(obj).__name__}
        for f in dataclasses.fields(obj):
            out[f.name] = _encode(getattr(obj, f.name))
        return out
    if isinstance(obj, (tuple, list)):
        return [_encode(v) for v in obj]
    return encode_json_value(obj)


def _decode(obj: Any) -> Any:
    if isinstance(obj, list):
        return tuple(_decode(v) for v in obj)
    if isinstance(obj, dict):
        if "$ts" in obj:
            return decode_json_value(obj)
        kind = obj.get(TAG)
        if kind == "Column":
            return Column.from_json(obj)
        if kind in _CLASSES:
            cls = _CLASSES[kind]
            return cls(**{k: _decode(v) for k, v in obj.items() if k != TAG})
        raise ValueError(f"unknown descriptor kind {kind!r}")
    return obj


def to_json_obj(op) -> Any:
    return _encode(op)


def from_json_obj(obj: Any):
    return _decode(obj)


def dumps(op) -> str:
    """Canonical JSON text (sorted keys, no whitespace)."""
    return json.dumps(_encode(op), sort_keys=True, separators=(",", ":"))


def loads(text: str):
    return _decode(json.loads(text))
