"""Table schemas, semantic value types and canonical value formatting."""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

INTEGER = "integer"
DECIMAL = "decimal"
TEXT = "text"
BOOLEAN = "boolean"
TIMESTAMP = "timestamp"

TYPES = (INTEGER, DECIMAL, TEXT, BOOLEAN, TIMESTAMP)

# Fixed logical widths; text is counted by encoded length.
TYPE_WIDTH = {INTEGER: 8, DECIMAL: 8, BOOLEAN: 1, TIMESTAMP: 8}

NULL_TOKEN = r"\N"
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Column:
    name: str
    type: str
    nullable: bool = True
    default: Any = None
    length: int | None = None

    def __post_init__(self) -> None:
        if self.type not in TYPES:
            raise SchemaError(f"unknown column type {self.type!r} for {self.name}")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "type": self.type,
            "nullable": self.nullable,
            "default": encode_json_value(self.default),
            "length": self.length,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Column":
        return cls(
            name=obj["name"],
            type=obj["type"],
            nullable=obj.get("nullable", True),
            default=decode_json_value(obj.get("default"), obj["type"]),
            length=obj.get("length"),
        )


@dataclass(frozen=True)
class ForeignKey:
    columns: tuple[str, ...]
    ref_table: str
    ref_columns: tuple[str, ...]

    def to_json(self) -> dict:
        return {"columns": list(self.columns), "ref_table": self.ref_table,
                "ref_columns": list(self.ref_columns)}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "ForeignKey":
        return cls(tuple(obj["columns"]), obj["ref_table"], tuple(obj["ref_columns"]))


@dataclass(frozen=True)
class TableSchema:
    """Ordered columns plus key metadata.

    ``dropped`` remembers every column name ever dropped from the table so a
    later ``AddColumn`` cannot resurrect stale values kept by metadata-only
    backends.
    """

    name: str
    columns: tuple[Column, ...]
    primary_key: tuple[str, ...]
    foreign_keys: tuple[ForeignKey, ...] = ()
    indexes: tuple[tuple[str, ...], ...] = ()
    dropped: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate column names in {self.name}")
        by_name = {c.name: c for c in self.columns}
        for k in self.primary_key:
            if k not in by_name:
                raise SchemaError(f"primary key column {k} missing from {self.name}")
            if by_name[k].nullable:
                raise SchemaError(f"primary key column {k} of {self.name} is nullable")

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def column(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def has_column(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def with_column(self, column: Column) -> "TableSchema":
        if self.has_column(column.name):
            raise SchemaError(f"column {column.name} already exists in {self.name}")
        if column.name in self.dropped:
            raise SchemaError(f"column name {column.name} was dropped from {self.name} and cannot be reused")
        return replace(self, columns=self.columns + (column,))

    def without_column(self, name: str) -> "TableSchema":
        if not self.has_column(name):
            raise SchemaError(f"no column {name} in {self.name}")
        if name in self.primary_key:
            raise SchemaError(f"cannot drop primary key column {name}")
        for fk in self.foreign_keys:
            if name in fk.columns:
                raise SchemaError(f"cannot drop foreign key column {name}")
        return replace(
            self,
            columns=tuple(c for c in self.columns if c.name != name),
            indexes=tuple(ix for ix in self.indexes if name not in ix),
            dropped=self.dropped | {name},
        )

    def with_index(self, columns: Sequence[str]) -> "TableSchema":
        for c in columns:
            if not self.has_column(c):
                raise SchemaError(f"no column {c} in {self.name}")
        cols = tuple(columns)
        if cols in self.indexes:
            return self
        return replace(self, indexes=self.indexes + (cols,))

    def key_of(self, row: Mapping[str, Any]) -> tuple:
        return tuple(row[k] for k in self.primary_key)

    def visible(self, raw: Mapping[str, Any]) -> dict[str, Any]:
        """Project a stored row onto the schema, synthesizing defaults."""
        return {c.name: raw.get(c.name, c.default) for c in self.columns}

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "columns": [c.to_json() for c in self.columns],
            "primary_key": list(self.primary_key),
            "foreign_keys": [fk.to_json() for fk in self.foreign_keys],
            "indexes": [list(ix) for ix in self.indexes],
            "dropped": sorted(self.dropped),
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "TableSchema":
        return cls(
            name=obj["name"],
            columns=tuple(Column.from_json(c) for c in obj["columns"]),
            primary_key=tuple(obj["primary_key"]),
            foreign_keys=tuple(ForeignKey.from_json(f) for f in obj.get("foreign_keys", ())),
            indexes=tuple(tuple(ix) for ix in obj.get("indexes", ())),
            dropped=frozenset(obj.get("dropped", ())),
        )


def value_bytes(value: Any) -> int:
    if value is None:
        return 0
    if isinstance(value, bool):
        return TYPE_WIDTH[BOOLEAN]
    if isinstance(value, int):
        return TYPE_WIDTH[INTEGER]
    if isinstance(value, float):
        return TYPE_WIDTH[DECIMAL]
    if isinstance(value, _dt.datetime):
        return TYPE_WIDTH[TIMESTAMP]
    if isinstance(value, str):
        return len(value.encode("utf-8"))
    raise TypeError(f"unsupported value type {type(value).__name__}")


def row_bytes(row: Mapping[str, Any]) -> int:
    return sum(value_bytes(v) for v in row.values())


def key_bytes(key: Iterable[Any]) -> int:
    return sum(value_bytes(v) for v in key)


def format_value(value: Any) -> str:
    """Canonical text form used by CSV export and branch dumps."""
    if value is None:
        return NULL_TOKEN
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, _dt.datetime):
        return value.strftime(TIMESTAMP_FORMAT)
    return str(value)


def parse_value(text: str, type_: str) -> Any:
    if text == NULL_TOKEN:
        return None
    if type_ == INTEGER:
        return int(text)
    if type_ == DECIMAL:
        return float(text)
    if type_ == BOOLEAN:
        if text not in ("true", "false"):
            raise SchemaError(f"bad boolean literal {text!r}")
        return text == "true"
    if type_ == TIMESTAMP:
        return _dt.datetime.strptime(text, TIMESTAMP_FORMAT)
    return text


def encode_json_value(value: Any) -> Any:
    if isinstance(value, _dt.datetime):
        return {"$ts": value.strftime(TIMESTAMP_FORMAT)}
    return value


def decode_json_value(value: Any, type_: str | None = None) -> Any:
    if isinstance(value, dict) and "$ts" in value:
        return _dt.datetime.strptime(value["$ts"], TIMESTAMP_FORMAT)
    if type_ == DECIMAL and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value
