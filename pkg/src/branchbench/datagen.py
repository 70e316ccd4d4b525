"""CH-benCHmark style schema and deterministic seeded data generation.

Every generated column value is drawn from a Philox stream keyed by
``(seed, table index, column index)``; the row index is the stream
position, so a value never depends on generation order and the first rows
of a table are the same at every scale factor.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping

import numpy as np

from .schema import (
    BOOLEAN,
    DECIMAL,
    INTEGER,
    TEXT,
    TIMESTAMP,
    Column,
    ForeignKey,
    TableSchema,
    format_value,
    parse_value,
)

MANIFEST_NAME = "schema.json"
MANIFEST_VERSION = 1

TABLE_NAMES = (
    "warehouse",
    "district",
    "customer",
    "history",
    "orders",
    "new_order",
    "order_line",
    "item",
    "stock",
    "region",
    "nation",
    "supplier",
)

DEFAULT_MULTIPLIERS = {
    "district": 10,  # per warehouse
    "customer": 30,  # per district
    "history": 1,  # per customer
    "orders": 30,  # per district
    "new_order": 9,  # per district, the newest orders
    "order_line": 10,  # per order
    "item": 1000,  # global
    "stock": 1000,  # per warehouse
    "region": 5,  # global
    "nation": 10,  # global
    "supplier": 20,  # global
}

TEXT_LENGTH = 16
EPOCH = _dt.datetime(2024, 1, 1)
YEAR_SECONDS = 365 * 24 * 3600

# Value ranges exposed for workload templates (tier thresholds and friends).
YTD_PAYMENT_RANGE = (10.0, 5000.0)
BALANCE_RANGE = (-500.0, 5000.0)
BALANCE_NULL_FRACTION = 0.05
BAD_CREDIT_FRACTION = 0.1
STOCK_QUANTITY_RANGE = (10, 100)
OL_AMOUNT_RANGE = (0.01, 9999.99)

_ALPHABET = np.array(list("abcdefghijklmnopqrstuvwxyz0123456789"))


class ConfigError(ValueError):
    pass


class LoadError(RuntimeError):
    pass


@dataclass(frozen=True)
class DataGenConfig:
    warehouses: int = 1
    seed: int = 0
    row_multipliers: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.warehouses, int) or self.warehouses < 1:
            raise ConfigError(f"warehouses must be a positive integer, got {self.warehouses!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        unknown = set(self.row_multipliers) - set(DEFAULT_MULTIPLIERS)
        if unknown:
            raise ConfigError(f"unknown multiplier(s): {sorted(unknown)}")
        m = self.multipliers
        for name, value in m.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"multiplier {name} must be a positive integer, got {value!r}")
        if m["new_order"] > m["orders"]:
            raise ConfigError("new_order multiplier cannot exceed orders per district")
        if m["stock"] > m["item"]:
            raise ConfigError("stock per warehouse cannot exceed the item count")

    @property
    def multipliers(self) -> dict[str, int]:
        merged = dict(DEFAULT_MULTIPLIERS)
        merged.update(self.row_multipliers)
        return merged


@dataclass(frozen=True)
class Table:
    schema: TableSchema
    rows: tuple[tuple, ...]

    @property
    def name(self) -> str:
        return self.schema.name

    def row_dicts(self) -> Iterator[dict[str, Any]]:
        names = self.schema.column_names
        for row in self.rows:
            yield dict(zip(names, row))


@dataclass(frozen=True)
class Dataset:
    config: DataGenConfig
    tables: tuple[Table, ...]

    def table(self, name: str) -> Table:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)

    def row_counts(self) -> dict[str, int]:
        return {t.name: len(t.rows) for t in self.tables}

    def total_rows(self) -> int:
        return sum(len(t.rows) for t in self.tables)

    def serialize(self) -> bytes:
        """Canonical bytes: manifest followed by every table's CSV."""
        out = io.StringIO()
        out.write(json.dumps(manifest(self), sort_keys=True))
        out.write("\n")
        for t in self.tables:
            out.write(f"# {t.name}\n")
            out.write(table_csv(t.schema, t.rows))
        return out.getvalue().encode("utf-8")


def expected_row_counts(config: DataGenConfig) -> dict[str, int]:
    m = config.multipliers
    w = config.warehouses
    districts = w * m["district"]
    customers = districts * m["customer"]
    orders = districts * m["orders"]
    return {
        "warehouse": w,
        "district": districts,
        "customer": customers,
        "history": customers * m["history"],
        "orders": orders,
        "new_order": districts * m["new_order"],
        "order_line": orders * m["order_line"],
        "item": m["item"],
        "stock": w * m["stock"],
        "region": m["region"],
        "nation": m["nation"],
        "supplier": m["supplier"],
    }


def _text(name: str, length: int = TEXT_LENGTH, nullable: bool = True) -> Column:
    return Column(name, TEXT, nullable=nullable, length=length)


def _int(name: str, nullable: bool = True) -> Column:
    return Column(name, INTEGER, nullable=nullable)


def _key(name: str) -> Column:
    return Column(name, INTEGER, nullable=False)


def _dec(name: str, nullable: bool = True) -> Column:
    return Column(name, DECIMAL, nullable=nullable)


def _ts(name: str, nullable: bool = True) -> Column:
    return Column(name, TIMESTAMP, nullable=nullable)


def build_schemas() -> dict[str, TableSchema]:
    fk = ForeignKey
    schemas = [
        TableSchema(
            "warehouse",
            (_key("w_id"), _text("w_name", 10), _text("w_street_1", 20), _text("w_city", 20),
             _text("w_state", 2), _text("w_zip", 9), _dec("w_tax"), _dec("w_ytd")),
            ("w_id",),
        ),
        TableSchema(
            "district",
            (_key("d_w_id"), _key("d_id"), _text("d_name", 10), _text("d_street_1", 20),
             _text("d_city", 20), _text("d_state", 2), _text("d_zip", 9), _dec("d_tax"),
             _dec("d_ytd"), _int("d_next_o_id")),
            ("d_w_id", "d_id"),
            (fk(("d_w_id",), "warehouse", ("w_id",)),),
        ),
        TableSchema(
            "customer",
            (_key("c_w_id"), _key("c_d_id"), _key("c_id"), _text("c_first"), _text("c_last"),
             _text("c_credit", 2), _dec("c_balance"), _dec("c_ytd_payment"),
             _int("c_payment_cnt"), _int("c_delivery_cnt"), _ts("c_since")),
            ("c_w_id", "c_d_id", "c_id"),
            (fk(("c_w_id", "c_d_id"), "district", ("d_w_id", "d_id")),),
        ),
        TableSchema(
            "history",
            (_key("h_c_w_id"), _key("h_c_d_id"), _key("h_c_id"), _key("h_seq"), _int("h_d_id"),
             _int("h_w_id"), _ts("h_date"), _dec("h_amount"), _text("h_data", 24)),
            ("h_c_w_id", "h_c_d_id", "h_c_id", "h_seq"),
            (fk(("h_c_w_id", "h_c_d_id", "h_c_id"), "customer", ("c_w_id", "c_d_id", "c_id")),),
        ),
        TableSchema(
            "orders",
            (_key("o_w_id"), _key("o_d_id"), _key("o_id"), _int("o_c_id"), _ts("o_entry_d"),
             _int("o_carrier_id"), _int("o_ol_cnt"), Column("o_all_local", BOOLEAN)),
            ("o_w_id", "o_d_id", "o_id"),
            (fk(("o_w_id", "o_d_id", "o_c_id"), "customer", ("c_w_id", "c_d_id", "c_id")),),
        ),
        TableSchema(
            "new_order",
            (_key("no_w_id"), _key("no_d_id"), _key("no_o_id")),
            ("no_w_id", "no_d_id", "no_o_id"),
            (fk(("no_w_id", "no_d_id", "no_o_id"), "orders", ("o_w_id", "o_d_id", "o_id")),),
        ),
        TableSchema(
            "order_line",
            (_key("ol_w_id"), _key("ol_d_id"), _key("ol_o_id"), _key("ol_number"), _int("ol_i_id"),
             _int("ol_supply_w_id"), _ts("ol_delivery_d"), _int("ol_quantity"), _dec("ol_amount"),
             _text("ol_dist_info", 24)),
            ("ol_w_id", "ol_d_id", "ol_o_id", "ol_number"),
            (
                fk(("ol_w_id", "ol_d_id", "ol_o_id"), "orders", ("o_w_id", "o_d_id", "o_id")),
                fk(("ol_supply_w_id", "ol_i_id"), "stock", ("s_w_id", "s_i_id")),
                fk(("ol_supply_w_id",), "warehouse", ("w_id",)),
                fk(("ol_i_id",), "item", ("i_id",)),
            ),
        ),
        TableSchema(
            "item",
            (_key("i_id"), _int("i_im_id"), _text("i_name", 24), _dec("i_price"), _text("i_data", 26)),
            ("i_id",),
        ),
        TableSchema(
            "stock",
            (_key("s_w_id"), _key("s_i_id"), _int("s_quantity"), _int("s_ytd"), _int("s_order_cnt"),
             _int("s_remote_cnt"), _text("s_data", 26), _int("s_su_suppkey")),
            ("s_w_id", "s_i_id"),
            (
                fk(("s_w_id",), "warehouse", ("w_id",)),
                fk(("s_i_id",), "item", ("i_id",)),
                fk(("s_su_suppkey",), "supplier", ("su_suppkey",)),
            ),
        ),
        TableSchema(
            "region",
            (_key("r_regionkey"), _text("r_name", 12), _text("r_comment", 24)),
            ("r_regionkey",),
        ),
        TableSchema(
            "nation",
            (_key("n_nationkey"), _text("n_name", 12), _int("n_regionkey")),
            ("n_nationkey",),
            (fk(("n_regionkey",), "region", ("r_regionkey",)),),
        ),
        TableSchema(
            "supplier",
            (_key("su_suppkey"), _text("su_name", 18), _text("su_address", 24), _int("su_nationkey"),
             _text("su_phone", 15), _dec("su_acctbal"), _text("su_comment", 24)),
            ("su_suppkey",),
            (fk(("su_nationkey",), "nation", ("n_nationkey",)),),
        ),
    ]
    return {s.name: s for s in schemas}


SCHEMAS = build_schemas()


class _Streams:
    """Per-column uniform streams for one table."""

    def __init__(self, seed: int, table: str):
        self.seed = seed
        self.table_idx = TABLE_NAMES.index(table)
        self.columns = SCHEMAS[table].column_names

    def uniform(self, column: str, n: int, salt: int = 0) -> np.ndarray:
        col_idx = self.columns.index(column)
        word = (self.table_idx << 40) | (salt << 32) | col_idx
        gen = np.random.Generator(np.random.Philox(key=np.array([self.seed, word], dtype=np.uint64)))
        return gen.random(n)

    def ints(self, column: str, n: int, lo: int, hi: int) -> list[int]:
        u = self.uniform(column, n)
        return (lo + np.floor(u * (hi - lo + 1)).astype(np.int64)).tolist()

    def decimals(self, column: str, n: int, lo: float, hi: float) -> list[float]:
        lo_c, hi_c = round(lo * 100), round(hi * 100)
        u = self.uniform(column, n)
        cents = lo_c + np.floor(u * (hi_c - lo_c + 1)).astype(np.int64)
        return [c / 100 for c in cents.tolist()]

    def text(self, column: str, n: int) -> list[str]:
        length = SCHEMAS[self.table_name].column(column).length or TEXT_LENGTH
        u = self.uniform(column, n * length)
        chars = _ALPHABET[np.floor(u * len(_ALPHABET)).astype(np.int64)]
        flat = "".join(chars.tolist())
        return [flat[i * length:(i + 1) * length] for i in range(n)]

    def timestamps(self, column: str, n: int) -> list[_dt.datetime]:
        u = self.uniform(column, n)
        secs = np.floor(u * YEAR_SECONDS).astype(np.int64).tolist()
        return [EPOCH + _dt.timedelta(seconds=s) for s in secs]

    def bools(self, column: str, n: int, p_true: float = 0.5) -> list[bool]:
        return (self.uniform(column, n) < p_true).tolist()

    def null_mask(self, column: str, n: int, fraction: float) -> list[bool]:
        return (self.uniform(column, n, salt=1) < fraction).tolist()

    @property
    def table_name(self) -> str:
        return TABLE_NAMES[self.table_idx]


def _columns_to_rows(schema: TableSchema, cols: dict[str, list]) -> tuple[tuple, ...]:
    return tuple(zip(*(cols[c] for c in schema.column_names)))


def _fill_text(st: _Streams, schema: TableSchema, cols: dict[str, list], n: int) -> None:
    for c in schema.columns:
        if c.name not in cols and c.type == TEXT:
            cols[c.name] = st.text(c.name, n)


def generate_dataset(config: DataGenConfig) -> Dataset:
    """Build every table; equal configs give equal datasets."""
    m = config.multipliers
    W = config.warehouses
    seed = config.seed
    counts = expected_row_counts(config)
    tables: dict[str, Table] = {}

    def build(name: str, cols: dict[str, list]) -> None:
        schema = SCHEMAS[name]
        n = counts[name]
        _fill_text(_Streams(seed, name), schema, cols, n)
        tables[name] = Table(schema, _columns_to_rows(schema, cols))

    n = counts["warehouse"]
    st = _Streams(seed, "warehouse")
    build("warehouse", {
        "w_id": list(range(1, W + 1)),
        "w_tax": st.decimals("w_tax", n, 0.0, 0.2),
        "w_ytd": st.decimals("w_ytd", n, 100000.0, 300000.0),
    })

    n = counts["district"]
    st = _Streams(seed, "district")
    nd = m["district"]
    build("district", {
        "d_w_id": [i // nd + 1 for i in range(n)],
        "d_id": [i % nd + 1 for i in range(n)],
        "d_tax": st.decimals("d_tax", n, 0.0, 0.2),
        "d_ytd": st.decimals("d_ytd", n, 10000.0, 30000.0),
        "d_next_o_id": [m["orders"] + 1] * n,
    })

    n = counts["customer"]
    st = _Streams(seed, "customer")
    nc = m["customer"]
    balances = st.decimals("c_balance", n, *BALANCE_RANGE)
    nulls = st.null_mask("c_balance", n, BALANCE_NULL_FRACTION)
    build("customer", {
        "c_w_id": [i // (nd * nc) + 1 for i in range(n)],
        "c_d_id": [(i // nc) % nd + 1 for i in range(n)],
        "c_id": [i % nc + 1 for i in range(n)],
        "c_credit": ["BC" if bad else "GC" for bad in st.bools("c_credit", n, BAD_CREDIT_FRACTION)],
        "c_balance": [None if z else b for b, z in zip(balances, nulls)],
        "c_ytd_payment": st.decimals("c_ytd_payment", n, *YTD_PAYMENT_RANGE),
        "c_payment_cnt": st.ints("c_payment_cnt", n, 1, 20),
        "c_delivery_cnt": st.ints("c_delivery_cnt", n, 0, 10),
        "c_since": st.timestamps("c_since", n),
    })

    n = counts["history"]
    st = _Streams(seed, "history")
    nh = m["history"]
    cust_idx = [i // nh for i in range(n)]
    build("history", {
        "h_c_w_id": [ci // (nd * nc) + 1 for ci in cust_idx],
        "h_c_d_id": [(ci // nc) % nd + 1 for ci in cust_idx],
        "h_c_id": [ci % nc + 1 for ci in cust_idx],
        "h_seq": [i % nh + 1 for i in range(n)],
        "h_d_id": [(ci // nc) % nd + 1 for ci in cust_idx],
        "h_w_id": [ci // (nd * nc) + 1 for ci in cust_idx],
        "h_date": st.timestamps("h_date", n),
        "h_amount": st.decimals("h_amount", n, 1.0, 5000.0),
    })

    n = counts["orders"]
    st = _Streams(seed, "orders")
    no = m["orders"]
    o_ids = [i % no + 1 for i in range(n)]
    first_new = no - m["new_order"] + 1
    carriers = st.ints("o_carrier_id", n, 1, 10)
    build("orders", {
        "o_w_id": [i // (nd * no) + 1 for i in range(n)],
        "o_d_id": [(i // no) % nd + 1 for i in range(n)],
        "o_id": o_ids,
        "o_c_id": st.ints("o_c_id", n, 1, nc),
        "o_entry_d": st.timestamps("o_entry_d", n),
        "o_carrier_id": [None if oid >= first_new else c for oid, c in zip(o_ids, carriers)],
        "o_ol_cnt": [m["order_line"]] * n,
        "o_all_local": st.bools("o_all_local", n, 0.9),
    })

    n = counts["new_order"]
    nn = m["new_order"]
    build("new_order", {
        "no_w_id": [i // (nd * nn) + 1 for i in range(n)],
        "no_d_id": [(i // nn) % nd + 1 for i in range(n)],
        "no_o_id": [first_new + i % nn for i in range(n)],
    })

    n = counts["order_line"]
    st = _Streams(seed, "order_line")
    nl = m["order_line"]
    per_w = nd * no * nl
    order_idx = [i // nl for i in range(n)]
    delivered = [o_ids[oi] < first_new for oi in order_idx]
    delivery = st.timestamps("ol_delivery_d", n)
    build("order_line", {
        "ol_w_id": [i // per_w + 1 for i in range(n)],
        "ol_d_id": [(i // (no * nl)) % nd + 1 for i in range(n)],
        "ol_o_id": [o_ids[oi] for oi in order_idx],
        "ol_number": [i % nl + 1 for i in range(n)],
        "ol_i_id": st.ints("ol_i_id", n, 1, m["stock"]),
        "ol_supply_w_id": st.ints("ol_supply_w_id", n, 1, W),
        "ol_delivery_d": [d if ok else None for d, ok in zip(delivery, delivered)],
        "ol_quantity": st.ints("ol_quantity", n, 1, 10),
        "ol_amount": st.decimals("ol_amount", n, *OL_AMOUNT_RANGE),
    })

    n = counts["item"]
    st = _Streams(seed, "item")
    build("item", {
        "i_id": list(range(1, n + 1)),
        "i_im_id": st.ints("i_im_id", n, 1, 10000),
        "i_price": st.decimals("i_price", n, 1.0, 100.0),
    })

    n = counts["stock"]
    st = _Streams(seed, "stock")
    ns = m["stock"]
    s_w = [i // ns + 1 for i in range(n)]
    s_i = [i % ns + 1 for i in range(n)]
    build("stock", {
        "s_w_id": s_w,
        "s_i_id": s_i,
        "s_quantity": st.ints("s_quantity", n, *STOCK_QUANTITY_RANGE),
        "s_ytd": [0] * n,
        "s_order_cnt": [0] * n,
        "s_remote_cnt": [0] * n,
        "s_su_suppkey": [(w * i) % m["supplier"] + 1 for w, i in zip(s_w, s_i)],
    })

    n = counts["region"]
    build("region", {"r_regionkey": list(range(1, n + 1))})

    n = counts["nation"]
    build("nation", {
        "n_nationkey": list(range(1, n + 1)),
        "n_regionkey": [i % m["region"] + 1 for i in range(n)],
    })

    n = counts["supplier"]
    st = _Streams(seed, "supplier")
    build("supplier", {
        "su_suppkey": list(range(1, n + 1)),
        "su_nationkey": [i % m["nation"] + 1 for i in range(n)],
        "su_acctbal": st.decimals("su_acctbal", n, -999.99, 9999.99),
    })

    return Dataset(config, tuple(tables[name] for name in TABLE_NAMES))


def load_dataset(dataset: Dataset, session) -> dict[str, int]:
    """Load ``dataset`` into the session's (empty) branch; returns row counts."""
    from .errors import BackendError

    existing = session.list_tables()
    if existing:
        raise LoadError(f"branch {session.branch_id} is not empty: has tables {sorted(existing)}")
    counts = {}
    for table in dataset.tables:
        try:
            counts[table.name] = session.load_table(table.schema, table.rows)
        except BackendError as exc:
            raise LoadError(f"backend rejected table {table.name}: {exc}") from exc
    return counts


def manifest(dataset: Dataset) -> dict:
    return {
        "version": MANIFEST_VERSION,
        "warehouses": dataset.config.warehouses,
        "seed": dataset.config.seed,
        "multipliers": dataset.config.multipliers,
        "tables": [
            {"schema": t.schema.to_json(), "rows": len(t.rows), "file": f"{t.name}.csv"}
            for t in dataset.tables
        ],
    }


def table_csv(schema: TableSchema, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(schema.column_names)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def export_csv(dataset: Dataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t in dataset.tables:
        (out / f"{t.name}.csv").write_text(table_csv(t.schema, t.rows), encoding="utf-8")
    (out / MANIFEST_NAME).write_text(json.dumps(manifest(dataset), indent=2, sort_keys=True), encoding="utf-8")
    return out


def import_csv(in_dir: str | Path) -> Dataset:
    src = Path(in_dir)
    man = json.loads((src / MANIFEST_NAME).read_text(encoding="utf-8"))
    if man.get("version") != MANIFEST_VERSION:
        raise ConfigError(f"unsupported manifest version {man.get('version')!r}")
    defaults = DEFAULT_MULTIPLIERS
    overrides = {k: v for k, v in man["multipliers"].items() if defaults.get(k) != v}
    config = DataGenConfig(man["warehouses"], man["seed"], overrides)
    tables = []
    for entry in man["tables"]:
        schema = TableSchema.from_json(entry["schema"])
        types = [c.type for c in schema.columns]
        with open(src / entry["file"], newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != schema.column_names:
                raise ConfigError(f"header mismatch in {entry['file']}")
            rows = tuple(tuple(parse_value(v, t) for v, t in zip(r, types)) for r in reader)
        if len(rows) != entry["rows"]:
            raise ConfigError(f"{entry['file']}: expected {entry['rows']} rows, found {len(rows)}")
        tables.append(Table(schema, rows))
    return Dataset(config, tuple(tables))
