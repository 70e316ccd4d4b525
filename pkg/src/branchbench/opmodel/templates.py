"""Per-workflow operation templates.

Each template turns a step context plus a seeded ``random.Random`` into the
step's schema changes, data mutations and evaluation reads, and builds the
workflow's cross-branch comparison over a frontier snapshot.
"""

from __future__ import annotations

import datetime as _dt
import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from ..datagen import (
    DEFAULT_MULTIPLIERS,
    EPOCH,
    SCHEMAS,
    YTD_PAYMENT_RANGE,
)
from ..errors import SchedulingError
from ..schema import BOOLEAN, DECIMAL, INTEGER, TEXT, Column
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
    Having,
    Insert,
    IsNull,
    Join,
    KeyEq,
    OperationDescriptor,
    TruePred,
    UpdateWhere,
    make_op_id,
)

WORKFLOWS = ("software_dev", "failure_repro", "data_cleaning", "mcts", "simulation")

# Inserted keys live far above generated ones.
INSERT_ID_BASE = 1_000_000
STOCKOUT_LEVEL = 10

CUSTOMER_KEY = SCHEMAS["customer"].primary_key
STOCK_KEY = SCHEMAS["stock"].primary_key
ORDER_LINE_KEY = SCHEMAS["order_line"].primary_key
ORDERS_ORDER_LINE = (("o_w_id", "ol_w_id"), ("o_d_id", "ol_d_id"), ("o_id", "ol_o_id"))


@dataclass(frozen=True)
class StepContext:
    workflow: str
    worker: int
    step: int
    branch_id: str
    schema_ops: int
    mutations: int
    reads: int
    seed: int = 0
    steps_per_worker: int = 1
    warehouses: int = 1
    multipliers: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_MULTIPLIERS))

    @property
    def global_step(self) -> int:
        return self.worker * self.steps_per_worker + self.step

    def op_id(self, phase: str, ordinal: int) -> int:
        return make_op_id(self.worker, self.step, phase, ordinal)

    def suffix(self, ordinal: int) -> str:
        """Column-name suffix for the schema op at ``ordinal`` of this step."""
        return format(self.op_id("mutate", ordinal), "x")

    def customer_key(self, rng: random.Random) -> tuple[int, int, int]:
        m = self.multipliers
        return (rng.randint(1, self.warehouses), rng.randint(1, m["district"]), rng.randint(1, m["customer"]))

    def stock_key(self, rng: random.Random) -> tuple[int, int]:
        return (rng.randint(1, self.warehouses), rng.randint(1, self.multipliers["stock"]))


@dataclass(frozen=True)
class FrontierEntry:
    """A frontier branch plus the step that created it (``None`` for the root)."""

    branch_id: str
    worker: int | None = None
    step: int | None = None


def step_rng(seed: int, workflow: str, worker: int, step: int) -> random.Random:
    return random.Random(f"{seed}:{workflow}:{worker}:{step}")


def _random_timestamp(rng: random.Random) -> _dt.datetime:
    return EPOCH + _dt.timedelta(seconds=rng.randrange(365 * 24 * 3600))


class WorkflowTemplate:
    name = ""
    # Aggregates applied over accumulated per-branch outcome rows.
    outcome_outer: tuple[AggSpec, ...] = (AggSpec("count", None, "branches"),)

    def schema_op(self, ctx: StepContext, rng: random.Random, i: int) -> object:
        raise NotImplementedError

    def mutation_op(self, ctx: StepContext, rng: random.Random, j: int, schema: Sequence) -> object:
        raise NotImplementedError

    def read_op(self, ctx: StepContext, rng: random.Random, k: int, schema: Sequence) -> object:
        raise NotImplementedError

    def cross_branch_inner(self, entry: FrontierEntry, ctx_like: "StepContext | None") -> Aggregate:
        raise NotImplementedError


class SoftwareDev(WorkflowTemplate):
    """Loyalty-tier feature: add a tier column, backfill it, test tier spread."""

    name = "software_dev"
    labels = ("bronze", "silver", "gold", "platinum")
    outcome_outer = (AggSpec("count", None, "tier_rows"), AggSpec("sum", "n", "customers"))

    def tier_column(self, ctx: StepContext) -> str:
        return f"loyalty_tier_{ctx.suffix(0)}" if ctx.schema_ops >= 1 else "c_credit"

    def thresholds(self, rng: random.Random) -> tuple[float, ...]:
        lo, hi = YTD_PAYMENT_RANGE
        width = (hi - lo) / 4
        return tuple(round(lo + q * width + rng.uniform(-0.1, 0.1) * width, 2) for q in (1, 2, 3))

    def schema_op(self, ctx, rng, i):
        if i == 0:
            return AddColumn("customer", Column(self.tier_column(ctx), TEXT))
        if i == 1:
            return CreateIndex("customer", (self.tier_column(ctx),))
        return AddColumn("customer", Column(f"loyalty_aux_{ctx.suffix(i)}", INTEGER))

    def mutation_op(self, ctx, rng, j, schema):
        tier = self.tier_column(ctx)
        if j == 0:
            t = self.thresholds(rng)
            case = CaseWhen("c_ytd_payment", tuple(("<", t[n], self.labels[n]) for n in range(3)), self.labels[3])
            return UpdateWhere("customer", ((tier, case),), TruePred())
        lo, hi = YTD_PAYMENT_RANGE
        cut = round(rng.uniform(lo, hi), 2)
        return UpdateWhere("customer", ((tier, Const(rng.choice(self.labels))),), Compare("c_ytd_payment", ">=", cut))

    def read_op(self, ctx, rng, k, schema):
        tier = self.tier_column(ctx)
        if k % 2 == 0:
            return Aggregate("customer", (AggSpec("count", None, "n"),), group_by=(tier,))
        return Aggregate(
            "customer",
            (AggSpec("count", None, "tier_count"), AggSpec("avg", "c_ytd_payment", "avg_payment")),
            group_by=(tier,),
        )

    def cross_branch_inner(self, entry, ctx):
        if entry.worker is None or ctx is None or ctx.schema_ops < 1:
            tier = "c_credit"  # the root has no tier column; compare against credit class
        else:
            tier = self.tier_column(ctx)
        return Aggregate(
            "customer",
            (AggSpec("count", None, "tier_count"), AggSpec("avg", "c_ytd_payment", "avg_payment")),
            group_by=(tier,),
            group_aliases=("loyalty_tier",),
        )


def bisection_order(n: int) -> list[int]:
    """Midpoint-first probe order over ``range(n)`` (breadth-first bisection)."""
    order, seen = [], set()
    intervals = [(0, n)]
    while intervals:
        nxt = []
        for lo, hi in intervals:
            if lo >= hi:
                continue
            mid = (lo + hi) // 2
            if mid not in seen:
                seen.add(mid)
                order.append(mid)
            nxt += [(lo, mid), (mid + 1, hi)]
        intervals = nxt
    return order


class FailureRepro(WorkflowTemplate):
    """Replay slices of a seeded virtual transaction log, then check o_ol_cnt."""

    name = "failure_repro"
    outcome_outer = (AggSpec("count", None, "mismatched_orders"),)

    def segment(self, ctx: StepContext) -> int:
        return bisection_order(ctx.steps_per_worker)[ctx.step % ctx.steps_per_worker]

    def log_rng(self, ctx: StepContext, segment: int, phase: str, i: int) -> random.Random:
        return random.Random(f"{ctx.seed}:failure_repro:log:{segment}:{phase}:{i}")

    def log_position(self, ctx: StepContext, segment: int, i: int) -> int:
        return segment * (ctx.schema_ops + ctx.mutations) + i

    def schema_op(self, ctx, rng, i):
        pattern = i % 4
        if pattern == 0:
            return AddColumn("order_line", Column(f"ol_x_{ctx.suffix(i)}", INTEGER))
        if pattern == 1:
            return AddColumn("orders", Column(f"o_y_{ctx.suffix(i)}", TEXT))
        if pattern == 2:
            return DropColumn("orders", f"o_y_{ctx.suffix(i - 1)}")
        return AddColumn("customer", Column(f"c_z_{ctx.suffix(i)}", DECIMAL, default=0.0))

    def mutation_op(self, ctx, rng, j, schema):
        seg = self.segment(ctx)
        pos = self.log_position(ctx, seg, ctx.schema_ops + j)
        r = self.log_rng(ctx, seg, "data", j)
        m = ctx.multipliers
        pattern = j % 3
        if pattern == 0:
            w, d = r.randint(1, ctx.warehouses), r.randint(1, m["district"])
            return Insert("orders", (
                ("o_w_id", w), ("o_d_id", d), ("o_id", INSERT_ID_BASE + pos),
                ("o_c_id", r.randint(1, m["customer"])), ("o_entry_d", _random_timestamp(r)),
                ("o_carrier_id", None), ("o_ol_cnt", r.randint(5, 15)), ("o_all_local", True),
            ))
        if pattern == 1:
            return UpdateWhere(
                "customer",
                (("c_balance", Arith("c_balance", "+", round(r.uniform(-50, 50), 2))),),
                KeyEq(CUSTOMER_KEY, ctx.customer_key(r)),
            )
        key = (r.randint(1, ctx.warehouses), r.randint(1, m["district"]),
               r.randint(1, m["orders"]), r.randint(1, m["order_line"]))
        return DeleteWhere("order_line", KeyEq(ORDER_LINE_KEY, key))

    def read_op(self, ctx, rng, k, schema):
        if k == 0:
            return self.invariant_check()
        return Aggregate("orders", (AggSpec("count", None, "orders"),))

    @staticmethod
    def invariant_check() -> Aggregate:
        return Aggregate(
            "orders",
            (AggSpec("count", None, "lines"),),
            group_by=("o_w_id", "o_d_id", "o_id", "o_ol_cnt"),
            join=Join("order_line", ORDERS_ORDER_LINE),
            having=Having(AggSpec("count", None, "lines"), "<>", ColRef("o_ol_cnt")),
        )

    def cross_branch_inner(self, entry, ctx):
        return Aggregate(
            "orders",
            (AggSpec("count", None, "lines"),),
            join=Join("order_line", ORDERS_ORDER_LINE),
        )


class DataCleaning(WorkflowTemplate):
    """Impute, drop, clip or repair dirty customer balances and payments."""

    name = "data_cleaning"
    strategies = ("impute", "drop", "clip", "fix_negative")
    outcome_outer = (AggSpec("count", None, "branches"), AggSpec("avg", "invalid", "avg_invalid"))

    def clean_column(self, ctx: StepContext) -> str | None:
        return f"c_clean_{ctx.suffix(0)}" if ctx.schema_ops >= 1 else None

    def schema_op(self, ctx, rng, i):
        if i == 0:
            return AddColumn("customer", Column(self.clean_column(ctx), BOOLEAN, default=False))
        return AddColumn("customer", Column(f"c_clean_aux_{ctx.suffix(i)}", DECIMAL))

    def mutation_op(self, ctx, rng, j, schema):
        strategy = rng.choice(self.strategies)
        if strategy == "impute":
            return UpdateWhere("customer", (("c_balance", Const(0.0)),), IsNull("c_balance"))
        if strategy == "drop":
            return DeleteWhere("customer", IsNull("c_balance"))
        if strategy == "clip":
            lo, hi = YTD_PAYMENT_RANGE
            cap = round(lo + (hi - lo) * rng.choice((0.90, 0.95, 0.99)), 2)
            return UpdateWhere("customer", (("c_ytd_payment", Const(cap)),), Compare("c_ytd_payment", ">", cap))
        sets: tuple = (("c_balance", Const(0.0)),)
        clean = self.clean_column(ctx)
        if clean is not None:
            sets += ((clean, Const(True)),)
        return UpdateWhere("customer", sets, Compare("c_balance", "<", 0.0))

    def read_op(self, ctx, rng, k, schema):
        if k == 0:
            return Aggregate("customer", (AggSpec("count_if", None, "invalid", Compare("c_balance", "<", 0.0)),))
        return Aggregate("customer", (AggSpec("count_if", None, "missing", IsNull("c_balance")),))

    def cross_branch_inner(self, entry, ctx):
        return Aggregate("customer", (
            AggSpec("count_if", None, "invalid", Compare("c_balance", "<", 0.0)),
            AggSpec("spread", "c_ytd_payment", "spread"),
        ))


class MCTS(WorkflowTemplate):
    """Assign orders to warehouses by decrementing stock; score by total cost."""

    name = "mcts"
    outcome_outer = (AggSpec("count", None, "branches"), AggSpec("min", "total_cost", "best_cost"))

    def schema_op(self, ctx, rng, i):
        return AddColumn("stock", Column(f"s_plan_{ctx.suffix(i)}", INTEGER))

    def mutation_op(self, ctx, rng, j, schema):
        return UpdateWhere(
            "stock",
            (("s_quantity", Arith("s_quantity", "-", rng.randint(1, 10))),),
            KeyEq(STOCK_KEY, ctx.stock_key(rng)),
        )

    def read_op(self, ctx, rng, k, schema):
        if k == 0:
            return self.reward()
        return Aggregate("stock", (AggSpec("count_if", None, "stockouts", Compare("s_quantity", "<", STOCKOUT_LEVEL)),))

    @staticmethod
    def reward() -> Aggregate:
        return Aggregate(
            "order_line",
            (AggSpec("sum", "ol_amount", "total_cost"),),
            join=Join("warehouse", (("ol_supply_w_id", "w_id"),)),
        )

    def cross_branch_inner(self, entry, ctx):
        return self.reward()


class Simulation(WorkflowTemplate):
    """Order-fulfilment trial: insert orders, draw down stock, add order lines."""

    name = "simulation"
    outcome_outer = (
        AggSpec("avg", "stockouts", "avg_stockouts"),
        AggSpec("avg", "total_cost", "avg_total_cost"),
        AggSpec("count", None, "branches"),
    )

    def schema_op(self, ctx, rng, i):
        return AddColumn("orders", Column(f"o_sim_{ctx.suffix(i)}", INTEGER))

    def order_id(self, ctx: StepContext, j: int) -> int:
        return INSERT_ID_BASE + ctx.global_step * 1000 + j // 3

    def mutation_op(self, ctx, rng, j, schema):
        m = ctx.multipliers
        # Each trial cycle uses one (warehouse, district, item) draw shared by its three ops.
        cycle = random.Random(f"{ctx.seed}:simulation:{ctx.worker}:{ctx.step}:cycle:{j // 3}")
        w, d = cycle.randint(1, ctx.warehouses), cycle.randint(1, m["district"])
        item = cycle.randint(1, m["stock"])
        qty = cycle.randint(1, 10)
        oid = self.order_id(ctx, j)
        pattern = j % 3
        if pattern == 0:
            return Insert("orders", (
                ("o_w_id", w), ("o_d_id", d), ("o_id", oid), ("o_c_id", cycle.randint(1, m["customer"])),
                ("o_entry_d", _random_timestamp(cycle)), ("o_carrier_id", None), ("o_ol_cnt", 1),
                ("o_all_local", True),
            ))
        if pattern == 1:
            return UpdateWhere(
                "stock",
                (("s_quantity", Arith("s_quantity", "-", qty)), ("s_ytd", Arith("s_ytd", "+", qty)),
                 ("s_order_cnt", Arith("s_order_cnt", "+", 1))),
                KeyEq(STOCK_KEY, (w, item)),
            )
        return Insert("order_line", (
            ("ol_w_id", w), ("ol_d_id", d), ("ol_o_id", oid), ("ol_number", 1), ("ol_i_id", item),
            ("ol_supply_w_id", w), ("ol_delivery_d", None), ("ol_quantity", qty),
            ("ol_amount", round(qty * cycle.uniform(1.0, 100.0), 2)), ("ol_dist_info", "simulated"),
        ))

    def read_op(self, ctx, rng, k, schema):
        if k == 0:
            return self.outcome()
        return Aggregate("orders", (AggSpec("count", None, "orders"),))

    @staticmethod
    def outcome() -> Aggregate:
        return Aggregate(
            "stock",
            (AggSpec("count_if", None, "stockouts", Compare("s_quantity", "<", STOCKOUT_LEVEL)),
             AggSpec("sum", "ol_amount", "total_cost")),
            join=Join("order_line", (("s_w_id", "ol_supply_w_id"), ("s_i_id", "ol_i_id"))),
        )

    def cross_branch_inner(self, entry, ctx):
        return self.outcome()


TEMPLATES: dict[str, WorkflowTemplate] = {
    t.name: t for t in (SoftwareDev(), FailureRepro(), DataCleaning(), MCTS(), Simulation())
}


def get_template(name: str) -> WorkflowTemplate:
    try:
        return TEMPLATES[name]
    except KeyError:
        raise ValueError(f"unknown workflow {name!r}; expected one of {WORKFLOWS}") from None


def instantiate_step_ops(
    template: WorkflowTemplate | str, ctx: StepContext, rng: random.Random | None = None
) -> list[OperationDescriptor]:
    """Schema ops, then mutations, then evaluation reads for one step."""
    if isinstance(template, str):
        template = get_template(template)
    if rng is None:
        rng = step_rng(ctx.seed, template.name, ctx.worker, ctx.step)
    ops: list[OperationDescriptor] = []
    schema = [template.schema_op(ctx, rng, i) for i in range(ctx.schema_ops)]
    for i, kind in enumerate(schema):
        ops.append(OperationDescriptor.build(kind, template.name, ctx.worker, ctx.step, "mutate", i))
    for j in range(ctx.mutations):
        kind = template.mutation_op(ctx, rng, j, schema)
        ops.append(OperationDescriptor.build(kind, template.name, ctx.worker, ctx.step, "mutate",
                                             ctx.schema_ops + j))
    for k in range(ctx.reads):
        kind = template.read_op(ctx, rng, k, schema)
        ops.append(OperationDescriptor.build(kind, template.name, ctx.worker, ctx.step, "evaluate", k))
    return ops


def instantiate_cross_branch_op(
    template: WorkflowTemplate | str,
    frontier: Sequence[FrontierEntry],
    rng: random.Random | None = None,
    *,
    query_index: int = 0,
    base_ctx: StepContext | None = None,
    subset: int | None = None,
) -> OperationDescriptor:
    """Cross-branch aggregate over ``frontier`` (all of it unless ``subset`` is set)."""
    if isinstance(template, str):
        template = get_template(template)
    if not frontier:
        raise SchedulingError("frontier is empty; retry after more commits")
    entries = list(frontier)
    if subset is not None and 0 < subset < len(entries):
        entries = (rng or random.Random(query_index)).sample(entries, subset)
        entries.sort(key=lambda e: frontier.index(e))
    targets = []
    for entry in entries:
        ctx = None
        if entry.worker is not None and base_ctx is not None:
            ctx = StepContext(**{**base_ctx.__dict__, "worker": entry.worker, "step": entry.step,
                                 "branch_id": entry.branch_id})
        targets.append((entry.branch_id, template.cross_branch_inner(entry, ctx)))
    kind = CrossBranchAggregate(tuple(targets))
    return OperationDescriptor.build(kind, template.name, 0, query_index, "cross_branch", 0)
