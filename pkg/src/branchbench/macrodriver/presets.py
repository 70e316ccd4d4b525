"""Workflow parameter vectors: the published presets, mini variants, config parsing."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from ..datagen import ConfigError
from ..opmodel.templates import WORKFLOWS

# Raw published values; None marks a "---" cell (no such operation).
PARAMETER_SYMBOLS = ("T", "S", "C", "F_r", "F_i", "D", "M_s", "M_d", "Q_v", "gamma")

PRESET_TABLE: dict[str, dict[str, int | float | None]] = {
    "software_dev": dict(T=5, S=20, C=1, F_r=5, F_i=3, D=3, M_s=1, M_d=1, Q_v=2, gamma=0.1),
    "failure_repro": dict(T=1, S=10, C=None, F_r=10, F_i=None, D=1, M_s=5, M_d=45, Q_v=1, gamma=1),
    "data_cleaning": dict(T=10, S=20, C=2, F_r=10, F_i=3, D=3, M_s=1, M_d=1, Q_v=1, gamma=None),
    "mcts": dict(T=10, S=100, C=None, F_r=10, F_i=10, D=25, M_s=None, M_d=1, Q_v=1, gamma=0.1),
    "simulation": dict(T=1000, S=1, C=1, F_r=1000, F_i=None, D=1, M_s=None, M_d=50, Q_v=1, gamma=1),
}

FULL_WAREHOUSES = 5
MINI_WAREHOUSES = 1
MINI_MAX_WORKERS = 5
MINI_MAX_STEPS = 10
DEFAULT_TIMEOUT_S = 7200.0

# Symbol aliases accepted in config files.
ALIASES = {
    "T": "workers", "S": "steps", "C": "cross_branch_queries", "F_r": "root_fanout",
    "F_i": "inner_fanout", "D": "max_depth", "M_s": "schema_ops", "M_d": "data_ops",
    "Q_v": "reads", "gamma": "prune_prob", "γ": "prune_prob", "W": "warehouses",
}


@dataclass
class WorkflowConfig:
    workflow: str
    workers: int
    steps: int
    cross_branch_queries: int = 0
    root_fanout: int = 1
    inner_fanout: int | None = None
    max_depth: int = 1
    schema_ops: int = 0
    data_ops: int = 0
    reads: int = 0
    prune_prob: float = 0.0
    seed: int = 0
    timeout_s: float = DEFAULT_TIMEOUT_S
    backend: str = "fullcopy"
    warehouses: int = 1
    multipliers: dict[str, int] = field(default_factory=dict)
    faults: dict[str, Any] = field(default_factory=dict)
    retry: dict[str, float] = field(default_factory=dict)
    backend_options: dict[str, Any] = field(default_factory=dict)
    cross_branch_subset: int | None = None
    preset: str | None = None

    def __post_init__(self) -> None:
        if self.workflow not in WORKFLOWS:
            raise ConfigError(f"unknown workflow {self.workflow!r}; expected one of {WORKFLOWS}")
        for name in ("workers", "steps", "root_fanout", "max_depth", "warehouses"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        for name in ("cross_branch_queries", "schema_ops", "data_ops", "reads"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.inner_fanout is not None and self.inner_fanout < 1:
            raise ConfigError("inner_fanout must be at least 1")
        if not 0.0 <= self.prune_prob <= 1.0:
            raise ConfigError("prune_prob must lie in [0, 1]")
        if self.schema_ops == self.data_ops == self.reads == 0:
            raise ConfigError("a step needs at least one schema op, mutation or read")
        if self.timeout_s <= 0:
            raise ConfigError("timeout_s must be positive")

    @property
    def total_steps(self) -> int:
        return self.workers * self.steps

    def fanout(self, depth: int) -> int | None:
        """Child limit for a node at ``depth``; ``None`` means unbounded."""
        return self.root_fanout if depth == 0 else self.inner_fanout

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    def with_overrides(self, **changes: Any) -> "WorkflowConfig":
        return replace(self, **normalize_keys(changes))


def normalize_keys(obj: Mapping[str, Any]) -> dict[str, Any]:
    known = {f.name for f in fields(WorkflowConfig)}
    out = {}
    for key, value in obj.items():
        name = ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        out[name] = value
    return out


def from_table_row(name: str, row: Mapping[str, Any], **extra: Any) -> WorkflowConfig:
    """Apply the "---" normalization to one raw row."""
    def val(sym: str, absent):
        v = row.get(sym)
        return absent if v is None else v

    return WorkflowConfig(
        workflow=name,
        workers=row["T"],
        steps=row["S"],
        cross_branch_queries=val("C", 0),
        root_fanout=row["F_r"],
        inner_fanout=row.get("F_i"),
        max_depth=row["D"],
        schema_ops=val("M_s", 0),
        data_ops=val("M_d", 0),
        reads=val("Q_v", 0),
        prune_prob=float(val("gamma", 0.0)),
        **extra,
    )


def mini_row(row: Mapping[str, Any]) -> dict[str, Any]:
    t = min(row["T"], MINI_MAX_WORKERS)
    s = min(row["S"], MINI_MAX_STEPS)
    return {**row, "T": t, "S": s, "F_r": min(row["F_r"], t * s)}


PRESET_NAMES = tuple(WORKFLOWS) + tuple(f"mini:{w}" for w in WORKFLOWS)


def preset_row(name: str) -> dict[str, Any]:
    base = name.removeprefix("mini:")
    if base not in PRESET_TABLE or (name != base and not name.startswith("mini:")):
        raise ConfigError(f"unknown preset {name!r}; expected one of {', '.join(PRESET_NAMES)}")
    row = PRESET_TABLE[base]
    return mini_row(row) if name.startswith("mini:") else dict(row)


def preset(name: str, **overrides: Any) -> WorkflowConfig:
    base = name.removeprefix("mini:")
    row = preset_row(name)
    warehouses = MINI_WAREHOUSES if name.startswith("mini:") else FULL_WAREHOUSES
    cfg = from_table_row(base, row, warehouses=warehouses, preset=name)
    return cfg.with_overrides(**overrides) if overrides else cfg


def format_cell(value: Any) -> str:
    if value is None:
        return "---"
    if isinstance(value, float):
        return format(value, "g")
    return str(value)


def preset_table() -> list[list[str]]:
    """Header plus one row per preset, with "---" for absent cells."""
    rows = [["preset", *PARAMETER_SYMBOLS, "W"]]
    for name in PRESET_NAMES:
        r = preset_row(name)
        w = MINI_WAREHOUSES if name.startswith("mini:") else FULL_WAREHOUSES
        rows.append([name, *(format_cell(r[s]) for s in PARAMETER_SYMBOLS), str(w)])
    return rows


def render_preset_table() -> str:
    rows = preset_table()
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


# ---------------------------------------------------------------- config files


def _parse_scalar(text: str) -> Any:
    text = text.strip()
    if text in ("---", "none", "None", "null"):
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def parse_config_text(text: str) -> dict[str, Any]:
    """JSON object, or ``key = value`` lines with optional ``[section]`` headers.

    Keys under ``[faults]``/``[retry]``/``[multipliers]``/``[backend_options]``
    (or dotted as ``faults.live_branch_limit``) populate those mappings.
    """
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON config: {exc}") from None
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        return obj
    out: dict[str, Any] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip() or None
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if section:
            key = f"{section}.{key}"
        target = out
        *parents, leaf = key.split(".")
        for p in parents:
            target = target.setdefault(p, {})
            if not isinstance(target, dict):
                raise ConfigError(f"line {lineno}: {key} conflicts with a scalar")
        target[leaf] = _parse_scalar(value)
    return out


def config_from_mapping(obj: Mapping[str, Any], *, base: WorkflowConfig | None = None) -> WorkflowConfig:
    """Build a config from a parsed file; ``preset`` seeds defaults if present."""
    obj = dict(obj)
    name = obj.pop("preset", None)
    if base is None:
        if name is not None:
            base = preset(name)
        elif "workflow" in obj:
            wf = obj["workflow"]
            if wf not in PRESET_TABLE:
                raise ConfigError(f"unknown workflow {wf!r}")
            base = preset(wf)
        else:
            raise ConfigError("config needs a preset or a workflow")
    try:
        return base.with_overrides(**obj)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, *, base: WorkflowConfig | None = None) -> WorkflowConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_mapping(parse_config_text(text), base=base)


def trigger_points(config: WorkflowConfig) -> list[int]:
    """Completed-step counts at which cross-branch queries 1..C become ready."""
    total = config.total_steps
    c = config.cross_branch_queries
    return [math.ceil(k * total / c) for k in range(1, c + 1)]
