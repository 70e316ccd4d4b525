"""Macrobenchmark driver: presets, the shared branch tree, and the workflow loop."""

from .driver import MacroRun, StartupError, StepResult, final_state_dump, run_workflow
from .presets import (
    PRESET_NAMES,
    PRESET_TABLE,
    WorkflowConfig,
    load_config,
    parse_config_text,
    preset,
    preset_table,
    render_preset_table,
    trigger_points,
)
from .tree import BranchNode, BranchTree, InvariantViolation, NoEligibleParent, TreeExhausted

__all__ = [
    "MacroRun", "StartupError", "StepResult", "final_state_dump", "run_workflow", "PRESET_NAMES", "PRESET_TABLE",
    "WorkflowConfig", "load_config", "parse_config_text", "preset", "preset_table", "render_preset_table",
    "trigger_points", "BranchNode", "BranchTree", "InvariantViolation", "NoEligibleParent", "TreeExhausted",
]
