"""Operation descriptors, workflow templates and SQL rendering."""

from .descriptors import *  # noqa: F401,F403
from .descriptors import OperationDescriptor, Provenance, category_of, dumps, loads, make_op_id, unwrap
from .evaluate import OpResult, group_aggregate, merge_cross_branch
from .render import render_sql
from .templates import (
    TEMPLATES,
    WORKFLOWS,
    FrontierEntry,
    StepContext,
    WorkflowTemplate,
    get_template,
    instantiate_cross_branch_op,
    instantiate_step_ops,
    step_rng,
)

__all__ = [
    "OperationDescriptor", "Provenance", "category_of", "dumps", "loads", "make_op_id", "unwrap",
    "OpResult", "group_aggregate", "merge_cross_branch", "render_sql", "TEMPLATES", "WORKFLOWS",
    "FrontierEntry", "StepContext", "WorkflowTemplate", "get_template", "instantiate_cross_branch_op",
    "instantiate_step_ops", "step_rng",
]
