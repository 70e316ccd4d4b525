"""Embedded reference stores, one per branching mechanism."""

from ..backend import register_backend
from .base import ROOT_ID, RefBackend
from .deltaoverlay import DeltaOverlayBackend
from .fullcopy import FullCopyBackend
from .interpreter import BranchView, dump_view, interpret
from .pathcopy import PathCopyBackend

register_backend("fullcopy", FullCopyBackend)
register_backend("deltaoverlay", DeltaOverlayBackend)
register_backend("pathcopy", PathCopyBackend)

REFERENCE_BACKENDS = ("fullcopy", "deltaoverlay", "pathcopy")

__all__ = [
    "ROOT_ID", "RefBackend", "DeltaOverlayBackend", "FullCopyBackend", "PathCopyBackend",
    "BranchView", "dump_view", "interpret", "REFERENCE_BACKENDS",
]
