"""Workload generator and measurement harness for branchable databases."""

__version__ = "0.1.0"
