"""Planner-aligned atomic action slicing of robot demonstrations."""

__version__ = "0.1.0"
