"""Self-evolving LLM agent workflows for image-based diagnosis."""

from wfevolve.graph import EdgeKind, EdgeSpec, NodeKind, NodeSpec, WorkflowGraph, load_graph, save_graph, validate_graph
from wfevolve.ops import OpKind, WorkflowOperation, apply_operation, parse_operation

__version__ = "0.1.0"

__all__ = [
    "EdgeKind",
    "EdgeSpec",
    "NodeKind",
    "NodeSpec",
    "OpKind",
    "WorkflowGraph",
    "WorkflowOperation",
    "apply_operation",
    "load_graph",
    "parse_operation",
    "save_graph",
    "validate_graph",
]
