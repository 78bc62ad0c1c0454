"""Mermaid flowchart export and the prose view used in analysis prompts."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping

from wfevolve.graph import EDGE_KIND_ORDER, EdgeKind, EdgeSpec, NodeKind, WorkflowGraph, execution_order, node_scopes

_UNSAFE = re.compile(r"[^A-Za-z0-9_]")
# words the flowchart lexer treats as keywords when used as bare ids
_RESERVED = {"end", "graph", "flowchart", "subgraph", "style", "class", "classdef", "click", "linkstyle", "direction"}
_ENTITIES = {'"': "#quot;", "|": "#124;", "[": "#91;", "]": "#93;", "{": "#123;", "}": "#125;", "(": "#40;", ")": "#41;"}


@dataclass(frozen=True)
class MermaidDocument:
    code: str
    node_id_map: Mapping[str, str]


def sanitize_id(node_id: str) -> str:
    out = _UNSAFE.sub("_", node_id)
    if out.lower() in _RESERVED:
        out += "_"
    return out


def _one_line(text: str) -> str:
    return " ".join(text.split())


def _escape(text: str, chars: str) -> str:
    return "".join(_ENTITIES[c] if c in chars else c for c in _one_line(text))


def _id_map(graph: WorkflowGraph) -> dict[str, str]:
    taken: set[str] = set()
    out = {}
    for nid in graph.node_ids:
        base = sanitize_id(nid)
        cand, n = base, 2
        while cand in taken:
            cand = f"{base}_{n}"
            n += 1
        taken.add(cand)
        out[nid] = cand
    return out


def edge_line(e: EdgeSpec, ids: Mapping[str, str]) -> str:
    a, b = ids[e.source], ids[e.target]
    if e.kind is EdgeKind.SEQUENTIAL:
        return f"{a} --> {b}"
    if e.kind is EdgeKind.CONDITIONAL:
        return f"{a} -->|{_escape(f'{e.branch_label}: {e.condition}', _ENTITIES)}| {b}"
    if e.kind is EdgeKind.LOOP_BACK:
        return f"{a} -.->|{_escape(f'exit: {e.condition}, max {e.max_iterations}', _ENTITIES)}| {b}"
    return f"{a} -->|parallel| {b}"


def to_mermaid(graph: WorkflowGraph) -> MermaidDocument:
    ids = _id_map(graph)
    lines = ["flowchart TD"]
    for n in graph.nodes:
        lines.append(f"%% {ids[n.node_id]}: {_one_line(n.description)}")
        name = _escape(n.node_name, '"')
        shape = f'[["{name}"]]' if n.kind is NodeKind.TOOL else f'["{name}"]'
        lines.append(ids[n.node_id] + shape)
    edges = sorted(graph.edges, key=lambda e: (graph.order(e.source), graph.order(e.target), EDGE_KIND_ORDER[e.kind]))
    lines.extend(edge_line(e, ids) for e in edges)
    return MermaidDocument("\n".join(lines) + "\n", ids)


def structure_to_prose(graph: WorkflowGraph) -> str:
    """Mermaid code followed by an execution-ordered node listing.

    Nodes inside a parallel block are indented under the node that fans out
    to them; loop, branch and fan-out behaviour is annotated per node.
    """
    scopes = node_scopes(graph)
    lines = ["Workflow diagram (Mermaid):", "```mermaid", to_mermaid(graph).code.rstrip("\n"), "```", "", "Execution order:"]
    for i, nid in enumerate(execution_order(graph), 1):
        n = graph.node(nid)
        pad = "  " * len(scopes.get(nid, ()))
        role = f"tool {n.tool_name}" if n.kind is NodeKind.TOOL else "LLM"
        tags = [t for t, cond in (("entry", nid == graph.entry_node), ("output", nid == graph.output_node)) if cond]
        suffix = f" [{', '.join(tags)}]" if tags else ""
        lines.append(f"{pad}{i}. {nid} ({n.node_name}, {role}){suffix}: {_one_line(n.description)}")
        for note in _annotations(graph, nid):
            lines.append(f"{pad}   - {note}")
    return "\n".join(lines) + "\n"


def _annotations(graph: WorkflowGraph, nid: str) -> list[str]:
    outs = sorted(graph.out_edges(nid), key=lambda e: graph.order(e.target))
    notes = []
    cond = [e for e in outs if e.kind is EdgeKind.CONDITIONAL]
    if cond:
        arms = ", ".join(f"{e.branch_label} -> {e.target}" for e in cond)
        notes.append(f"branch on \"{_one_line(cond[0].condition)}\": {arms}")
    fan = [e.target for e in outs if e.kind is EdgeKind.FAN_OUT]
    if fan:
        notes.append(f"parallel arms: {', '.join(fan)}")
    fan_in = [e.target for e in outs if e.kind is EdgeKind.FAN_IN]
    if fan_in:
        notes.append(f"arm ends, fuses into {fan_in[0]}")
    for e in outs:
        if e.kind is EdgeKind.LOOP_BACK:
            notes.append(f"loop ≤{e.max_iterations}: back to {e.target} until \"{_one_line(e.condition)}\"")
    return notes
