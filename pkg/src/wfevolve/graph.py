"""Workflow graph data model, structural validation and primitive mutators.

Graphs are immutable values. Every public mutator returns a new graph with
``version + 1`` and refuses to publish anything that fails
:func:`validate_graph`.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import re
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

import networkx as nx

from wfevolve.errors import (
    CycleWithoutLoopBack,
    DuplicateEdge,
    DuplicateNodeId,
    GraphFormatError,
    InvalidEdgeSpec,
    InvalidNodeSpec,
    NodeNotFound,
    ProtectedNode,
    UnknownNode,
    ValidationRejected,
    WouldDisconnect,
)

DEFAULT_LOOP_MAX_ITERATIONS = 3
DEFAULT_BRANCH = "default"

# Context keys the executor always provides; anything else in a prompt
# placeholder must name a node of the graph.
BUILTIN_CONTEXT_KEYS = frozenset(
    {
        "image_ref",
        "case_id",
        "label_vocabulary",
        "iteration",
        "previous_output",
        "feedback",
        "parallel_inputs",
    }
)

PLACEHOLDER_RE = re.compile(r"\{\{\s*([^{}]+?)\s*\}\}")


class NodeKind(str, Enum):
    BASIC = "Basic"
    TOOL = "Tool"


class EdgeKind(str, Enum):
    SEQUENTIAL = "Sequential"
    CONDITIONAL = "ConditionalBranch"
    LOOP_BACK = "LoopBack"
    FAN_OUT = "ParallelFanOut"
    FAN_IN = "ParallelFanIn"


EDGE_KIND_ORDER = {kind: i for i, kind in enumerate(EdgeKind)}


def placeholders(template: str | None) -> list[str]:
    """Placeholder names in ``template`` in order of first appearance."""
    if not template:
        return []
    seen: dict[str, None] = {}
    for m in PLACEHOLDER_RE.finditer(template):
        seen.setdefault(m.group(1), None)
    return list(seen)


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    kind: NodeKind
    node_name: str
    description: str
    system_prompt: str | None = None
    human_prompt: str | None = None
    tool_name: str | None = None
    tool_params: Mapping[str, Any] | None = None

    @classmethod
    def basic(
        cls,
        node_id: str,
        node_name: str,
        description: str,
        system_prompt: str,
        human_prompt: str,
    ) -> NodeSpec:
        return cls(node_id, NodeKind.BASIC, node_name, description, system_prompt, human_prompt)

    @classmethod
    def tool(
        cls,
        node_id: str,
        node_name: str,
        description: str,
        tool_name: str,
        tool_params: Mapping[str, Any] | None = None,
    ) -> NodeSpec:
        return cls(
            node_id,
            NodeKind.TOOL,
            node_name,
            description,
            tool_name=tool_name,
            tool_params=dict(tool_params or {}),
        )

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.node_id, str) or not self.node_id.strip():
            out.append("node_id must be a non-empty string")
        if not _nonempty(self.node_name):
            out.append("node_name must be non-empty")
        if not _nonempty(self.description):
            out.append("description must be non-empty")
        if self.kind is NodeKind.BASIC:
            if not _nonempty(self.system_prompt):
                out.append("Basic node needs a non-empty system_prompt")
            if not _nonempty(self.human_prompt):
                out.append("Basic node needs a non-empty human_prompt")
            if self.tool_name is not None or self.tool_params is not None:
                out.append("Basic node must not carry tool fields")
        elif self.kind is NodeKind.TOOL:
            if not _nonempty(self.tool_name):
                out.append("Tool node needs a non-empty tool_name")
            if self.system_prompt is not None or self.human_prompt is not None:
                out.append("Tool node must not carry prompt fields")
            if self.tool_params is not None and not isinstance(self.tool_params, Mapping):
                out.append("tool_params must be a mapping")
        else:
            out.append(f"unknown node kind {self.kind!r}")
        return out

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "node_id": self.node_id,
            "kind": self.kind.value,
            "node_name": self.node_name,
            "description": self.description,
        }
        if self.kind is NodeKind.BASIC:
            d["system_prompt"] = self.system_prompt
            d["human_prompt"] = self.human_prompt
        else:
            d["tool_name"] = self.tool_name
            d["tool_params"] = dict(self.tool_params or {})
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> NodeSpec:
        _reject_unknown(data, {f.name for f in dataclasses.fields(cls)}, "node")
        try:
            kind = NodeKind(data["kind"])
            return cls(
                node_id=data["node_id"],
                kind=kind,
                node_name=data["node_name"],
                description=data["description"],
                system_prompt=data.get("system_prompt"),
                human_prompt=data.get("human_prompt"),
                tool_name=data.get("tool_name"),
                tool_params=dict(data["tool_params"]) if data.get("tool_params") is not None else (
                    {} if kind is NodeKind.TOOL else None
                ),
            )
        except KeyError as exc:
            raise GraphFormatError(f"node missing field {exc.args[0]!r}") from None
        except (ValueError, TypeError) as exc:
            raise GraphFormatError(f"bad node: {exc}") from None

    def with_prompts(self, system_prompt: str | None = None, human_prompt: str | None = None) -> NodeSpec:
        return dataclasses.replace(
            self,
            system_prompt=self.system_prompt if system_prompt is None else system_prompt,
            human_prompt=self.human_prompt if human_prompt is None else human_prompt,
        )


@dataclass(frozen=True)
class EdgeSpec:
    source: str
    target: str
    kind: EdgeKind = EdgeKind.SEQUENTIAL
    condition: str | None = None
    branch_label: str | None = None
    max_iterations: int | None = None

    @property
    def pair(self) -> tuple[str, str]:
        return (self.source, self.target)

    @property
    def is_forward(self) -> bool:
        return self.kind is not EdgeKind.LOOP_BACK

    def problems(self) -> list[tuple[str, str]]:
        """(rule_id, message) pairs for attribute-level defects."""
        out = []
        if self.kind is EdgeKind.CONDITIONAL:
            if not _nonempty(self.condition) or not _nonempty(self.branch_label):
                out.append(("INVALID_EDGE_SPEC", "ConditionalBranch needs condition and branch_label"))
        elif self.branch_label is not None:
            out.append(("INVALID_EDGE_SPEC", f"{self.kind.value} edge must not carry branch_label"))
        if self.kind is EdgeKind.LOOP_BACK:
            if not _nonempty(self.condition):
                out.append(("LOOP_WITHOUT_EXIT", "LoopBack edge needs a non-empty exit condition"))
            if not isinstance(self.max_iterations, int) or isinstance(self.max_iterations, bool) or self.max_iterations < 1:
                out.append(("INVALID_MAX_ITERATIONS", "LoopBack edge needs max_iterations >= 1"))
        else:
            if self.max_iterations is not None:
                out.append(("INVALID_EDGE_SPEC", f"{self.kind.value} edge must not carry max_iterations"))
            if self.kind is not EdgeKind.CONDITIONAL and self.condition is not None:
                out.append(("INVALID_EDGE_SPEC", f"{self.kind.value} edge must not carry a condition"))
        return out

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"source": self.source, "target": self.target, "kind": self.kind.value}
        if self.condition is not None:
            d["condition"] = self.condition
        if self.branch_label is not None:
            d["branch_label"] = self.branch_label
        if self.max_iterations is not None:
            d["max_iterations"] = self.max_iterations
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EdgeSpec:
        _reject_unknown(data, {f.name for f in dataclasses.fields(cls)}, "edge")
        try:
            return cls(
                source=data["source"],
                target=data["target"],
                kind=EdgeKind(data.get("kind", EdgeKind.SEQUENTIAL.value)),
                condition=data.get("condition"),
                branch_label=data.get("branch_label"),
                max_iterations=data.get("max_iterations"),
            )
        except KeyError as exc:
            raise GraphFormatError(f"edge missing field {exc.args[0]!r}") from None
        except ValueError as exc:
            raise GraphFormatError(f"bad edge: {exc}") from None


@dataclass(frozen=True)
class WorkflowGraph:
    graph_id: str
    version: int
    nodes: tuple[NodeSpec, ...]
    edges: tuple[EdgeSpec, ...]
    entry_node: str
    output_node: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    @classmethod
    def single_node(cls, node: NodeSpec, graph_id: str = "workflow") -> WorkflowGraph:
        return cls(graph_id, 0, (node,), (), node.node_id, node.node_id)

    @property
    def node_ids(self) -> list[str]:
        return [n.node_id for n in self.nodes]

    def has_node(self, node_id: str) -> bool:
        return any(n.node_id == node_id for n in self.nodes)

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise NodeNotFound(node_id)

    def order(self, node_id: str) -> int:
        """Insertion index of a node; the canonical tie-break everywhere."""
        for i, n in enumerate(self.nodes):
            if n.node_id == node_id:
                return i
        raise NodeNotFound(node_id)

    def out_edges(self, node_id: str) -> list[EdgeSpec]:
        return [e for e in self.edges if e.source == node_id]

    def in_edges(self, node_id: str) -> list[EdgeSpec]:
        return [e for e in self.edges if e.target == node_id]

    def edge(self, source: str, target: str) -> EdgeSpec | None:
        for e in self.edges:
            if e.source == source and e.target == target:
                return e
        return None

    def loop_edge_from(self, node_id: str) -> EdgeSpec | None:
        for e in self.edges:
            if e.source == node_id and e.kind is EdgeKind.LOOP_BACK:
                return e
        return None

    def _evolve(self, **changes: Any) -> WorkflowGraph:
        changes.setdefault("version", self.version + 1)
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "graph_id": self.graph_id,
            "version": self.version,
            "entry_node": self.entry_node,
            "output_node": self.output_node,
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [e.to_dict() for e in self.edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> WorkflowGraph:
        if not isinstance(data, Mapping):
            raise GraphFormatError("workflow document must be a JSON object")
        _reject_unknown(data, {f.name for f in dataclasses.fields(cls)}, "workflow")
        try:
            version = data["version"]
            if not isinstance(version, int) or isinstance(version, bool) or version < 0:
                raise GraphFormatError("version must be a non-negative integer")
            return cls(
                graph_id=str(data["graph_id"]),
                version=version,
                nodes=tuple(NodeSpec.from_dict(n) for n in data["nodes"]),
                edges=tuple(EdgeSpec.from_dict(e) for e in data["edges"]),
                entry_node=data["entry_node"],
                output_node=data["output_node"],
            )
        except KeyError as exc:
            raise GraphFormatError(f"workflow missing field {exc.args[0]!r}") from None

    @classmethod
    def from_json(cls, text: str) -> WorkflowGraph:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"invalid JSON: {exc}") from None
        return cls.from_dict(data)


def _nonempty(value: Any) -> bool:
    return isinstance(value, str) and bool(value.strip())


def _reject_unknown(data: Mapping[str, Any], allowed: set[str], what: str) -> None:
    if not isinstance(data, Mapping):
        raise GraphFormatError(f"{what} must be a JSON object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise GraphFormatError(f"unknown {what} field(s): {', '.join(unknown)}")


def load_graph(path) -> WorkflowGraph:
    with open(path, encoding="utf-8") as fh:
        return WorkflowGraph.from_json(fh.read())


def save_graph(graph: WorkflowGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(graph.to_json())


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    rule_id: str
    message: str
    offending: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"rule_id": self.rule_id, "message": self.message, "offending": list(self.offending)}


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def rule_ids(self) -> list[str]:
        return [v.rule_id for v in self.violations]

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "violations": [v.to_dict() for v in self.violations]}


def _edge_name(e: EdgeSpec) -> str:
    return f"{e.source}->{e.target}"


def validate_graph(graph: WorkflowGraph) -> ValidationReport:
    """Run every structural check and collect all violations."""
    out: list[Violation] = []

    def flag(rule: str, msg: str, *offending: str) -> None:
        out.append(Violation(rule, msg, tuple(offending)))

    ids: list[str] = []
    seen: set[str] = set()
    for n in graph.nodes:
        if n.node_id in seen:
            flag("DUPLICATE_NODE_ID", f"node id {n.node_id!r} used more than once", n.node_id)
        seen.add(n.node_id)
        ids.append(n.node_id)
        for p in n.problems():
            flag("INVALID_NODE_SPEC", f"{n.node_id}: {p}", n.node_id)

    for name, ref in (("entry_node", graph.entry_node), ("output_node", graph.output_node)):
        if ref not in seen:
            flag("UNKNOWN_NODE", f"{name} {ref!r} is not a node", str(ref))

    edges: list[EdgeSpec] = []
    pairs: dict[tuple[str, str], EdgeSpec] = {}
    for e in graph.edges:
        bad_end = [x for x in (e.source, e.target) if x not in seen]
        if bad_end:
            flag("UNKNOWN_NODE", f"edge {_edge_name(e)} references unknown node(s)", *bad_end)
            continue
        for rule, msg in e.problems():
            flag(rule, f"{_edge_name(e)}: {msg}", _edge_name(e))
        if e.pair in pairs:
            flag(
                "DUPLICATE_EDGE",
                f"{e.source} and {e.target} are already connected ({pairs[e.pair].kind.value})",
                _edge_name(e),
            )
            continue
        pairs[e.pair] = e
        edges.append(e)

    if any(v.rule_id == "UNKNOWN_NODE" for v in out) and graph.entry_node not in seen:
        return ValidationReport(tuple(out))

    forward = [e for e in edges if e.is_forward]
    loops = [e for e in edges if not e.is_forward]

    _check_outgoing_shape(graph, ids, forward, loops, flag)

    for e in forward:
        if e.target == graph.entry_node:
            flag("ENTRY_HAS_INCOMING", f"entry node has incoming {e.kind.value} edge", _edge_name(e))

    succ_all = _adjacency(ids, edges)
    reached = _bfs(graph.entry_node, succ_all)
    for nid in ids:
        if nid not in reached:
            flag("UNREACHABLE_NODE", f"{nid} is not reachable from the entry node", nid)

    pred_fwd = _adjacency(ids, forward, reverse=True)
    if graph.output_node in seen:
        reaches_out = _bfs(graph.output_node, pred_fwd)
        for nid in ids:
            if nid not in reaches_out:
                flag("OUTPUT_UNREACHABLE", f"output node is not reachable from {nid}", nid)

    fwd_graph = nx.DiGraph()
    fwd_graph.add_nodes_from(ids)
    fwd_graph.add_edges_from(e.pair for e in forward)
    acyclic = nx.is_directed_acyclic_graph(fwd_graph)
    if not acyclic:
        for comp in nx.strongly_connected_components(fwd_graph):
            if len(comp) > 1 or any(fwd_graph.has_edge(n, n) for n in comp):
                members = sorted(comp, key=graph.order)
                flag(
                    "CYCLE_WITHOUT_EXIT",
                    "cycle through " + ", ".join(members) + " has no LoopBack edge",
                    *members,
                )
    else:
        succ_fwd = _adjacency(ids, forward)
        for e in loops:
            if e.source != e.target and e.source not in _bfs(e.target, succ_fwd):
                flag(
                    "LOOPBACK_NOT_CYCLE",
                    f"LoopBack {_edge_name(e)} does not close a loop: {e.target} never reaches {e.source}",
                    _edge_name(e),
                )
        kinds = {e.pair: e.kind for e in edges}
        full = nx.DiGraph()
        full.add_nodes_from(ids)
        full.add_edges_from(kinds)
        for cycle in nx.simple_cycles(full):
            arcs = list(zip(cycle, cycle[1:] + cycle[:1]))
            n_loop = sum(1 for a in arcs if kinds[a] is EdgeKind.LOOP_BACK)
            if n_loop > 1:
                flag(
                    "MULTIPLE_LOOPBACKS_IN_CYCLE",
                    f"cycle {' -> '.join(cycle)} contains {n_loop} LoopBack edges",
                    *cycle,
                )

    _check_parallel_scopes(graph, ids, forward, loops, flag)
    _check_placeholders(graph, seen, flag)
    return ValidationReport(tuple(out))


def _adjacency(ids: Iterable[str], edges: Iterable[EdgeSpec], reverse: bool = False) -> dict[str, list[str]]:
    adj: dict[str, list[str]] = {nid: [] for nid in ids}
    for e in edges:
        a, b = (e.target, e.source) if reverse else (e.source, e.target)
        adj.setdefault(a, []).append(b)
    return adj


def _bfs(start: str, adj: Mapping[str, list[str]]) -> set[str]:
    seen = {start}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for nxt in adj.get(cur, ()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def _check_outgoing_shape(graph, ids, forward, loops, flag) -> None:
    by_source: dict[str, list[EdgeSpec]] = {nid: [] for nid in ids}
    for e in forward:
        by_source[e.source].append(e)
    loop_count: dict[str, int] = {}
    for e in loops:
        loop_count[e.source] = loop_count.get(e.source, 0) + 1
    for nid in ids:
        if loop_count.get(nid, 0) > 1:
            flag("MULTIPLE_LOOP_EXITS", f"{nid} has more than one outgoing LoopBack edge", nid)
        outs = by_source[nid]
        if not outs:
            continue
        kinds = {e.kind for e in outs}
        if len(kinds) > 1:
            flag(
                "MIXED_OUTGOING_EDGES",
                f"{nid} mixes outgoing edge kinds: " + ", ".join(sorted(k.value for k in kinds)),
                nid,
            )
            continue
        (kind,) = kinds
        if kind in (EdgeKind.SEQUENTIAL, EdgeKind.FAN_IN) and len(outs) > 1:
            flag("MIXED_OUTGOING_EDGES", f"{nid} has {len(outs)} outgoing {kind.value} edges", nid)
        if kind is EdgeKind.CONDITIONAL:
            labels = [e.branch_label for e in outs]
            if len(outs) < 2 or DEFAULT_BRANCH not in labels:
                flag(
                    "CONDITIONAL_NEEDS_DEFAULT",
                    f"conditional at {nid} needs >=2 branches including {DEFAULT_BRANCH!r}",
                    nid,
                )
            if len(set(labels)) != len(labels):
                flag("DUPLICATE_BRANCH_LABEL", f"conditional at {nid} repeats a branch label", nid)


def _check_parallel_scopes(graph, ids, forward, loops, flag) -> None:
    """Fan-out/fan-in must nest like brackets; each block closes on one fusion node."""
    if graph.entry_node not in ids:
        return
    by_source: dict[str, list[EdgeSpec]] = {nid: [] for nid in ids}
    for e in forward:
        by_source[e.source].append(e)
    scope: dict[str, tuple[str, ...]] = {graph.entry_node: ()}
    fusions: dict[str, set[str]] = {}
    mismatched: set[str] = set()
    unmatched_in: set[str] = set()
    queue = deque([graph.entry_node])
    while queue:
        u = queue.popleft()
        for e in by_source[u]:
            if e.kind is EdgeKind.FAN_OUT:
                new = scope[u] + (u,)
            elif e.kind is EdgeKind.FAN_IN:
                if not scope[u]:
                    unmatched_in.add(_edge_name(e))
                    new = ()
                else:
                    fusions.setdefault(scope[u][-1], set()).add(e.target)
                    new = scope[u][:-1]
            else:
                new = scope[u]
            if e.target not in scope:
                scope[e.target] = new
                queue.append(e.target)
            elif scope[e.target] != new and e.target not in mismatched:
                mismatched.add(e.target)
                flag(
                    "PARALLEL_SCOPE_MISMATCH",
                    f"{e.target} is reached both inside and outside a parallel block",
                    e.target,
                )
    for name in sorted(unmatched_in):
        flag("PARALLEL_UNMATCHED", f"fan-in edge {name} closes no open parallel block", name)
    for nid in ids:
        if nid not in scope or not any(e.kind is EdgeKind.FAN_OUT for e in by_source[nid]):
            continue
        closing = fusions.get(nid, set())
        if not closing:
            flag("PARALLEL_UNMATCHED", f"parallel block opened at {nid} never fans in", nid)
        elif len(closing) > 1:
            flag(
                "PARALLEL_MULTIPLE_FUSION",
                f"parallel block opened at {nid} fans in to several nodes",
                nid,
                *sorted(closing, key=graph.order),
            )
    if graph.output_node in scope and scope[graph.output_node]:
        flag("PARALLEL_UNMATCHED", "output node lies inside an open parallel block", graph.output_node)
    for e in loops:
        if e.source in scope and e.target in scope and scope[e.source] != scope[e.target]:
            flag(
                "PARALLEL_SCOPE_MISMATCH",
                f"LoopBack {_edge_name(e)} crosses a parallel block boundary",
                _edge_name(e),
            )


def _check_placeholders(graph, node_ids: set[str], flag) -> None:
    for n in graph.nodes:
        if n.kind is not NodeKind.BASIC:
            continue
        for text in (n.system_prompt, n.human_prompt):
            for name in placeholders(text):
                if name not in BUILTIN_CONTEXT_KEYS and name not in node_ids:
                    flag(
                        "UNKNOWN_PLACEHOLDER",
                        f"{n.node_id} references {{{{{name}}}}}, which is neither a node nor a context key",
                        n.node_id,
                    )


# ---------------------------------------------------------------------------
# Mutators
# ---------------------------------------------------------------------------


def require_valid(graph: WorkflowGraph) -> WorkflowGraph:
    report = validate_graph(graph)
    if not report.ok:
        raise ValidationRejected(report)
    return graph


def add_node(
    graph: WorkflowGraph,
    spec: NodeSpec,
    *,
    after: str | None = None,
    before: str | None = None,
) -> WorkflowGraph:
    """Append a node, optionally wiring it into the graph.

    ``after=X`` moves X's forward out-edges onto the new node and links
    ``X -> new``; ``before=Y`` redirects Y's forward in-edges to the new node
    and links ``new -> Y``. Without a position the node is appended bare,
    which only validates for graphs that tolerate an isolated node (none do),
    so callers building structure should go through :mod:`wfevolve.ops`.
    """
    problems = spec.problems()
    if problems:
        raise InvalidNodeSpec(f"{spec.node_id}: " + "; ".join(problems))
    if graph.has_node(spec.node_id):
        raise DuplicateNodeId(spec.node_id)
    if after is not None and before is not None:
        raise ValueError("give at most one of after/before")
    new = graph._evolve(nodes=graph.nodes + (spec,))
    if after is not None:
        new = _insert_after(new, after, spec.node_id)
    elif before is not None:
        new = _insert_before(new, before, spec.node_id)
    return require_valid(new)


def _insert_after(graph: WorkflowGraph, anchor: str, node_id: str) -> WorkflowGraph:
    if not graph.has_node(anchor):
        raise NodeNotFound(anchor)
    edges = [
        dataclasses.replace(e, source=node_id) if e.source == anchor and e.is_forward else e
        for e in graph.edges
    ]
    edges.append(EdgeSpec(anchor, node_id))
    output = node_id if graph.output_node == anchor else graph.output_node
    return dataclasses.replace(graph, edges=tuple(edges), output_node=output)


def _insert_before(graph: WorkflowGraph, anchor: str, node_id: str) -> WorkflowGraph:
    if not graph.has_node(anchor):
        raise NodeNotFound(anchor)
    edges = [
        dataclasses.replace(e, target=node_id) if e.target == anchor and e.is_forward else e
        for e in graph.edges
    ]
    edges.append(EdgeSpec(node_id, anchor))
    entry = node_id if graph.entry_node == anchor else graph.entry_node
    return dataclasses.replace(graph, edges=tuple(edges), entry_node=entry)


def remove_node(graph: WorkflowGraph, node_id: str) -> WorkflowGraph:
    if not graph.has_node(node_id):
        raise NodeNotFound(node_id)
    if node_id in (graph.entry_node, graph.output_node):
        raise ProtectedNode(node_id)
    outs = [e for e in graph.out_edges(node_id) if e.is_forward]
    successor = outs[0].target if len(outs) == 1 and outs[0].kind is EdgeKind.SEQUENTIAL else None
    kept = [e for e in graph.edges if node_id not in e.pair]
    existing = {e.pair for e in kept}
    if successor is not None:
        for e in graph.in_edges(node_id):
            if e.source == node_id:
                continue
            bridged = dataclasses.replace(e, target=successor)
            if bridged.pair not in existing:
                kept.append(bridged)
                existing.add(bridged.pair)
    new = graph._evolve(
        nodes=tuple(n for n in graph.nodes if n.node_id != node_id),
        edges=tuple(kept),
    )
    report = validate_graph(new)
    if not report.ok:
        if any(r in ("UNREACHABLE_NODE", "OUTPUT_UNREACHABLE") for r in report.rule_ids):
            raise WouldDisconnect(report, f"removing {node_id} would disconnect the workflow")
        raise ValidationRejected(report)
    return new


def add_edge(graph: WorkflowGraph, spec: EdgeSpec) -> WorkflowGraph:
    for end in (spec.source, spec.target):
        if not graph.has_node(end):
            raise UnknownNode(end)
    if graph.edge(spec.source, spec.target) is not None:
        raise DuplicateEdge(f"{spec.source} -> {spec.target} already connected")
    problems = spec.problems()
    if problems:
        raise InvalidEdgeSpec("; ".join(m for _, m in problems))
    if spec.kind is not EdgeKind.LOOP_BACK and creates_cycle(graph, spec.source, spec.target):
        raise CycleWithoutLoopBack(f"{spec.source} -> {spec.target} closes a cycle but is {spec.kind.value}")
    return require_valid(graph._evolve(edges=graph.edges + (spec,)))


def remove_edge(graph: WorkflowGraph, source: str, target: str) -> WorkflowGraph:
    if graph.edge(source, target) is None:
        raise UnknownNode(f"no edge {source} -> {target}")
    return require_valid(
        graph._evolve(edges=tuple(e for e in graph.edges if e.pair != (source, target)))
    )


def creates_cycle(graph: WorkflowGraph, source: str, target: str) -> bool:
    """Would a forward edge source->target close a cycle of forward edges?"""
    if source == target:
        return True
    adj = _adjacency(graph.node_ids, [e for e in graph.edges if e.is_forward])
    return source in _bfs(target, adj)


def forward_reaches(graph: WorkflowGraph, start: str, goal: str) -> bool:
    adj = _adjacency(graph.node_ids, [e for e in graph.edges if e.is_forward])
    return goal in _bfs(start, adj)


def graph_stats(graph: WorkflowGraph) -> dict[str, int]:
    return {
        "node_count": len(graph.nodes),
        "branch_count": len({e.source for e in graph.edges if e.kind is EdgeKind.CONDITIONAL}),
        "loop_count": sum(1 for e in graph.edges if e.kind is EdgeKind.LOOP_BACK),
        "parallel_block_count": len({e.source for e in graph.edges if e.kind is EdgeKind.FAN_OUT}),
    }


def node_scopes(graph: WorkflowGraph) -> dict[str, tuple[str, ...]]:
    """Enclosing parallel blocks (fan-out sources, outermost first) per node."""
    scope: dict[str, tuple[str, ...]] = {graph.entry_node: ()}
    queue = deque([graph.entry_node])
    while queue:
        u = queue.popleft()
        for e in graph.out_edges(u):
            if not e.is_forward or e.target in scope:
                continue
            if e.kind is EdgeKind.FAN_OUT:
                scope[e.target] = scope[u] + (u,)
            elif e.kind is EdgeKind.FAN_IN:
                scope[e.target] = scope[u][:-1]
            else:
                scope[e.target] = scope[u]
            queue.append(e.target)
    return scope


def execution_order(graph: WorkflowGraph) -> list[str]:
    """Topological order of forward edges, ties broken by insertion order."""
    indeg = {nid: 0 for nid in graph.node_ids}
    for e in graph.edges:
        if e.is_forward:
            indeg[e.target] += 1
    heap = [(graph.order(n), n) for n, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, n = heapq.heappop(heap)
        out.append(n)
        for e in graph.out_edges(n):
            if e.is_forward:
                indeg[e.target] -= 1
                if indeg[e.target] == 0:
                    heapq.heappush(heap, (graph.order(e.target), e.target))
    return out
