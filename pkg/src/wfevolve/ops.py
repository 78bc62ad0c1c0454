"""Search-space operations as validated, atomic graph mutations.

Every function here is pure: it returns a new graph or raises, and the
graph it returns always passes :func:`wfevolve.graph.validate_graph`.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence

from wfevolve import graph as g
from wfevolve.errors import (
    DuplicateNodeId,
    IncompletePayload,
    InvalidNodeSpec,
    InvalidTemplate,
    NeedDefaultBranch,
    NodeNotFound,
    ProtectedNode,
    UnknownNode,
    UnsupportedTemplate,
    ValidationRejected,
    WorkflowError,
)
from wfevolve.graph import (
    DEFAULT_BRANCH,
    DEFAULT_LOOP_MAX_ITERATIONS,
    EdgeKind,
    EdgeSpec,
    NodeKind,
    NodeSpec,
    ValidationReport,
    Violation,
    WorkflowGraph,
)

SCHEMA_VERSION = 1


class OpKind(str, Enum):
    ADD_NODE = "AddNode"
    REMOVE_NODE = "RemoveNode"
    MODIFY_PROMPTS = "ModifyPrompts"
    ADD_CONDITIONAL = "AddConditional"
    ADD_LOOP = "AddLoop"
    ADD_PARALLEL = "AddParallel"
    EXPAND_FRAMEWORK = "ExpandFramework"


class Origin(str, Enum):
    SEED = "Seed"
    SUGGESTION = "Suggestion"
    MANUAL = "Manual"


class TemplateId(str, Enum):
    CHAIN_OF_THOUGHT = "ChainOfThought"
    REFLEXION = "Reflexion"
    ROUND_TABLE = "RoundTable"
    CMD = "CMD"


STRUCTURAL_KINDS = frozenset(
    {
        OpKind.ADD_NODE,
        OpKind.REMOVE_NODE,
        OpKind.ADD_CONDITIONAL,
        OpKind.ADD_LOOP,
        OpKind.ADD_PARALLEL,
        OpKind.EXPAND_FRAMEWORK,
    }
)

# Required payload keys per operation; the published wire schema mirrors this.
REQUIRED_PAYLOAD: dict[OpKind, tuple[str, ...]] = {
    OpKind.ADD_NODE: ("node_id", "kind", "node_name", "description"),
    OpKind.REMOVE_NODE: ("node_id",),
    OpKind.MODIFY_PROMPTS: ("node_id",),
    OpKind.ADD_CONDITIONAL: ("source", "condition", "branches"),
    OpKind.ADD_LOOP: ("body_entry", "body_exit", "exit_condition"),
    OpKind.ADD_PARALLEL: ("source", "arms", "fusion"),
    OpKind.EXPAND_FRAMEWORK: ("anchor", "template_id"),
}

_NODE_KIND_FIELDS = {
    NodeKind.BASIC: ("system_prompt", "human_prompt"),
    NodeKind.TOOL: ("tool_name",),
}


@dataclass(frozen=True)
class WorkflowOperation:
    op_kind: OpKind
    payload: Mapping[str, Any]
    origin: Origin = Origin.MANUAL

    def to_dict(self) -> dict[str, Any]:
        return {"op_kind": self.op_kind.value, "payload": dict(self.payload), "origin": self.origin.value}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> WorkflowOperation:
        return parse_operation(data)

    @property
    def is_structural(self) -> bool:
        return self.op_kind in STRUCTURAL_KINDS


@dataclass(frozen=True)
class FrameworkTemplate:
    template_id: TemplateId
    parameters: Mapping[str, Any] = field(default_factory=dict)

    @property
    def expert_roles(self) -> list[str]:
        return list(self.parameters.get("expert_roles", []))

    @property
    def rounds(self) -> int:
        return self.parameters.get("rounds", 1)

    @property
    def max_reflections(self) -> int:
        return self.parameters.get("max_reflections", DEFAULT_LOOP_MAX_ITERATIONS)

    def check(self) -> None:
        if self.template_id in (TemplateId.ROUND_TABLE, TemplateId.CMD):
            roles = self.expert_roles
            if len(roles) < 2 or not all(isinstance(r, str) and r.strip() for r in roles):
                raise InvalidTemplate(f"{self.template_id.value} needs >=2 non-empty expert_roles")
            if len({_slug(r) for r in roles}) != len(roles):
                raise InvalidTemplate("expert_roles must be distinct")
            if not _pos_int(self.rounds):
                raise InvalidTemplate("rounds must be a positive integer")
        elif self.template_id is TemplateId.REFLEXION:
            if not _pos_int(self.max_reflections):
                raise InvalidTemplate("max_reflections must be a positive integer")


def _pos_int(x: Any) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x >= 1


def parse_operation(data: Mapping[str, Any]) -> WorkflowOperation:
    """Parse and schema-check the ``{op_kind, payload, origin}`` envelope."""
    if not isinstance(data, Mapping):
        raise IncompletePayload("operation envelope must be an object")
    unknown = set(data) - {"op_kind", "payload", "origin"}
    if unknown:
        raise IncompletePayload(f"unknown envelope field(s): {', '.join(sorted(unknown))}")
    try:
        kind = OpKind(data.get("op_kind"))
    except ValueError:
        raise IncompletePayload(f"unknown op_kind {data.get('op_kind')!r}") from None
    try:
        origin = Origin(data.get("origin", Origin.MANUAL.value))
    except ValueError:
        raise IncompletePayload(f"unknown origin {data.get('origin')!r}") from None
    payload = data.get("payload")
    if not isinstance(payload, Mapping):
        raise IncompletePayload("payload must be an object")
    op = WorkflowOperation(kind, dict(payload), origin)
    check_payload(op)
    return op


def check_payload(op: WorkflowOperation) -> None:
    p = op.payload
    missing = [k for k in REQUIRED_PAYLOAD[op.op_kind] if _blank(p.get(k))]
    if missing:
        raise IncompletePayload(f"{op.op_kind.value} payload missing: {', '.join(missing)}")
    kind = op.op_kind
    if kind is OpKind.ADD_NODE:
        _check_node_payload(p, "payload")
        if _blank(p.get("after")) == _blank(p.get("before")):
            raise IncompletePayload("AddNode needs exactly one of 'after' or 'before'")
    elif kind is OpKind.MODIFY_PROMPTS:
        if _blank(p.get("system_prompt")) and _blank(p.get("human_prompt")):
            raise IncompletePayload("ModifyPrompts needs system_prompt and/or human_prompt")
    elif kind is OpKind.ADD_CONDITIONAL:
        branches = p["branches"]
        if not isinstance(branches, list) or not all(
            isinstance(b, Mapping) and not _blank(b.get("branch_label")) and not _blank(b.get("target"))
            for b in branches
        ):
            raise IncompletePayload("branches must be a list of {branch_label, target}")
    elif kind is OpKind.ADD_PARALLEL:
        arms = p["arms"]
        if not isinstance(arms, list):
            raise IncompletePayload("arms must be a list of node specs")
        for i, arm in enumerate(arms):
            _check_node_payload(arm, f"arms[{i}]")
        _check_node_payload(p["fusion"], "fusion")
    elif kind is OpKind.EXPAND_FRAMEWORK:
        try:
            TemplateId(p["template_id"])
        except ValueError:
            raise IncompletePayload(f"unknown template_id {p['template_id']!r}") from None
        if "parameters" in p and not isinstance(p["parameters"], Mapping):
            raise IncompletePayload("parameters must be an object")


def _blank(v: Any) -> bool:
    return v is None or (isinstance(v, str) and not v.strip()) or (isinstance(v, (list, dict)) and not v)


def _check_node_payload(d: Any, where: str) -> None:
    if not isinstance(d, Mapping):
        raise IncompletePayload(f"{where} must be a node object")
    need = ["node_id", "kind", "node_name", "description"]
    try:
        kind = NodeKind(d.get("kind"))
        need += _NODE_KIND_FIELDS[kind]
    except ValueError:
        raise IncompletePayload(f"{where}.kind must be Basic or Tool") from None
    missing = [k for k in need if _blank(d.get(k))]
    if missing:
        raise IncompletePayload(f"{where} missing: {', '.join(missing)}")


def _node_from_payload(d: Mapping[str, Any]) -> NodeSpec:
    fields = {k: d[k] for k in ("node_id", "kind", "node_name", "description") if k in d}
    for k in ("system_prompt", "human_prompt", "tool_name", "tool_params"):
        if k in d:
            fields[k] = d[k]
    return NodeSpec.from_dict(fields)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

_RULE_FOR_ERROR = (
    (DuplicateNodeId, "DUPLICATE_NODE_ID"),
    (NodeNotFound, "UNKNOWN_NODE"),
    (UnknownNode, "UNKNOWN_NODE"),
    (ProtectedNode, "PROTECTED_NODE"),
    (InvalidNodeSpec, "INVALID_NODE_SPEC"),
    (NeedDefaultBranch, "CONDITIONAL_NEEDS_DEFAULT"),
    (InvalidTemplate, "INVALID_TEMPLATE"),
    (UnsupportedTemplate, "UNSUPPORTED_TEMPLATE"),
)


def apply_operation(graph: WorkflowGraph, op: WorkflowOperation) -> WorkflowGraph:
    """Apply one operation atomically.

    Precondition failures are reported as :class:`ValidationRejected` with a
    single-violation report so callers handle one error type.
    """
    check_payload(op)
    p = op.payload
    try:
        if op.op_kind is OpKind.ADD_NODE:
            return g.add_node(graph, _node_from_payload(p), after=p.get("after"), before=p.get("before"))
        if op.op_kind is OpKind.REMOVE_NODE:
            return g.remove_node(graph, p["node_id"])
        if op.op_kind is OpKind.MODIFY_PROMPTS:
            return modify_prompts(graph, p["node_id"], p.get("system_prompt"), p.get("human_prompt"))
        if op.op_kind is OpKind.ADD_CONDITIONAL:
            return add_conditional(graph, p["source"], p["branches"], p["condition"])
        if op.op_kind is OpKind.ADD_LOOP:
            return add_loop(
                graph,
                p["body_entry"],
                p["body_exit"],
                p["exit_condition"],
                p.get("max_iterations", DEFAULT_LOOP_MAX_ITERATIONS),
            )
        if op.op_kind is OpKind.ADD_PARALLEL:
            return add_parallel(
                graph,
                p["source"],
                [_node_from_payload(a) for a in p["arms"]],
                _node_from_payload(p["fusion"]),
            )
        if op.op_kind is OpKind.EXPAND_FRAMEWORK:
            tpl = FrameworkTemplate(TemplateId(p["template_id"]), dict(p.get("parameters") or {}))
            return expand_framework(graph, p["anchor"], tpl)
    except ValidationRejected:
        raise
    except WorkflowError as exc:
        for err_type, rule in _RULE_FOR_ERROR:
            if isinstance(exc, err_type):
                report = ValidationReport((Violation(rule, str(exc)),))
                raise ValidationRejected(report) from exc
        raise
    raise IncompletePayload(f"unhandled op_kind {op.op_kind}")  # pragma: no cover


# ---------------------------------------------------------------------------
# Node-level
# ---------------------------------------------------------------------------


def modify_prompts(
    graph: WorkflowGraph,
    node_id: str,
    system_prompt: str | None = None,
    human_prompt: str | None = None,
) -> WorkflowGraph:
    node = graph.node(node_id)
    if node.kind is not NodeKind.BASIC:
        raise InvalidNodeSpec(f"{node_id} is a Tool node and has no prompts")
    updated = node.with_prompts(system_prompt, human_prompt)
    nodes = tuple(updated if n.node_id == node_id else n for n in graph.nodes)
    return g.require_valid(graph._evolve(nodes=nodes))


# ---------------------------------------------------------------------------
# Structural-level
# ---------------------------------------------------------------------------


def add_conditional(
    graph: WorkflowGraph,
    source: str,
    branches: Sequence[Mapping[str, str]],
    condition: str,
) -> WorkflowGraph:
    """Replace ``source``'s forward out-edges with labelled branches."""
    labels = [b["branch_label"] for b in branches]
    if len(branches) < 2 or DEFAULT_BRANCH not in labels:
        raise NeedDefaultBranch(f"conditional at {source} needs >=2 branches including {DEFAULT_BRANCH!r}")
    if not graph.has_node(source):
        raise NodeNotFound(source)
    for b in branches:
        if not graph.has_node(b["target"]):
            raise UnknownNode(b["target"])
    kept = [e for e in graph.edges if not (e.source == source and e.is_forward)]
    new_edges = [
        EdgeSpec(source, b["target"], EdgeKind.CONDITIONAL, condition=condition, branch_label=b["branch_label"])
        for b in branches
    ]
    return g.require_valid(graph._evolve(edges=tuple(kept + new_edges)))


def add_loop(
    graph: WorkflowGraph,
    body_entry: str,
    body_exit: str,
    exit_condition: str,
    max_iterations: int = DEFAULT_LOOP_MAX_ITERATIONS,
) -> WorkflowGraph:
    for nid in (body_entry, body_exit):
        if not graph.has_node(nid):
            raise NodeNotFound(nid)
    edge = EdgeSpec(
        body_exit,
        body_entry,
        EdgeKind.LOOP_BACK,
        condition=exit_condition,
        max_iterations=max_iterations,
    )
    return g.require_valid(graph._evolve(edges=graph.edges + (edge,)))


def add_parallel(
    graph: WorkflowGraph,
    source: str,
    arm_nodes: Sequence[NodeSpec],
    fusion_node: NodeSpec,
) -> WorkflowGraph:
    """Open a parallel block after ``source`` that closes on ``fusion_node``.

    ``source``'s previous forward successors now follow the fusion node.
    """
    if len(arm_nodes) < 2:
        raise IncompletePayload("a parallel block needs at least 2 arms")
    if not graph.has_node(source):
        raise NodeNotFound(source)
    new_nodes = list(arm_nodes) + [fusion_node]
    _check_new_nodes(graph, new_nodes)
    if fusion_node.kind is NodeKind.BASIC and "parallel_inputs" not in g.placeholders(fusion_node.human_prompt):
        fusion_node = fusion_node.with_prompts(
            human_prompt=fusion_node.human_prompt.rstrip() + "\n\nParallel analyses:\n{{parallel_inputs}}"
        )
    edges = _detach_successors(graph, source, fusion_node.node_id)
    for arm in arm_nodes:
        edges.append(EdgeSpec(source, arm.node_id, EdgeKind.FAN_OUT))
        edges.append(EdgeSpec(arm.node_id, fusion_node.node_id, EdgeKind.FAN_IN))
    return g.require_valid(
        graph._evolve(
            nodes=graph.nodes + tuple(arm_nodes) + (fusion_node,),
            edges=tuple(edges),
            output_node=fusion_node.node_id if graph.output_node == source else graph.output_node,
        )
    )


def _check_new_nodes(graph: WorkflowGraph, nodes: Sequence[NodeSpec]) -> None:
    seen = set(graph.node_ids)
    for n in nodes:
        problems = n.problems()
        if problems:
            raise InvalidNodeSpec(f"{n.node_id}: " + "; ".join(problems))
        if n.node_id in seen:
            raise DuplicateNodeId(n.node_id)
        seen.add(n.node_id)


def _detach_successors(graph: WorkflowGraph, anchor: str, new_source: str) -> list[EdgeSpec]:
    """Edges with ``anchor``'s forward out-edges re-sourced at ``new_source``."""
    return [
        dataclasses.replace(e, source=new_source) if e.source == anchor and e.is_forward else e
        for e in graph.edges
    ]


# ---------------------------------------------------------------------------
# Framework-level
# ---------------------------------------------------------------------------

_COT_SYSTEM = "Reason carefully and explicitly before committing to an answer."
_COT_HUMAN = (
    "Think through the case step by step: describe what you observe, list the "
    "plausible diagnoses with the evidence for and against each, and only then "
    "give your final ranked answer."
)


def _slug(text: str) -> str:
    s = re.sub(r"[^0-9a-zA-Z]+", "_", text.strip().lower()).strip("_")
    return s or "x"


def _fresh_id(taken: set[str], base: str) -> str:
    nid, i = base, 2
    while nid in taken:
        nid = f"{base}_{i}"
        i += 1
    taken.add(nid)
    return nid


def expand_framework(graph: WorkflowGraph, anchor: str, tpl: FrameworkTemplate) -> WorkflowGraph:
    if not isinstance(tpl.template_id, TemplateId):
        raise UnsupportedTemplate(str(tpl.template_id))
    tpl.check()
    node = graph.node(anchor)
    if tpl.template_id is TemplateId.CHAIN_OF_THOUGHT:
        if node.kind is not NodeKind.BASIC:
            raise UnsupportedTemplate("ChainOfThought needs a Basic anchor")
        if _COT_HUMAN in node.human_prompt:
            return modify_prompts(graph, anchor, node.system_prompt, node.human_prompt)
        return modify_prompts(
            graph,
            anchor,
            system_prompt=node.system_prompt.rstrip() + "\n" + _COT_SYSTEM,
            human_prompt=node.human_prompt.rstrip() + "\n\n" + _COT_HUMAN,
        )
    if tpl.template_id is TemplateId.REFLEXION:
        return _expand_reflexion(graph, node, tpl.max_reflections)
    if tpl.template_id is TemplateId.ROUND_TABLE:
        return _expand_round_table(graph, anchor, tpl.expert_roles, tpl.rounds)
    if tpl.template_id is TemplateId.CMD:
        return _expand_cmd(graph, anchor, tpl.expert_roles, tpl.rounds)
    raise UnsupportedTemplate(tpl.template_id.value)  # pragma: no cover


def _expand_reflexion(graph: WorkflowGraph, node: NodeSpec, max_reflections: int) -> WorkflowGraph:
    anchor = node.node_id
    taken = set(graph.node_ids)
    critic_id = _fresh_id(taken, f"{anchor}_critic")
    critic = NodeSpec.basic(
        critic_id,
        f"{node.node_name} critic",
        f"Reviews the output of {node.node_name} and either approves it or explains what to fix.",
        "You are a meticulous reviewer who checks diagnostic reasoning for mistakes.",
        "Review this answer:\n{{" + anchor + "}}\n\n"
        "State whether you approve it. If not, explain precisely what must be corrected. "
        "Finish with the ranked list of diagnoses you endorse, one per line, chosen from: "
        "{{label_vocabulary}}",
    )
    nodes = list(graph.nodes)
    if node.kind is NodeKind.BASIC and "feedback" not in g.placeholders(node.human_prompt):
        revised = node.with_prompts(
            human_prompt=node.human_prompt.rstrip() + "\n\nReviewer feedback on your previous attempt: {{feedback}}"
        )
        nodes = [revised if n.node_id == anchor else n for n in nodes]
    edges = _detach_successors(graph, anchor, critic_id)
    edges.append(EdgeSpec(anchor, critic_id))
    edges.append(
        EdgeSpec(
            critic_id,
            anchor,
            EdgeKind.LOOP_BACK,
            condition="critic approves",
            max_iterations=max_reflections,
        )
    )
    return g.require_valid(
        graph._evolve(
            nodes=tuple(nodes) + (critic,),
            edges=tuple(edges),
            output_node=critic_id if graph.output_node == anchor else graph.output_node,
        )
    )


def _round_table_block(
    taken: set[str],
    prefix: str,
    context_id: str,
    roles: Sequence[str],
    rounds: int,
    topic: str,
) -> tuple[list[NodeSpec], list[EdgeSpec], str]:
    """Nodes/edges for one round table fanning out of ``context_id``.

    Returns the aggregator id, which is left without outgoing edges.
    """
    nodes: list[NodeSpec] = []
    edges: list[EdgeSpec] = []
    latest: dict[str, str] = {}
    ctx = "{{" + context_id + "}}"
    first_round = []
    for role in roles:
        nid = _fresh_id(taken, f"{prefix}_r1_{_slug(role)}")
        nodes.append(
            NodeSpec.basic(
                nid,
                f"{role} (round 1)",
                f"{role} gives an independent initial opinion on {topic}.",
                f"You are an experienced {role} taking part in a panel discussion.",
                f"Case image: {{{{image_ref}}}}\nPrior context:\n{ctx}\n\n"
                "Give your independent initial assessment and a ranked list of likely "
                "diagnoses chosen from: {{label_vocabulary}}",
            )
        )
        first_round.append(nid)
        latest[role] = nid
    previous_tail: str | None = None
    for r in range(2, rounds + 1):
        for role in roles:
            nid = _fresh_id(taken, f"{prefix}_r{r}_{_slug(role)}")
            opinions = "\n".join(f"{other}: {{{{{latest[other]}}}}}" for other in roles)
            nodes.append(
                NodeSpec.basic(
                    nid,
                    f"{role} (round {r})",
                    f"{role} refines their opinion after reading the panel so far.",
                    f"You are an experienced {role} taking part in a panel discussion.",
                    f"Case image: {{{{image_ref}}}}\nLatest opinions from the panel:\n{opinions}\n\n"
                    "Refine your assessment in light of your colleagues' reasoning and give an "
                    "updated ranked list of diagnoses chosen from: {{label_vocabulary}}",
                )
            )
            if previous_tail is None:
                edges.extend(EdgeSpec(f, nid, EdgeKind.FAN_IN) for f in first_round)
            else:
                edges.append(EdgeSpec(previous_tail, nid))
            previous_tail = nid
            latest[role] = nid
    agg = _fresh_id(taken, f"{prefix}_aggregate")
    opinions = "\n".join(f"{role}: {{{{{latest[role]}}}}}" for role in roles)
    nodes.append(
        NodeSpec.basic(
            agg,
            "Panel aggregator",
            f"Merges the final opinions of the panel on {topic} into one ranked answer.",
            "You are the chair of a diagnostic panel.",
            f"Final opinions from the panel:\n{opinions}\n\n"
            "Combine them into a single ranked list of diagnoses, most likely first, one per "
            "line, chosen from: {{label_vocabulary}}",
        )
    )
    if previous_tail is None:
        edges.extend(EdgeSpec(f, agg, EdgeKind.FAN_IN) for f in first_round)
    else:
        edges.append(EdgeSpec(previous_tail, agg))
    edges[:0] = [EdgeSpec(context_id, f, EdgeKind.FAN_OUT) for f in first_round]
    return nodes, edges, agg


def _expand_round_table(graph: WorkflowGraph, anchor: str, roles: Sequence[str], rounds: int) -> WorkflowGraph:
    taken = set(graph.node_ids)
    nodes, new_edges, agg = _round_table_block(taken, f"{anchor}_rt", anchor, roles, rounds, "the case")
    edges = _detach_successors(graph, anchor, agg) + new_edges
    return g.require_valid(
        graph._evolve(
            nodes=graph.nodes + tuple(nodes),
            edges=tuple(edges),
            output_node=agg if graph.output_node == anchor else graph.output_node,
        )
    )


def _expand_cmd(graph: WorkflowGraph, anchor: str, roles: Sequence[str], rounds: int) -> WorkflowGraph:
    taken = set(graph.node_ids)
    nodes: list[NodeSpec] = []
    edges: list[EdgeSpec] = []
    group_aggs = []
    for gi in (1, 2):
        lead = _fresh_id(taken, f"{anchor}_cmd_g{gi}_lead")
        nodes.append(
            NodeSpec.basic(
                lead,
                f"Group {gi} moderator",
                f"Frames the case for discussion group {gi}.",
                "You moderate a small group of clinicians discussing one case.",
                "Case image: {{image_ref}}\nPrior context:\n{{" + anchor + "}}\n\n"
                f"Summarise the key findings group {gi} should debate, without committing to a diagnosis.",
            )
        )
        edges.append(EdgeSpec(anchor, lead, EdgeKind.FAN_OUT))
        block_nodes, block_edges, agg = _round_table_block(
            taken, f"{anchor}_cmd_g{gi}", lead, roles, rounds, f"group {gi}'s discussion"
        )
        nodes += block_nodes
        edges += block_edges
        group_aggs.append(agg)
    merge = _fresh_id(taken, f"{anchor}_cmd_merge")
    nodes.append(
        NodeSpec.basic(
            merge,
            "Group merger",
            "Merges the conclusions of both discussion groups.",
            "You reconcile the conclusions of independent diagnostic groups.",
            "Conclusions of the discussion groups:\n{{parallel_inputs}}\n\n"
            "Produce one final ranked list of diagnoses, most likely first, one per line, "
            "chosen from: {{label_vocabulary}}",
        )
    )
    edges += [EdgeSpec(a, merge, EdgeKind.FAN_IN) for a in group_aggs]
    all_edges = _detach_successors(graph, anchor, merge) + edges
    return g.require_valid(
        graph._evolve(
            nodes=graph.nodes + tuple(nodes),
            edges=tuple(all_edges),
            output_node=merge if graph.output_node == anchor else graph.output_node,
        )
    )
