"""Run a validated workflow graph on one case and record what happened.

Traversal rules:

* Sequential edges are followed one at a time.
* A node with ConditionalBranch edges asks the router model which label to
  take; anything it cannot parse falls back to ``"default"``.
* A node with an outgoing LoopBack edge asks the loop controller whether the
  exit condition holds; the bound ``max_iterations`` always wins and an
  unparseable answer exits.
* A node with ParallelFanOut edges runs each arm on its own copy of the
  context until the arm's closing fan-in, then continues at the fusion node.
  Arms are merged in node insertion order, so running them on threads gives
  the same trace as running them one after another.

Only node executions count against ``ExecLimits.max_total_steps``; router
calls are recorded as steps too (for token accounting) but are free.
"""

from __future__ import annotations

import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence

from wfevolve.errors import (
    BackendFailure,
    EmptyRanking,
    ParamSchemaViolation,
    ToolFailure,
    UnknownLabel,
    UnknownTool,
    UnresolvedPlaceholder,
    ValidationRejected,
)
from wfevolve.graph import DEFAULT_BRANCH, EdgeKind, NodeKind, WorkflowGraph, validate_graph
from wfevolve.llm import DEFAULT_SEED, DEFAULT_TEMPERATURE, LlmClient, LlmRequest, LlmResponse, render_prompt
from wfevolve.tools import ToolRegistry

DEFAULT_MAX_TOTAL_STEPS = 64
NO_VALUE = "(none)"


class TraceStatus(str, Enum):
    COMPLETED = "Completed"
    TRUNCATED = "Truncated"
    FAILED = "Failed"


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    image_ref: str
    label: str
    label_vocabulary: tuple[str, ...]
    query_vector: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "label_vocabulary", tuple(self.label_vocabulary))
        if self.query_vector is not None:
            object.__setattr__(self, "query_vector", tuple(float(x) for x in self.query_vector))
        if self.label not in self.label_vocabulary:
            raise UnknownLabel(f"{self.case_id}: label {self.label!r} is not in the vocabulary")


@dataclass(frozen=True)
class ExecLimits:
    max_total_steps: int = DEFAULT_MAX_TOTAL_STEPS
    timeout_seconds: float = 60.0
    retries: int = 2
    backoff_seconds: float = 0.5
    concurrent_arms: bool = False
    temperature: float = DEFAULT_TEMPERATURE
    seed: int | None = DEFAULT_SEED

    def __post_init__(self) -> None:
        if self.max_total_steps < 1:
            raise ValueError("max_total_steps must be >= 1")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


@dataclass
class Step:
    node_id: str
    kind: str  # "node", "condition" or "exit"
    rendered_system_prompt: str
    rendered_human_prompt: str
    raw_output: str
    parsed_output: Any
    prompt_tokens: int = 0
    completion_tokens: int = 0
    wall_time: float = 0.0

    def to_dict(self, include_wall_time: bool = True) -> dict[str, Any]:
        d = {
            "node_id": self.node_id,
            "kind": self.kind,
            "rendered_system_prompt": self.rendered_system_prompt,
            "rendered_human_prompt": self.rendered_human_prompt,
            "raw_output": self.raw_output,
            "parsed_output": self.parsed_output,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }
        if include_wall_time:
            d["wall_time"] = round(self.wall_time, 6)
        return d


@dataclass
class ExecutionTrace:
    case_id: str
    graph_version: int
    steps: list[Step] = field(default_factory=list)
    loop_iteration_counts: dict[str, int] = field(default_factory=dict)
    branch_choices: dict[str, str] = field(default_factory=dict)
    final_ranking: list[str] = field(default_factory=list)
    status: TraceStatus = TraceStatus.COMPLETED
    refused: bool = False
    error: str | None = None

    @property
    def prompt_tokens(self) -> int:
        return sum(s.prompt_tokens for s in self.steps)

    @property
    def completion_tokens(self) -> int:
        return sum(s.completion_tokens for s in self.steps)

    @property
    def node_steps(self) -> list[Step]:
        return [s for s in self.steps if s.kind == "node"]

    def outputs(self) -> dict[str, str]:
        """Latest raw output per node, in first-execution order."""
        out: dict[str, str] = {}
        for s in self.node_steps:
            out[s.node_id] = s.raw_output
        return out

    def to_dict(self, include_wall_time: bool = True) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "graph_version": self.graph_version,
            "status": self.status.value,
            "refused": self.refused,
            "error": self.error,
            "final_ranking": list(self.final_ranking),
            "branch_choices": dict(self.branch_choices),
            "loop_iteration_counts": dict(self.loop_iteration_counts),
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "steps": [s.to_dict(include_wall_time) for s in self.steps],
        }

    def to_json(self, include_wall_time: bool = True) -> str:
        return json.dumps(self.to_dict(include_wall_time), ensure_ascii=False, sort_keys=False)


# ---------------------------------------------------------------------------
# Routers
# ---------------------------------------------------------------------------

_ROUTER_SYSTEM = (
    "You are the routing component of a diagnostic workflow. "
    "Answer with exactly one branch label and nothing else."
)
_EXIT_SYSTEM = (
    "You are the loop controller of a diagnostic workflow. "
    "Answer with yes or no and nothing else."
)
LATEST_KEY = "_latest_output"


def normalize(text: str) -> str:
    text = text.casefold().replace("_", " ").replace("-", " ")
    text = re.sub(r"\s+", " ", text).strip()
    return text.strip(" .,:;!?\"'`*()[]")


@dataclass(frozen=True)
class RouterDecision:
    value: Any
    request: LlmRequest | None
    response: LlmResponse | None


def condition_router(
    condition: str,
    ctx: Mapping[str, Any],
    branch_labels: Sequence[str],
    llm: LlmClient,
    limits: ExecLimits | None = None,
) -> RouterDecision:
    if DEFAULT_BRANCH not in branch_labels:
        raise ValueError("branch_labels must include 'default'")
    limits = limits or ExecLimits()
    req = LlmRequest(
        _ROUTER_SYSTEM,
        "Decide which branch the workflow should take next.\n"
        f"Condition: {condition}\n"
        f"Available branches: {', '.join(branch_labels)}\n\n"
        f"Latest output:\n{ctx.get(LATEST_KEY, NO_VALUE)}\n\n"
        "Reply with exactly one branch label from the list.",
        temperature=limits.temperature,
        seed=limits.seed,
    )
    try:
        resp = call_with_retries(llm, req, limits)
    except BackendFailure:
        return RouterDecision(DEFAULT_BRANCH, req, None)
    label = DEFAULT_BRANCH if resp.refused else parse_branch_label(resp.text, branch_labels)
    return RouterDecision(label, req, resp)


def evaluate_condition(
    condition: str,
    ctx: Mapping[str, Any],
    branch_labels: Sequence[str],
    llm: LlmClient,
) -> str:
    return condition_router(condition, ctx, branch_labels, llm).value


def parse_branch_label(reply: str, branch_labels: Sequence[str]) -> str:
    by_norm = {normalize(lab): lab for lab in branch_labels}
    whole = normalize(reply)
    if whole in by_norm:
        return by_norm[whole]
    lines = [ln for ln in reply.strip().splitlines() if ln.strip()]
    if lines and normalize(lines[0]) in by_norm:
        return by_norm[normalize(lines[0])]
    mentioned = {
        lab for norm, lab in by_norm.items() if norm and re.search(rf"(?<!\w){re.escape(norm)}(?!\w)", whole)
    }
    if len(mentioned) == 1:
        return mentioned.pop()
    return DEFAULT_BRANCH


_NO = {"no", "n", "false", "continue", "not"}


def parse_exit_reply(reply: str) -> bool:
    words = normalize(reply).split()
    if not words:
        return True
    first = words[0].strip(".,:;!")
    if first in _NO:
        return False
    return True


def exit_router(
    condition: str,
    ctx: Mapping[str, Any],
    iteration: int,
    max_iterations: int,
    llm: LlmClient,
    limits: ExecLimits | None = None,
) -> RouterDecision:
    if iteration < 1:
        raise ValueError("iteration must be >= 1")
    if iteration >= max_iterations:
        return RouterDecision(True, None, None)
    limits = limits or ExecLimits()
    req = LlmRequest(
        _EXIT_SYSTEM,
        f"Exit condition: {condition}\n"
        f"Iteration: {iteration} of {max_iterations}\n\n"
        f"Latest output:\n{ctx.get(LATEST_KEY, NO_VALUE)}\n\n"
        "Has the exit condition been met? Reply yes or no.",
        temperature=limits.temperature,
        seed=limits.seed,
    )
    try:
        resp = call_with_retries(llm, req, limits)
    except BackendFailure:
        return RouterDecision(True, req, None)
    return RouterDecision(True if resp.refused else parse_exit_reply(resp.text), req, resp)


def evaluate_exit(
    condition: str,
    ctx: Mapping[str, Any],
    iteration: int,
    max_iterations: int,
    llm: LlmClient,
) -> bool:
    return exit_router(condition, ctx, iteration, max_iterations, llm).value


# ---------------------------------------------------------------------------
# Ranking extraction
# ---------------------------------------------------------------------------

_ITEM_SPLIT = re.compile(r"(?:^|\s)\(?\d{1,2}[.):]\s+|[\n,;]")


def parse_final_ranking(raw_output: str, vocab: Sequence[str]) -> list[str]:
    """Map a free-text ranked answer onto vocabulary labels.

    Entries match by normalised equality first, then by a unique label
    occurring inside the entry, then by the entry occurring inside a unique
    label. Unmatched entries are dropped and duplicates keep first position.
    """
    if not vocab:
        raise ValueError("vocabulary must be non-empty")
    norm_vocab = [(normalize(v), v) for v in vocab]
    exact = {n: v for n, v in norm_vocab}
    out: list[str] = []
    for piece in _ITEM_SPLIT.split(raw_output):
        entry = normalize(re.sub(r"^\s*[-*•]+\s*", "", piece))
        if not entry:
            continue
        label = exact.get(entry) or _substring_match(entry, norm_vocab)
        if label is not None and label not in out:
            out.append(label)
    if not out:
        raise EmptyRanking("no vocabulary label found in the reply")
    return out


def _contains(haystack: str, needle: str) -> bool:
    return bool(needle) and re.search(rf"(?<!\w){re.escape(needle)}(?!\w)", haystack) is not None


def _substring_match(entry: str, norm_vocab: Sequence[tuple[str, str]]) -> str | None:
    inside = [(n, v) for n, v in norm_vocab if _contains(entry, n)]
    inside = [(n, v) for n, v in inside if not any(n != m and n in m for m, _ in inside)]
    if len(inside) == 1:
        return inside[0][1]
    if not inside and len(entry) >= 4:
        around = [v for n, v in norm_vocab if _contains(n, entry)]
        if len(around) == 1:
            return around[0]
    return None


# ---------------------------------------------------------------------------
# Backend calls
# ---------------------------------------------------------------------------


def call_with_retries(llm: LlmClient, req: LlmRequest, limits: ExecLimits) -> LlmResponse:
    for attempt in range(limits.retries + 1):
        try:
            return llm.complete(req)
        except BackendFailure:
            if attempt == limits.retries:
                raise
            if limits.backoff_seconds > 0:
                time.sleep(limits.backoff_seconds * (2**attempt))
    raise AssertionError("unreachable")  # pragma: no cover


# ---------------------------------------------------------------------------
# Executor
# ---------------------------------------------------------------------------


class _Truncated(Exception):
    pass


class _Refused(Exception):
    def __init__(self, node_id: str, reason: str):
        super().__init__(f"{node_id}: model refused: {reason}")


@dataclass
class _Frame:
    ctx: dict[str, Any]
    budget: int
    steps: list[Step] = field(default_factory=list)
    used: int = 0
    loop_counts: dict[str, int] = field(default_factory=dict)
    branch_choices: dict[str, str] = field(default_factory=dict)
    active_loops: dict[str, int] = field(default_factory=dict)
    last_node: str | None = None

    def child(self) -> _Frame:
        return _Frame(ctx=dict(self.ctx), budget=self.budget - self.used)


class _Executor:
    def __init__(self, graph, case, llm, tools, limits):
        self.graph = graph
        self.case = case
        self.llm = llm
        self.tools = tools
        self.limits = limits

    def initial_context(self) -> dict[str, Any]:
        ctx: dict[str, Any] = {
            "image_ref": self.case.image_ref,
            "case_id": self.case.case_id,
            "label_vocabulary": ", ".join(self.case.label_vocabulary),
            "iteration": 1,
            "feedback": NO_VALUE,
        }
        if self.case.query_vector is not None:
            ctx["query_vector"] = list(self.case.query_vector)
        return ctx

    def walk(self, frame: _Frame, start: str) -> str | None:
        """Run from ``start``; return the fusion node if a fan-in ends the walk."""
        g = self.graph
        cur = start
        while True:
            self.run_node(frame, cur)
            loop = g.loop_edge_from(cur)
            if loop is not None:
                passes = frame.active_loops.get(cur, 0) + 1
                frame.active_loops[cur] = passes
                frame.loop_counts[cur] = max(frame.loop_counts.get(cur, 0), passes)
                decision = exit_router(loop.condition, frame.ctx, passes, loop.max_iterations, self.llm, self.limits)
                self.record_router(frame, cur, "exit", decision)
                if not decision.value:
                    frame.ctx["feedback"] = frame.ctx[cur]
                    frame.ctx["iteration"] = passes + 1
                    cur = loop.target
                    continue
                del frame.active_loops[cur]
                frame.ctx["iteration"] = (list(frame.active_loops.values())[-1] + 1) if frame.active_loops else 1
            outs = [e for e in g.out_edges(cur) if e.is_forward]
            if not outs:
                return None
            kind = outs[0].kind
            if kind is EdgeKind.SEQUENTIAL:
                cur = outs[0].target
            elif kind is EdgeKind.FAN_IN:
                return outs[0].target
            elif kind is EdgeKind.CONDITIONAL:
                labels = [e.branch_label for e in outs]
                condition = "\n".join(dict.fromkeys(e.condition for e in outs))
                decision = condition_router(condition, frame.ctx, labels, self.llm, self.limits)
                self.record_router(frame, cur, "condition", decision)
                frame.branch_choices[cur] = decision.value
                cur = next(e.target for e in outs if e.branch_label == decision.value)
            else:
                heads = sorted((e.target for e in outs), key=g.order)
                cur = self.run_parallel(frame, heads)

    def run_parallel(self, frame: _Frame, heads: list[str]) -> str:
        children = [frame.child() for _ in heads]

        def arm(i: int):
            try:
                return self.walk(children[i], heads[i]), None
            except Exception as exc:  # re-raised below in insertion order
                return None, exc

        if self.limits.concurrent_arms and len(heads) > 1:
            with ThreadPoolExecutor(max_workers=len(heads)) as pool:
                results = list(pool.map(arm, range(len(heads))))
        else:
            results = [arm(i) for i in range(len(heads))]

        fusion = None
        fused_parts = []
        for head, child, (end, exc) in zip(heads, children, results):
            frame.steps.extend(child.steps)
            frame.used += child.used
            for k, v in child.loop_counts.items():
                frame.loop_counts[k] = max(frame.loop_counts.get(k, 0), v)
            frame.branch_choices.update(child.branch_choices)
            if frame.used > frame.budget:
                self.trim(frame)
                raise _Truncated()
            if exc is not None:
                raise exc
            frame.ctx.update(child.ctx)
            last = child.last_node
            fused_parts.append(f"[{self.graph.node(last).node_name}]\n{child.ctx[last]}")
            fusion = end
        frame.ctx["parallel_inputs"] = "\n\n".join(fused_parts)
        return fusion

    def trim(self, frame: _Frame) -> None:
        kept, count = [], 0
        for s in frame.steps:
            if s.kind == "node":
                if count == frame.budget:
                    break
                count += 1
            kept.append(s)
        frame.steps = kept
        frame.used = count

    def run_node(self, frame: _Frame, node_id: str) -> None:
        if frame.used >= frame.budget:
            raise _Truncated()
        node = self.graph.node(node_id)
        ctx = dict(frame.ctx)
        ctx["previous_output"] = frame.ctx.get(node_id, NO_VALUE)
        t0 = time.perf_counter()
        if node.kind is NodeKind.TOOL:
            params = dict(node.tool_params or {})
            text = self.tools.invoke(node.tool_name, params, ctx)
            step = Step(
                node_id, "node", "", f"{node.tool_name}({json.dumps(params, sort_keys=True)})", text, text.strip()
            )
        else:
            system = render_prompt(node.system_prompt, ctx)
            human = render_prompt(node.human_prompt, ctx)
            req = LlmRequest(system, human, self.case.image_ref, self.limits.temperature, self.limits.seed)
            resp = call_with_retries(self.llm, req, self.limits)
            step = Step(
                node_id, "node", system, human, resp.text, resp.text.strip(),
                resp.prompt_tokens, resp.completion_tokens,
            )
            if resp.refused:
                step.wall_time = time.perf_counter() - t0
                frame.steps.append(step)
                frame.used += 1
                raise _Refused(node_id, resp.text)
        step.wall_time = time.perf_counter() - t0
        frame.steps.append(step)
        frame.used += 1
        frame.last_node = node_id
        frame.ctx[node_id] = step.raw_output
        frame.ctx[LATEST_KEY] = step.raw_output

    def record_router(self, frame: _Frame, node_id: str, kind: str, d: RouterDecision) -> None:
        if d.request is None:
            return
        resp = d.response
        frame.steps.append(
            Step(
                node_id,
                kind,
                d.request.system_prompt,
                d.request.human_prompt,
                resp.text if resp else "",
                d.value,
                resp.prompt_tokens if resp else 0,
                resp.completion_tokens if resp else 0,
            )
        )


def execute(
    graph: WorkflowGraph,
    case: CaseRecord,
    llm: LlmClient,
    tools: ToolRegistry | None = None,
    limits: ExecLimits | None = None,
) -> ExecutionTrace:
    """Execute ``graph`` on ``case``; failures end up in the trace status."""
    report = validate_graph(graph)
    if not report.ok:
        raise ValidationRejected(report, "refusing to execute an invalid workflow")
    limits = limits or ExecLimits()
    ex = _Executor(graph, case, llm, tools or ToolRegistry(), limits)
    frame = _Frame(ctx=ex.initial_context(), budget=limits.max_total_steps)
    trace = ExecutionTrace(case.case_id, graph.version)
    try:
        ex.walk(frame, graph.entry_node)
    except _Truncated:
        trace.status = TraceStatus.TRUNCATED
    except _Refused as exc:
        trace.status = TraceStatus.FAILED
        trace.refused = True
        trace.error = str(exc)
    except (BackendFailure, UnresolvedPlaceholder, UnknownTool, ParamSchemaViolation, ToolFailure) as exc:
        trace.status = TraceStatus.FAILED
        trace.error = f"{type(exc).__name__}: {exc}"
    trace.steps = frame.steps
    trace.loop_iteration_counts = frame.loop_counts
    trace.branch_choices = frame.branch_choices
    if trace.status is not TraceStatus.FAILED and graph.output_node in frame.ctx:
        try:
            trace.final_ranking = parse_final_ranking(frame.ctx[graph.output_node], case.label_vocabulary)
        except EmptyRanking:
            trace.final_ranking = []
    return trace
