"""Self-evolution loop for diagnostic workflows.

One iteration runs a training batch, asks an analyzer model why the wrong
cases went wrong, turns its advice into suggestions, drops the infeasible
ones, reformulates the rest into :class:`~wfevolve.ops.WorkflowOperation`
envelopes and applies them. The post-change graph is scored on the
validation split and checkpointed.

All model-facing wording lives in ``prompts/*.txt`` next to this module; a
``prompts_dir`` override lets users edit them without reinstalling.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from wfevolve.errors import BackendFailure, IncompletePayload, ReformulationError, ValidationRejected, WorkflowError
from wfevolve.execution import (
    CaseRecord,
    ExecLimits,
    ExecutionTrace,
    TraceStatus,
    call_with_retries,
    normalize,
    parse_exit_reply,
)
from wfevolve.graph import NodeKind, NodeSpec, WorkflowGraph, require_valid, save_graph
from wfevolve.llm import LlmClient, LlmRequest, LlmResponse, render_prompt
from wfevolve.mermaid import structure_to_prose
from wfevolve.metrics import DEFAULT_KS, build_report, predictions_from_traces, run_cases
from wfevolve.ops import OpKind, Origin, WorkflowOperation, apply_operation, parse_operation
from wfevolve.tools import ToolRegistry

__all__ = [
    "Backends",
    "ConvergenceConfig",
    "ErrorCategory",
    "ErrorReport",
    "EvolutionResult",
    "EvolveConfig",
    "IterationRecord",
    "PromptLibrary",
    "Suggestion",
    "SuggestionKind",
    "classify_errors",
    "evolve_step",
    "filter_suggestions",
    "generate_suggestions",
    "reformulate",
    "baseline_workflow",
    "run_evolution",
    "structure_to_prose",
]

log = logging.getLogger(__name__)

DEFAULT_MAX_SUGGESTIONS = 4
UNPARSED_ANALYSIS = "unparsed analysis"
_ANALYST_SYSTEM = "You are a careful reviewer of multi-agent medical image diagnosis workflows."


class ErrorCategory(str, Enum):
    IMAGE_UNDERSTANDING = "ImageUnderstanding"
    DIAGNOSTIC = "Diagnostic"
    NONE = "None"


class SuggestionKind(str, Enum):
    STRUCTURAL = "Structural"
    PROMPT = "Prompt"
    INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class ErrorReport:
    case_id: str
    category: ErrorCategory
    root_cause: str = ""
    implicated_nodes: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "category": self.category.value,
            "root_cause": self.root_cause,
            "implicated_nodes": list(self.implicated_nodes),
        }


@dataclass(frozen=True)
class Suggestion:
    suggestion_id: str
    text: str
    kind: SuggestionKind
    source_errors: tuple[str, ...] = ()
    note: str = ""

    def to_dict(self) -> dict[str, Any]:
        d = {
            "suggestion_id": self.suggestion_id,
            "text": self.text,
            "kind": self.kind.value,
            "source_errors": list(self.source_errors),
        }
        if self.note:
            d["note"] = self.note
        return d


@dataclass(frozen=True)
class ConvergenceConfig:
    epsilon: float = 0.01
    window: int = 2
    max_iterations: int = 10

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


@dataclass(frozen=True)
class EvolveConfig:
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    batch_size: int | None = None
    max_suggestions: int = DEFAULT_MAX_SUGGESTIONS
    ks: tuple[int, ...] = DEFAULT_KS
    workers: int = 1
    limits: ExecLimits = field(default_factory=ExecLimits)
    prompts_dir: str | None = None

    def __post_init__(self) -> None:
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_suggestions < 1:
            raise ValueError("max_suggestions must be >= 1")
        if 1 not in self.ks:
            raise ValueError("ks must include 1")


@dataclass
class Backends:
    """``llm`` runs the workflow; ``analyzer`` (default: the same client)
    does error analysis, suggestion, feasibility and reformulation calls."""

    llm: LlmClient
    tools: ToolRegistry = field(default_factory=ToolRegistry)
    analyzer: LlmClient | None = None

    @property
    def critic(self) -> LlmClient:
        return self.analyzer or self.llm


@dataclass
class IterationRecord:
    iteration: int
    graph_version_before: int
    graph_version_after: int
    batch_case_ids: list[str]
    error_reports: list[ErrorReport]
    suggestions: list[Suggestion]
    applied_operations: list[dict[str, Any]]
    rejected_operations: list[dict[str, Any]]
    dropped_suggestions: list[dict[str, Any]]
    validation_accuracy: dict[str, float]
    checkpoint: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "graph_version_before": self.graph_version_before,
            "graph_version_after": self.graph_version_after,
            "batch_case_ids": self.batch_case_ids,
            "error_reports": [r.to_dict() for r in self.error_reports],
            "suggestions": [s.to_dict() for s in self.suggestions],
            "applied_operations": self.applied_operations,
            "rejected_operations": self.rejected_operations,
            "dropped_suggestions": self.dropped_suggestions,
            "validation_accuracy": self.validation_accuracy,
            "checkpoint": self.checkpoint,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


def baseline_workflow() -> WorkflowGraph:
    """Single-node starting point: one LLM diagnoser."""
    return WorkflowGraph.single_node(
        NodeSpec.basic(
            "diagnoser",
            "Diagnoser",
            "Looks at the case image and ranks the likely diagnoses.",
            "You are an experienced dermatologist.",
            "Examine the skin lesion in {{image_ref}}. Rank the most likely diagnoses, "
            "most likely first, choosing only from: {{label_vocabulary}}. "
            "Answer as a numbered list.",
        ),
        graph_id="baseline",
    )


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

_FORMAT_HEADER = re.compile(r"^\[(\w+)\]\s*$", re.M)


class PromptLibrary:
    def __init__(self, prompts_dir: str | Path | None = None) -> None:
        self.prompts_dir = Path(prompts_dir) if prompts_dir else None
        self._cache: dict[str, str] = {}

    def template(self, name: str) -> str:
        if name not in self._cache:
            local = self.prompts_dir / f"{name}.txt" if self.prompts_dir else None
            if local is not None and local.is_file():
                self._cache[name] = local.read_text(encoding="utf-8")
            else:
                self._cache[name] = (resources.files("wfevolve") / "prompts" / f"{name}.txt").read_text(encoding="utf-8")
        return self._cache[name]

    def render(self, name: str, **ctx: Any) -> str:
        ctx.setdefault("placeholder_example", "{{image_ref}}")
        return render_prompt(self.template(name), ctx)

    def payload_format(self, op_kind: OpKind) -> str:
        text = self.template("payload_formats")
        parts = _FORMAT_HEADER.split(text)
        sections = {parts[i]: parts[i + 1].strip() for i in range(1, len(parts) - 1, 2)}
        return sections.get(op_kind.value, "")


_DEFAULT_PROMPTS = PromptLibrary()


def _ask(llm: LlmClient, human: str, limits: ExecLimits) -> LlmResponse:
    req = LlmRequest(_ANALYST_SYSTEM, human, temperature=limits.temperature, seed=limits.seed)
    return call_with_retries(llm, req, limits)


def _extract_json(text: str, opener: str) -> Any:
    """First JSON value starting with ``opener`` that decodes cleanly."""
    decoder = json.JSONDecoder()
    for m in re.finditer(re.escape(opener), text):
        try:
            value, _ = decoder.raw_decode(text, m.start())
            return value
        except json.JSONDecodeError:
            continue
    return None


def _tool_list(tools: ToolRegistry | None) -> str:
    return ", ".join(tools.names) if tools and tools.names else "(none)"


# ---------------------------------------------------------------------------
# Error analysis
# ---------------------------------------------------------------------------


def _category(value: Any) -> ErrorCategory | None:
    if not isinstance(value, str):
        return None
    key = re.sub(r"[\s_-]", "", value.casefold())
    if key.startswith("imageunderstanding") or key == "image":
        return ErrorCategory.IMAGE_UNDERSTANDING
    if key.startswith("diagnostic"):
        return ErrorCategory.DIAGNOSTIC
    return None


def _mentioned_nodes(text: str, node_ids: Sequence[str]) -> tuple[str, ...]:
    return tuple(n for n in node_ids if re.search(rf"(?<![\w]){re.escape(n)}(?![\w])", text))


def parse_analysis(reply: str, node_ids: Sequence[str]) -> tuple[ErrorCategory, str, tuple[str, ...]]:
    obj = _extract_json(reply, "{")
    if isinstance(obj, dict):
        cat = _category(obj.get("category"))
        if cat is not None:
            root = " ".join(str(obj.get("root_cause") or "").split()) or "(no root cause given)"
            raw_nodes = obj.get("implicated_nodes") or []
            nodes = [n for n in raw_nodes if isinstance(n, str) and n in node_ids] if isinstance(raw_nodes, list) else []
            return cat, root, tuple(dict.fromkeys(nodes))
    flat = normalize(reply)
    hits = [(flat.find(tok), cat) for tok, cat in (
        ("image understanding", ErrorCategory.IMAGE_UNDERSTANDING),
        ("imageunderstanding", ErrorCategory.IMAGE_UNDERSTANDING),
        ("diagnostic", ErrorCategory.DIAGNOSTIC),
    ) if tok in flat]
    if hits:
        cat = min(hits, key=lambda h: h[0])[1]
        return cat, " ".join(reply.split())[:500], _mentioned_nodes(reply, node_ids)
    return ErrorCategory.DIAGNOSTIC, UNPARSED_ANALYSIS, ()


def _node_outputs(trace: ExecutionTrace) -> str:
    outs = trace.outputs()
    if not outs:
        return "(no node produced output)"
    return "\n\n".join(f"[{nid}]\n{text}" for nid, text in outs.items())


def classify_errors(
    traces: Sequence[ExecutionTrace],
    cases: Sequence[CaseRecord],
    llm: LlmClient,
    graph: WorkflowGraph | None = None,
    prompts: PromptLibrary | None = None,
    limits: ExecLimits | None = None,
) -> list[ErrorReport]:
    """One report per non-refused trace; refused cases are excluded."""
    prompts = prompts or _DEFAULT_PROMPTS
    limits = limits or ExecLimits()
    by_id = {c.case_id: c for c in cases}
    structure = structure_to_prose(graph) if graph is not None else "(structure not provided)"
    reports = []
    for t in traces:
        case = by_id[t.case_id]
        if t.refused:
            continue
        if t.status is not TraceStatus.FAILED and t.final_ranking and t.final_ranking[0] == case.label:
            reports.append(ErrorReport(t.case_id, ErrorCategory.NONE))
            continue
        node_ids = graph.node_ids if graph is not None else list(t.outputs())
        human = prompts.render(
            "analyzer",
            structure=structure,
            case_id=case.case_id,
            label=case.label,
            prediction=", ".join(t.final_ranking) or "(no ranking)",
            status=t.status.value + (f" ({t.error})" if t.error else ""),
            node_outputs=_node_outputs(t),
        )
        try:
            resp = _ask(llm, human, limits)
        except BackendFailure as exc:
            log.warning("analysis of %s failed: %s", t.case_id, exc)
            reports.append(ErrorReport(t.case_id, ErrorCategory.DIAGNOSTIC, UNPARSED_ANALYSIS))
            continue
        if resp.refused:
            reports.append(ErrorReport(t.case_id, ErrorCategory.DIAGNOSTIC, UNPARSED_ANALYSIS))
            continue
        cat, root, nodes = parse_analysis(resp.text, node_ids)
        reports.append(ErrorReport(t.case_id, cat, root, nodes))
    return reports


# ---------------------------------------------------------------------------
# Suggestions
# ---------------------------------------------------------------------------

_STRUCTURAL_HINTS = re.compile(
    r"\b(add|adding|insert|introduce|create|remove|delete|drop)\b[^.]{0,40}?\b(node|agent|step|loop|branch|critic|expert|panel)s?\b"
    r"|\b(loop|conditional|branch(?:ing)?|parallel|fan[ -]?out|round[ -]?table|reflexion|chain[ -]of[ -]thought|cmd)\b",
    re.I,
)
_PROMPT_HINTS = re.compile(r"\b(prompt|instruction|instructions|wording|rephrase|rewrite|reword)\b", re.I)
_ITEM_LINE = re.compile(r"^\s*(?:\d+[.)]|[-*•])\s*(?:\[(\w+)\]|(\w+)\s*:)?\s*(.+?)\s*$")


def _kind_tag(value: Any) -> SuggestionKind | None:
    if not isinstance(value, str):
        return None
    v = value.strip().casefold()
    if v.startswith("struct"):
        return SuggestionKind.STRUCTURAL
    if v.startswith("prompt"):
        return SuggestionKind.PROMPT
    return None


def recheck_kind(claimed: SuggestionKind | None, text: str) -> SuggestionKind:
    """Keep the model's tag unless the wording plainly says otherwise."""
    structural = bool(_STRUCTURAL_HINTS.search(text))
    prompt = bool(_PROMPT_HINTS.search(text))
    if claimed is None:
        return SuggestionKind.STRUCTURAL if structural and not prompt else SuggestionKind.PROMPT
    if claimed is SuggestionKind.PROMPT and structural and not prompt:
        return SuggestionKind.STRUCTURAL
    if claimed is SuggestionKind.STRUCTURAL and prompt and not structural:
        return SuggestionKind.PROMPT
    return claimed


def parse_suggestion_list(reply: str) -> list[tuple[SuggestionKind | None, str]]:
    obj = _extract_json(reply, "[")
    items: list[tuple[SuggestionKind | None, str]] = []
    if isinstance(obj, list):
        for it in obj:
            if isinstance(it, str) and it.strip():
                items.append((None, " ".join(it.split())))
            elif isinstance(it, dict):
                text = it.get("text") or it.get("suggestion") or it.get("description")
                if isinstance(text, str) and text.strip():
                    items.append((_kind_tag(it.get("kind") or it.get("type")), " ".join(text.split())))
        if items:
            return items
    for line in reply.splitlines():
        m = _ITEM_LINE.match(line)
        if not m:
            continue
        tag = m.group(1) or m.group(2)
        kind = _kind_tag(tag)
        text = m.group(3) if kind is not None or tag is None else f"{tag}: {m.group(3)}"
        items.append((kind, text))
    return items


def _error_summary(errors: Sequence[ErrorReport]) -> str:
    blocks = []
    for cat in (ErrorCategory.IMAGE_UNDERSTANDING, ErrorCategory.DIAGNOSTIC):
        group = [r for r in errors if r.category is cat]
        if not group:
            continue
        lines = [f"{cat.value} ({len(group)} case{'s' if len(group) != 1 else ''}):"]
        for r in group:
            nodes = f" [nodes: {', '.join(r.implicated_nodes)}]" if r.implicated_nodes else ""
            lines.append(f"- {r.case_id}: {r.root_cause}{nodes}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def generate_suggestions(
    reports: Sequence[ErrorReport],
    graph: WorkflowGraph,
    llm: LlmClient,
    max_suggestions: int = DEFAULT_MAX_SUGGESTIONS,
    tools: ToolRegistry | None = None,
    prompts: PromptLibrary | None = None,
    limits: ExecLimits | None = None,
    id_prefix: str = "s",
) -> list[Suggestion]:
    errors = [r for r in reports if r.category is not ErrorCategory.NONE]
    if not errors:
        return []
    prompts = prompts or _DEFAULT_PROMPTS
    human = prompts.render(
        "suggest",
        structure=structure_to_prose(graph),
        tools=_tool_list(tools),
        error_summary=_error_summary(errors),
        max_suggestions=max_suggestions,
    )
    try:
        resp = _ask(llm, human, limits or ExecLimits())
    except BackendFailure as exc:
        log.warning("suggestion call failed: %s", exc)
        return []
    if resp.refused:
        return []
    sources = tuple(r.case_id for r in errors)
    items = parse_suggestion_list(resp.text)[:max_suggestions]
    return [
        Suggestion(f"{id_prefix}{i}", text, recheck_kind(tag, text), sources)
        for i, (tag, text) in enumerate(items, 1)
    ]


# ---------------------------------------------------------------------------
# Feasibility filter
# ---------------------------------------------------------------------------

_IDENT = r"[A-Za-z_][\w.-]*"
_TOOL_REFS = [
    re.compile(rf"\btool(?:_name)?\s*[:=]\s*['\"`]?({_IDENT})", re.I),
    re.compile(rf"\btool\s+['\"`]({_IDENT})['\"`]", re.I),
    re.compile(rf"['\"`]({_IDENT})['\"`]\s+tool\b", re.I),
    re.compile(r"\b([A-Za-z][\w-]*_[\w-]+)\s+tool\b"),
]
_NODE_REFS = [
    re.compile(rf"\bnode(?:_id)?\s*[:=]\s*['\"`]?({_IDENT})", re.I),
    re.compile(rf"\bnode\s+['\"`]({_IDENT})['\"`]", re.I),
    re.compile(rf"['\"`]({_IDENT})['\"`]\s+node\b", re.I),
]
_CREATES = re.compile(r"\b(add|adds|adding|insert|inserting|create|creating|new|introduce|introducing)\b", re.I)


def _unknown_references(text: str, graph: WorkflowGraph, tools: ToolRegistry | None) -> str | None:
    for rx in _TOOL_REFS:
        for m in rx.finditer(text):
            name = m.group(1).rstrip(".-")
            if tools is None or name not in tools:
                return f"references unavailable tool {name!r}"
    known = set(graph.node_ids)
    for rx in _NODE_REFS:
        for m in rx.finditer(text):
            name = m.group(1).rstrip(".-")
            if name in known:
                continue
            # a node the suggestion itself is adding
            if _CREATES.search(text[max(0, m.start() - 40) : m.start()]):
                continue
            return f"references unknown node {name!r}"
    return None


def filter_suggestions(
    suggestions: Sequence[Suggestion],
    graph: WorkflowGraph,
    tools: ToolRegistry | None,
    llm: LlmClient | None = None,
    prompts: PromptLibrary | None = None,
    limits: ExecLimits | None = None,
) -> list[Suggestion]:
    """Return the suggestions with unrealistic ones re-tagged Infeasible."""
    prompts = prompts or _DEFAULT_PROMPTS
    limits = limits or ExecLimits()
    out = []
    structure = None
    for s in suggestions:
        if s.kind is SuggestionKind.INFEASIBLE:
            out.append(s)
            continue
        problem = _unknown_references(s.text, graph, tools)
        if problem is None and llm is not None:
            structure = structure or structure_to_prose(graph)
            human = prompts.render("feasibility", tools=_tool_list(tools), structure=structure, suggestion=s.text)
            try:
                resp = _ask(llm, human, limits)
                if not resp.refused and not parse_exit_reply(resp.text):
                    problem = "feasibility check answered no"
            except BackendFailure as exc:
                log.warning("feasibility check for %s failed, keeping it: %s", s.suggestion_id, exc)
        if problem is None:
            out.append(s)
        else:
            out.append(Suggestion(s.suggestion_id, s.text, SuggestionKind.INFEASIBLE, s.source_errors, problem))
    return out


# ---------------------------------------------------------------------------
# Reformulation
# ---------------------------------------------------------------------------

_OP_HINTS = [
    (OpKind.REMOVE_NODE, re.compile(r"\b(remove|delete|drop)\b", re.I)),
    (OpKind.EXPAND_FRAMEWORK, re.compile(r"\b(round[ -]?table|reflexion|reflection|chain[ -]of[ -]thought|cot|cmd|framework|panel of experts)\b", re.I)),
    (OpKind.ADD_LOOP, re.compile(r"\b(loop|iterate|iterative|repeat|until)\b", re.I)),
    (OpKind.ADD_CONDITIONAL, re.compile(r"\b(branch|conditional|route|routing|if the)\b", re.I)),
    (OpKind.ADD_PARALLEL, re.compile(r"\b(parallel|concurrent|simultaneous|fan[ -]?out)\b", re.I)),
]


def infer_op_kind(text: str) -> OpKind:
    for kind, rx in _OP_HINTS:
        if rx.search(text):
            return kind
    return OpKind.ADD_NODE


def _node_prompts(graph: WorkflowGraph) -> str:
    blocks = []
    for n in graph.nodes:
        if n.kind is NodeKind.BASIC:
            blocks.append(f"[{n.node_id}]\nsystem_prompt: {n.system_prompt}\nhuman_prompt: {n.human_prompt}")
    return "\n\n".join(blocks) or "(no LLM nodes)"


def reformulate(
    suggestion: Suggestion,
    graph: WorkflowGraph,
    llm: LlmClient,
    tools: ToolRegistry | None = None,
    prompts: PromptLibrary | None = None,
    limits: ExecLimits | None = None,
) -> WorkflowOperation:
    if suggestion.kind is SuggestionKind.INFEASIBLE:
        raise ReformulationError(f"{suggestion.suggestion_id} is infeasible")
    prompts = prompts or _DEFAULT_PROMPTS
    structure = structure_to_prose(graph)
    if suggestion.kind is SuggestionKind.PROMPT:
        human = prompts.render(
            "reformulate_prompt", structure=structure, node_prompts=_node_prompts(graph), suggestion=suggestion.text
        )
    else:
        hint = infer_op_kind(suggestion.text)
        human = prompts.render(
            "reformulate_structural",
            structure=structure,
            tools=_tool_list(tools),
            suggestion=suggestion.text,
            op_kind=hint.value,
            payload_format=prompts.payload_format(hint),
        )
    try:
        resp = _ask(llm, human, limits or ExecLimits())
    except BackendFailure as exc:
        raise ReformulationError(f"backend failure: {exc}") from exc
    if resp.refused:
        raise ReformulationError("model refused to reformulate")
    obj = _extract_json(resp.text, "{")
    if not isinstance(obj, dict):
        raise ReformulationError("reply contains no JSON object")
    if "op_kind" not in obj:
        if suggestion.kind is SuggestionKind.PROMPT and "node_id" in obj:
            obj = {"op_kind": OpKind.MODIFY_PROMPTS.value, "payload": obj}
        else:
            raise ReformulationError("reply has no op_kind")
    envelope = {"op_kind": obj["op_kind"], "payload": obj.get("payload"), "origin": Origin.SUGGESTION.value}
    try:
        op = parse_operation(envelope)
    except (IncompletePayload, ValueError, TypeError, KeyError) as exc:
        raise ReformulationError(f"invalid operation: {exc}") from exc
    is_prompt_op = op.op_kind is OpKind.MODIFY_PROMPTS
    if is_prompt_op != (suggestion.kind is SuggestionKind.PROMPT):
        raise ReformulationError(f"{suggestion.kind.value} suggestion came back as {op.op_kind.value}")
    return op


# ---------------------------------------------------------------------------
# Iterations
# ---------------------------------------------------------------------------


def _accuracy(graph: WorkflowGraph, traces: Sequence[ExecutionTrace], cases: Sequence[CaseRecord], ks) -> dict[str, float]:
    report = build_report(graph, predictions_from_traces(traces, cases), ks)
    return {f"top{k}": (v if v is not None else 0.0) for k, v in report.top_k.items()}


def checkpoint_name(iteration: int, version: int) -> str:
    return f"iter_{iteration}_v{version}.json"


def evolve_step(
    graph: WorkflowGraph,
    iteration: int,
    batch: Sequence[CaseRecord],
    val_cases: Sequence[CaseRecord],
    backends: Backends,
    cfg: EvolveConfig | None = None,
    prompts: PromptLibrary | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[WorkflowGraph, IterationRecord]:
    cfg = cfg or EvolveConfig()
    prompts = prompts or PromptLibrary(cfg.prompts_dir)
    require_valid(graph)
    limits, critic = cfg.limits, backends.critic

    traces = run_cases(graph, batch, backends.llm, backends.tools, limits, cfg.workers)
    reports = classify_errors(traces, batch, critic, graph, prompts, limits)
    suggestions = generate_suggestions(
        reports, graph, critic, cfg.max_suggestions, backends.tools, prompts, limits, id_prefix=f"it{iteration}-s"
    )
    suggestions = filter_suggestions(suggestions, graph, backends.tools, critic, prompts, limits)

    pending: list[tuple[Suggestion, WorkflowOperation]] = []
    dropped = []
    for s in suggestions:
        if s.kind is SuggestionKind.INFEASIBLE:
            continue
        try:
            pending.append((s, reformulate(s, graph, critic, backends.tools, prompts, limits)))
        except ReformulationError as exc:
            log.info("dropping %s: %s", s.suggestion_id, exc)
            dropped.append({"suggestion_id": s.suggestion_id, "reason": str(exc)})
    # prompt edits first: they cannot break a structural payload, the reverse can
    pending.sort(key=lambda p: p[1].op_kind is not OpKind.MODIFY_PROMPTS)

    current = graph
    applied, rejected = [], []
    for s, op in pending:
        try:
            current = apply_operation(current, op)
            applied.append({"suggestion_id": s.suggestion_id, "operation": op.to_dict(), "graph_version": current.version})
        except ValidationRejected as exc:
            rejected.append(
                {
                    "suggestion_id": s.suggestion_id,
                    "operation": op.to_dict(),
                    "rule_ids": exc.rule_ids,
                    "reason": "; ".join(v.message for v in exc.report.violations) or str(exc),
                }
            )
        except WorkflowError as exc:
            rejected.append(
                {"suggestion_id": s.suggestion_id, "operation": op.to_dict(), "rule_ids": [type(exc).__name__], "reason": str(exc)}
            )

    val_traces = run_cases(current, val_cases, backends.llm, backends.tools, limits, cfg.workers)
    record = IterationRecord(
        iteration=iteration,
        graph_version_before=graph.version,
        graph_version_after=current.version,
        batch_case_ids=[c.case_id for c in batch],
        error_reports=reports,
        suggestions=suggestions,
        applied_operations=applied,
        rejected_operations=rejected,
        dropped_suggestions=dropped,
        validation_accuracy=_accuracy(current, val_traces, val_cases, cfg.ks),
    )
    if checkpoint_dir is not None:
        name = checkpoint_name(iteration, current.version)
        save_graph(current, Path(checkpoint_dir) / name)
        record.checkpoint = f"checkpoints/{name}"
    return current, record


@dataclass
class EvolutionResult:
    final_graph: WorkflowGraph
    last_graph: WorkflowGraph
    best_iteration: int
    baseline_accuracy: dict[str, float]
    records: list[IterationRecord]
    baseline_version: int = 0

    def curve(self) -> list[dict[str, float]]:
        rows = [{"iteration": 0, "graph_version": self.baseline_version, **self.baseline_accuracy}]
        for r in self.records:
            rows.append({"iteration": r.iteration, "graph_version": r.graph_version_after, **r.validation_accuracy})
        return rows


def batches(train: Sequence[CaseRecord], batch_size: int | None) -> list[list[CaseRecord]]:
    size = batch_size or max(1, len(train))
    return [list(train[i : i + size]) for i in range(0, len(train), size)] or [[]]


def run_evolution(
    initial_graph: WorkflowGraph,
    train_cases: Sequence[CaseRecord],
    val_cases: Sequence[CaseRecord],
    backends: Backends,
    cfg: EvolveConfig | None = None,
    out_dir: str | Path | None = None,
) -> EvolutionResult:
    """Evolve until validation top-1 stops improving.

    The loop stops after ``window`` consecutive iterations whose top-1 gain
    over the previous iteration is below ``epsilon``, or at
    ``max_iterations``. The returned ``final_graph`` is the checkpoint with
    the best validation top-1 (earliest on ties); ``last_graph`` is the
    most recent one.
    """
    cfg = cfg or EvolveConfig()
    if not val_cases:
        raise ValueError("validation split is empty")
    require_valid(initial_graph)
    prompts = PromptLibrary(cfg.prompts_dir)
    conv = cfg.convergence

    ckpt_dir = log_fh = None
    if out_dir is not None:
        out = Path(out_dir)
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_graph(initial_graph, ckpt_dir / checkpoint_name(0, initial_graph.version))
        log_fh = open(out / "evolution_log.jsonl", "w", encoding="utf-8")

    try:
        val_traces = run_cases(initial_graph, val_cases, backends.llm, backends.tools, cfg.limits, cfg.workers)
        baseline = _accuracy(initial_graph, val_traces, val_cases, cfg.ks)
        graphs = [initial_graph]
        top1 = [baseline["top1"]]
        records: list[IterationRecord] = []
        chunks = batches(train_cases, cfg.batch_size)
        flat = 0
        graph = initial_graph
        for it in range(1, conv.max_iterations + 1):
            batch = chunks[(it - 1) % len(chunks)]
            graph, record = evolve_step(graph, it, batch, val_cases, backends, cfg, prompts, ckpt_dir)
            records.append(record)
            graphs.append(graph)
            top1.append(record.validation_accuracy["top1"])
            if log_fh is not None:
                log_fh.write(record.to_json() + "\n")
                log_fh.flush()
            log.info("iteration %d: top1=%.4f version=%d", it, top1[-1], graph.version)
            flat = flat + 1 if top1[-1] - top1[-2] < conv.epsilon else 0
            if flat >= conv.window:
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    best = max(range(len(top1)), key=lambda i: (top1[i], -i))
    result = EvolutionResult(graphs[best], graphs[-1], best, baseline, records, initial_graph.version)
    if out_dir is not None:
        write_outputs(result, Path(out_dir), cfg.ks)
    return result


def write_outputs(result: EvolutionResult, out: Path, ks: Sequence[int] = DEFAULT_KS) -> None:
    from wfevolve.plotting import plot_accuracy_curve

    rows = result.curve()
    with open(out / "accuracy_curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "graph_version", *[f"top{k}" for k in ks]])
        for r in rows:
            w.writerow([r["iteration"], r["graph_version"], *[f"{r[f'top{k}']:.6f}" for k in ks]])
    plot_accuracy_curve(rows, out / "accuracy_curve.png", ks)
    save_graph(result.final_graph, out / "best_graph.json")
    summary = {
        "best_iteration": result.best_iteration,
        "best_version": result.final_graph.version,
        "last_version": result.last_graph.version,
        "iterations_run": len(result.records),
        "curve": rows,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
