"""Accuracy, consensus and cost accounting over executed cases.

Failed traces (refusals included) are left out of every accuracy
denominator; the raw counts in :class:`EvaluationReport` keep them visible.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from wfevolve.errors import EmptyPredictionSet, WrongSampleCount
from wfevolve.execution import CaseRecord, ExecLimits, ExecutionTrace, TraceStatus, execute
from wfevolve.graph import WorkflowGraph, graph_stats
from wfevolve.llm import LlmClient
from wfevolve.tools import ToolRegistry

DEFAULT_KS = (1, 3, 5)


@dataclass(frozen=True)
class Prediction:
    case_id: str
    label: str
    final_ranking: tuple[str, ...]
    prompt_tokens: int = 0
    completion_tokens: int = 0
    status: TraceStatus = TraceStatus.COMPLETED
    refused: bool = False

    @property
    def scored(self) -> bool:
        return self.status is not TraceStatus.FAILED

    @property
    def top1(self) -> str | None:
        return self.final_ranking[0] if self.final_ranking else None


def predictions_from_traces(traces: Sequence[ExecutionTrace], cases: Sequence[CaseRecord]) -> list[Prediction]:
    by_id = {c.case_id: c for c in cases}
    out = []
    for t in traces:
        case = by_id[t.case_id]
        out.append(
            Prediction(
                t.case_id, case.label, tuple(t.final_ranking), t.prompt_tokens, t.completion_tokens, t.status, t.refused
            )
        )
    return out


def top_k_accuracy(preds: Iterable[Prediction], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = [p for p in preds if p.scored]
    if not scored:
        raise EmptyPredictionSet("no scorable predictions")
    return sum(p.label in p.final_ranking[:k] for p in scored) / len(scored)


def per_class_top1(preds: Iterable[Prediction]) -> dict[str, float]:
    hits: dict[str, list[bool]] = defaultdict(list)
    for p in preds:
        if p.scored:
            hits[p.label].append(p.top1 == p.label)
    return {label: sum(v) / len(v) for label, v in sorted(hits.items())}


@dataclass(frozen=True)
class Consensus:
    n: int
    per_class: dict[str, int]
    majority: dict[str, str | None]
    aggregate: float

    def to_dict(self) -> dict[str, Any]:
        return {"n": self.n, "per_class": self.per_class, "majority": self.majority, "aggregate": self.aggregate}


def majority_vote(votes: Sequence[str | None]) -> str | None:
    """Most frequent prediction; ties go to the smallest label, and a missing
    prediction only wins when it strictly outnumbers every label."""
    counts = Counter(votes)
    best = max(counts.values())
    labels = sorted(v for v, c in counts.items() if c == best and v is not None)
    return labels[0] if labels else None


def cons_at_n(samples_per_class: Mapping[str, Sequence[str | None]], n: int) -> Consensus:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not samples_per_class:
        raise EmptyPredictionSet("no classes to score")
    per_class, majority = {}, {}
    for label in sorted(samples_per_class):
        votes = samples_per_class[label]
        if len(votes) != n:
            raise WrongSampleCount(f"class {label!r} has {len(votes)} samples, expected {n}")
        majority[label] = majority_vote(votes)
        per_class[label] = int(majority[label] == label)
    return Consensus(n, per_class, majority, sum(per_class.values()) / len(per_class))


@dataclass
class EvaluationReport:
    top_k: dict[int, float | None]
    per_class_top1: dict[str, float]
    cons_at_n: Consensus | None
    cost: dict[str, float]
    counts: dict[str, int]
    notes: list[str] = field(default_factory=list)

    @property
    def top1(self) -> float:
        return self.top_k.get(1) or 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "top_k": {str(k): v for k, v in self.top_k.items()},
            "per_class_top1": self.per_class_top1,
            "cons_at_n": self.cons_at_n.to_dict() if self.cons_at_n else None,
            "cost": self.cost,
            "counts": self.counts,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def run_cases(
    graph: WorkflowGraph,
    cases: Sequence[CaseRecord],
    llm: LlmClient,
    tools: ToolRegistry | None = None,
    limits: ExecLimits | None = None,
    workers: int = 1,
) -> list[ExecutionTrace]:
    """Execute every case; results keep the order of ``cases``."""
    if workers > 1 and len(cases) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda c: execute(graph, c, llm, tools, limits), cases))
    return [execute(graph, c, llm, tools, limits) for c in cases]


def build_report(
    graph: WorkflowGraph,
    preds: Sequence[Prediction],
    ks: Sequence[int] = DEFAULT_KS,
    cons_n: int | None = None,
) -> EvaluationReport:
    if not preds:
        raise EmptyPredictionSet("no cases were evaluated")
    notes = []
    scored = [p for p in preds if p.scored]
    top_k: dict[int, float | None] = {}
    for k in ks:
        top_k[k] = top_k_accuracy(scored, k) if scored else None
    if not scored:
        notes.append("every case failed; accuracies are undefined")

    votes: dict[str, list[str | None]] = defaultdict(list)
    for p in preds:
        votes[p.label].append(p.top1 if p.scored else None)
    sizes = {len(v) for v in votes.values()}
    n = cons_n if cons_n is not None else (sizes.pop() if len(sizes) == 1 else None)
    consensus = None
    if n is None:
        notes.append("cons@n skipped: classes have different sample counts")
    else:
        try:
            consensus = cons_at_n(votes, n)
        except WrongSampleCount as exc:
            notes.append(f"cons@n skipped: {exc}")

    stats = graph_stats(graph)
    total = len(preds)
    cost = {
        "mean_prompt_tokens": sum(p.prompt_tokens for p in preds) / total,
        "mean_completion_tokens": sum(p.completion_tokens for p in preds) / total,
        "mean_total_tokens": sum(p.prompt_tokens + p.completion_tokens for p in preds) / total,
        **stats,
    }
    counts = {
        "cases": total,
        "scored": len(scored),
        "failed": sum(p.status is TraceStatus.FAILED for p in preds),
        "refused": sum(p.refused for p in preds),
        "truncated": sum(p.status is TraceStatus.TRUNCATED for p in preds),
    }
    return EvaluationReport(top_k, per_class_top1(preds), consensus, cost, counts, notes)


def evaluate(
    graph: WorkflowGraph,
    cases: Sequence[CaseRecord],
    llm: LlmClient,
    tools: ToolRegistry | None = None,
    limits: ExecLimits | None = None,
    ks: Sequence[int] = DEFAULT_KS,
    cons_n: int | None = None,
    workers: int = 1,
) -> tuple[EvaluationReport, list[ExecutionTrace]]:
    if not cases:
        raise EmptyPredictionSet("no cases to evaluate")
    traces = run_cases(graph, cases, llm, tools, limits, workers)
    return build_report(graph, predictions_from_traces(traces, cases), ks, cons_n), traces
