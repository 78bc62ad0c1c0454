"""Exception hierarchy shared by every module."""

from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from wfevolve.graph import ValidationReport


class WorkflowError(Exception):
    """Base class for all engine errors."""


# graph-core


class InvalidNodeSpec(WorkflowError):
    pass


class InvalidEdgeSpec(WorkflowError):
    pass


class DuplicateNodeId(WorkflowError):
    pass


class NodeNotFound(WorkflowError):
    pass


class UnknownNode(WorkflowError):
    pass


class ProtectedNode(WorkflowError):
    pass


class DuplicateEdge(WorkflowError):
    pass


class CycleWithoutLoopBack(WorkflowError):
    pass


class ValidationRejected(WorkflowError):
    """A mutation would publish a graph that fails validation."""

    def __init__(self, report: ValidationReport, message: str | None = None):
        self.report = report
        rules = ", ".join(sorted({v.rule_id for v in report.violations}))
        super().__init__(message or f"validation rejected: {rules}")

    @property
    def rule_ids(self) -> list[str]:
        return [v.rule_id for v in self.report.violations]


class WouldDisconnect(ValidationRejected):
    pass


class GraphFormatError(WorkflowError):
    """Workflow JSON document is malformed or carries unknown fields."""


# ops


class IncompletePayload(WorkflowError):
    pass


class NeedDefaultBranch(WorkflowError):
    pass


class UnsupportedTemplate(WorkflowError):
    pass


class InvalidTemplate(WorkflowError):
    pass


# llm / exec


class UnresolvedPlaceholder(WorkflowError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unresolved placeholder: {name}")


class BackendFailure(WorkflowError):
    pass


class TransportError(BackendFailure):
    pass


class RateLimited(TransportError):
    pass


class MalformedResponse(BackendFailure):
    pass


class EmptyRanking(WorkflowError):
    pass


# tools


class UnknownTool(WorkflowError):
    pass


class ParamSchemaViolation(WorkflowError):
    pass


class ToolFailure(WorkflowError):
    pass


class DimensionMismatch(WorkflowError):
    pass


class ParseError(WorkflowError):
    pass


class InconsistentDimension(ParseError):
    pass


class IndexLeakage(WorkflowError):
    """Index items overlap with dataset case ids."""


# evolve


class ReformulationError(WorkflowError):
    pass


# metrics


class EmptyPredictionSet(WorkflowError):
    pass


class WrongSampleCount(WorkflowError):
    pass


# cli


class SplitOverlap(WorkflowError):
    pass


class UnknownLabel(WorkflowError):
    pass


class ConfigError(WorkflowError):
    pass
