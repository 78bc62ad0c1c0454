"""Tool registry and the built-in nearest-neighbour image search."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from wfevolve.errors import (
    DimensionMismatch,
    IndexLeakage,
    InconsistentDimension,
    ParamSchemaViolation,
    ParseError,
    ToolFailure,
    UnknownTool,
    WorkflowError,
)

DEFAULT_SEARCH_K = 5
SCORE_DECIMALS = 12

_TYPES: dict[str, tuple[type, ...]] = {
    "int": (int,),
    "float": (int, float),
    "str": (str,),
    "bool": (bool,),
}

ToolFn = Callable[[Mapping[str, Any], Mapping[str, Any]], str]


@dataclass(frozen=True)
class ToolDescriptor:
    tool_name: str
    description: str
    param_schema: Mapping[str, str] = field(default_factory=dict)
    required: tuple[str, ...] = ()

    def check_params(self, params: Mapping[str, Any]) -> None:
        for name in self.required:
            if name not in params:
                raise ParamSchemaViolation(f"{self.tool_name}: missing parameter {name!r}")
        for name, value in params.items():
            if name not in self.param_schema:
                raise ParamSchemaViolation(f"{self.tool_name}: unknown parameter {name!r}")
            expected = _TYPES[self.param_schema[name]]
            if isinstance(value, bool) and bool not in expected:
                raise ParamSchemaViolation(f"{self.tool_name}: {name} must be {self.param_schema[name]}")
            if not isinstance(value, expected):
                raise ParamSchemaViolation(f"{self.tool_name}: {name} must be {self.param_schema[name]}")


class ToolRegistry:
    """Name -> (descriptor, callable). Populate at startup, read-only after."""

    def __init__(self) -> None:
        self._tools: dict[str, tuple[ToolDescriptor, ToolFn]] = {}

    def register(self, descriptor: ToolDescriptor, fn: ToolFn) -> None:
        if descriptor.tool_name in self._tools:
            raise ValueError(f"tool {descriptor.tool_name!r} already registered")
        self._tools[descriptor.tool_name] = (descriptor, fn)

    def __contains__(self, name: object) -> bool:
        return name in self._tools

    @property
    def names(self) -> list[str]:
        return sorted(self._tools)

    def descriptors(self) -> list[ToolDescriptor]:
        return [self._tools[n][0] for n in self.names]

    def invoke(self, tool_name: str, params: Mapping[str, Any], ctx: Mapping[str, Any]) -> str:
        if tool_name not in self._tools:
            raise UnknownTool(tool_name)
        descriptor, fn = self._tools[tool_name]
        descriptor.check_params(params)
        try:
            return str(fn(params, ctx))
        except ToolFailure:
            raise
        except (WorkflowError, ValueError, KeyError, TypeError, OSError) as exc:
            raise ToolFailure(f"{tool_name}: {exc}") from exc


# ---------------------------------------------------------------------------
# Embedding index
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hit:
    item_id: str
    label: str
    score: float


class EmbeddingIndex:
    """Exact cosine-similarity index over unit-normalised vectors."""

    def __init__(self, item_ids: Sequence[str], labels: Sequence[str], vectors: np.ndarray) -> None:
        if len(set(item_ids)) != len(item_ids):
            raise ParseError("duplicate item_id in index")
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(item_ids) or len(labels) != len(item_ids):
            raise ParseError("index arrays are misaligned")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0) or not np.all(np.isfinite(norms)):
            bad = [item_ids[i] for i in np.flatnonzero((norms == 0) | ~np.isfinite(norms))]
            raise ParseError(f"cannot normalise vector(s): {', '.join(bad)}")
        self.item_ids = list(item_ids)
        self.labels = list(labels)
        self.vectors = vectors / norms[:, None]
        self.vectors.setflags(write=False)
        self._ids = np.array(self.item_ids)

    @classmethod
    def from_entries(cls, entries: Iterable[Mapping[str, Any]]) -> EmbeddingIndex:
        ids, labels, vecs = [], [], []
        dim = None
        for i, e in enumerate(entries):
            try:
                vec = [float(x) for x in e["vector"]]
                ids.append(str(e["item_id"]))
                labels.append(str(e["label"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"entry {i}: {exc}") from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise InconsistentDimension(f"entry {i} ({ids[-1]}) has dimension {len(vec)}, expected {dim}")
            vecs.append(vec)
        if dim is None or dim == 0:
            raise ParseError("index has no entries")
        return cls(ids, labels, np.array(vecs))

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.item_ids)

    def entries(self) -> list[dict[str, Any]]:
        return [
            {"item_id": i, "label": lab, "vector": v.tolist()}
            for i, lab, v in zip(self.item_ids, self.labels, self.vectors)
        ]


def search(index: EmbeddingIndex, query: Sequence[float], k: int) -> list[Hit]:
    """Exact top-k by cosine similarity; ties go to the smaller item_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != index.dimension:
        raise DimensionMismatch(f"query has dimension {q.shape[-1] if q.ndim else 0}, index has {index.dimension}")
    norm = np.linalg.norm(q)
    if norm == 0:
        raise DimensionMismatch("query vector is zero")
    scores = np.clip(index.vectors @ (q / norm), -1.0, 1.0)
    # BLAS may score identical rows a few ulps apart; quantise so equal vectors tie
    scores = np.round(scores, SCORE_DECIMALS)
    order = np.lexsort((index._ids, -scores))[:k]
    return [Hit(index.item_ids[i], index.labels[i], float(scores[i])) for i in order]


def load_index(path: str | os.PathLike) -> EmbeddingIndex:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return EmbeddingIndex.from_entries(entries)


def save_index(index: EmbeddingIndex, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in index.entries():
            fh.write(json.dumps(e) + "\n")


def check_disjoint(index: EmbeddingIndex, case_ids: Iterable[str]) -> None:
    overlap = sorted(set(index.item_ids) & set(case_ids))
    if overlap:
        raise IndexLeakage("index items also appear as dataset cases: " + ", ".join(overlap[:10]))


def format_hits(hits: Sequence[Hit]) -> str:
    return "\n".join(f"{i}. {h.label} (similarity={h.score:.3f})" for i, h in enumerate(hits, 1))


class ImageSearchTool:
    """Tool callable: retrieve labelled neighbours of the case's query vector.

    The query vector comes from ``ctx["query_vector"]`` (precomputed in the
    manifest) or, failing that, from ``embedder(ctx["image_ref"])``.
    """

    descriptor = ToolDescriptor(
        "image_search",
        "Retrieve the top-k most similar reference images with their diagnosis labels.",
        {"k": "int"},
    )

    def __init__(
        self,
        index: EmbeddingIndex,
        default_k: int = DEFAULT_SEARCH_K,
        embedder: Callable[[str], Sequence[float]] | None = None,
    ) -> None:
        self.index = index
        self.default_k = default_k
        self.embedder = embedder

    def __call__(self, params: Mapping[str, Any], ctx: Mapping[str, Any]) -> str:
        k = params.get("k", self.default_k)
        if k < 1:
            raise ToolFailure("k must be >= 1")
        query = ctx.get("query_vector")
        if query is None and self.embedder is not None:
            query = self.embedder(ctx["image_ref"])
        if query is None:
            raise ToolFailure("no query vector for this case")
        return format_hits(search(self.index, query, k))


def default_registry(
    index: EmbeddingIndex | None = None,
    k: int = DEFAULT_SEARCH_K,
    embedder: Callable[[str], Sequence[float]] | None = None,
) -> ToolRegistry:
    reg = ToolRegistry()
    if index is not None:
        tool = ImageSearchTool(index, k, embedder)
        reg.register(tool.descriptor, tool)
    return reg

