import json
import math

import numpy as np
import pytest

from helpers import oracle_search
from wfevolve.errors import (
    DimensionMismatch,
    IndexLeakage,
    InconsistentDimension,
    ParamSchemaViolation,
    ParseError,
    ToolFailure,
    UnknownTool,
)
from wfevolve.tools import (
    EmbeddingIndex,
    ImageSearchTool,
    ToolDescriptor,
    ToolRegistry,
    check_disjoint,
    default_registry,
    load_index,
    save_index,
    search,
)


def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def brute_force(entries, query, k):
    scored = [(-cosine(e["vector"], query), e["item_id"]) for e in entries]
    return [item for _, item in sorted(scored)[:k]]


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


FIXTURE = [
    {"item_id": "ref1", "label": "Psoriasis", "vector": [1, 0, 0, 0]},
    {"item_id": "ref2", "label": "Eczema", "vector": [0, 2, 0, 0]},
    {"item_id": "ref3", "label": "Acne", "vector": [1, 1, 0, 0]},
]


def test_load_fixture(tmp_path):
    p = tmp_path / "idx.jsonl"
    write_jsonl(p, FIXTURE)
    idx = load_index(p)
    assert idx.dimension == 4 and len(idx) == 3
    assert np.allclose(np.linalg.norm(idx.vectors, axis=1), 1.0)


def test_load_mixed_dimensions(tmp_path):
    p = tmp_path / "idx.jsonl"
    write_jsonl(p, FIXTURE + [{"item_id": "x", "label": "Acne", "vector": [1, 2, 3, 4, 5]}])
    with pytest.raises(InconsistentDimension):
        load_index(p)


def test_zero_vector_rejected():
    with pytest.raises(ParseError):
        EmbeddingIndex.from_entries([{"item_id": "z", "label": "Acne", "vector": [0, 0, 0]}])


def test_normalisation_idempotent(tmp_path):
    idx = EmbeddingIndex.from_entries(FIXTURE)
    p = tmp_path / "canon.jsonl"
    save_index(idx, p)
    again = load_index(p)
    assert np.max(np.abs(again.vectors - idx.vectors)) <= 1e-9


def test_self_query_and_ties():
    idx = EmbeddingIndex.from_entries(
        [
            {"item_id": "b", "label": "Acne", "vector": [1, 1]},
            {"item_id": "a", "label": "Acne", "vector": [2, 2]},
            {"item_id": "c", "label": "Eczema", "vector": [1, -1]},
        ]
    )
    hits = search(idx, [1, 1], 3)
    assert [h.item_id for h in hits] == ["a", "b", "c"]
    assert abs(hits[0].score - 1.0) <= 1e-6


def test_search_errors():
    idx = EmbeddingIndex.from_entries(FIXTURE)
    with pytest.raises(DimensionMismatch):
        search(idx, [1, 0, 0], 2)
    with pytest.raises(ValueError):
        search(idx, [1, 0, 0, 0], 0)


def test_ten_entry_brute_force():
    rng = np.random.default_rng(3)
    entries = [{"item_id": f"i{j}", "label": "L", "vector": rng.normal(size=6).tolist()} for j in range(10)]
    q = rng.normal(size=6).tolist()
    assert [h.item_id for h in search(EmbeddingIndex.from_entries(entries), q, 3)] == brute_force(entries, q, 3)


def test_search_matches_brute_force_random_indices():
    rng = np.random.default_rng(42)
    for trial in range(200):
        dim = (4, 64, 768)[trial % 3]
        n = int(rng.integers(1, 10_001 if dim == 4 else 2_000))
        vecs = rng.normal(size=(n, dim))
        if trial % 5 == 0:
            # force exact ties by duplicating rows
            vecs[n // 2 :] = vecs[: n - n // 2]
        ids = [f"item{j:05d}" for j in rng.permutation(n)]
        idx = EmbeddingIndex(ids, ["L"] * n, vecs)
        q = rng.normal(size=dim)
        k = int(rng.integers(1, 12))
        got = search(idx, q, k)
        assert [h.item_id for h in got] == oracle_search(vecs, ids, q, k)
        assert all(a.score >= b.score for a, b in zip(got, got[1:]))
        self_hit = search(idx, vecs[0], 1)[0]
        assert abs(self_hit.score - 1.0) <= 1e-6


def test_registry_invoke_errors():
    reg = ToolRegistry()
    reg.register(ToolDescriptor("echo", "echo", {"n": "int"}, ("n",)), lambda p, ctx: "x" * p["n"])
    assert reg.invoke("echo", {"n": 2}, {}) == "xx"
    with pytest.raises(UnknownTool):
        reg.invoke("nope", {}, {})
    with pytest.raises(ParamSchemaViolation):
        reg.invoke("echo", {}, {})
    with pytest.raises(ParamSchemaViolation):
        reg.invoke("echo", {"n": "2"}, {})
    with pytest.raises(ParamSchemaViolation):
        reg.invoke("echo", {"n": True}, {})
    with pytest.raises(ValueError):
        reg.register(ToolDescriptor("echo", "dup"), lambda p, c: "")


def test_registry_wraps_failures():
    reg = ToolRegistry()
    reg.register(ToolDescriptor("bad", "fails"), lambda p, ctx: ctx["missing"])
    with pytest.raises(ToolFailure):
        reg.invoke("bad", {}, {})


def test_image_search_tool_text():
    reg = default_registry(EmbeddingIndex.from_entries(FIXTURE))
    text = reg.invoke("image_search", {"k": 2}, {"query_vector": [1, 0, 0, 0]})
    assert text == "1. Psoriasis (similarity=1.000)\n2. Acne (similarity=0.707)"


def test_image_search_default_k_and_oversized_k():
    entries = [{"item_id": f"r{i}", "label": f"L{i}", "vector": [1, i + 1]} for i in range(7)]
    tool = ImageSearchTool(EmbeddingIndex.from_entries(entries))
    assert len(tool({}, {"query_vector": [1, 1]}).splitlines()) == 5
    assert len(tool({"k": 50}, {"query_vector": [1, 1]}).splitlines()) == 7


def test_image_search_embedder_and_missing_query():
    idx = EmbeddingIndex.from_entries(FIXTURE)
    tool = ImageSearchTool(idx, embedder=lambda ref: [0, 1, 0, 0])
    assert tool({"k": 1}, {"image_ref": "x.png"}).startswith("1. Eczema")
    with pytest.raises(ToolFailure):
        ImageSearchTool(idx)({}, {"image_ref": "x.png"})


def test_leakage_check():
    idx = EmbeddingIndex.from_entries(FIXTURE)
    check_disjoint(idx, ["case1", "case2"])
    with pytest.raises(IndexLeakage):
        check_disjoint(idx, ["case1", "ref2"])
