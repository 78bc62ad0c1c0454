"""Graph builders and independent oracles shared by the test suite."""

from __future__ import annotations

import hashlib
import random
import threading
import time

import numpy as np

from wfevolve import graph as g
from wfevolve.graph import EdgeKind, EdgeSpec, NodeSpec, WorkflowGraph
from wfevolve.errors import EmptyPredictionSet
from wfevolve.execution import TraceStatus
from wfevolve.llm import LlmResponse
from wfevolve.metrics import Prediction
from wfevolve.ops import add_parallel


def basic(node_id, prompt=None, name=None):
    return NodeSpec.basic(
        node_id,
        name or f"{node_id} name",
        f"{node_id} does its job",
        f"You are {node_id}.",
        prompt or f"Handle case {{{{image_ref}}}} as {node_id}.",
    )


def chain(*ids, graph_id="g"):
    nodes = tuple(basic(i) for i in ids)
    edges = tuple(EdgeSpec(a, b) for a, b in zip(ids, ids[1:]))
    return WorkflowGraph(graph_id, 0, nodes, edges, ids[0], ids[-1])


def baseline():
    return WorkflowGraph.single_node(
        NodeSpec.basic(
            "diagnoser",
            "Diagnoser",
            "Gives a ranked differential diagnosis for the case image.",
            "You are a dermatologist.",
            "Diagnose the lesion in {{image_ref}}. Rank the most likely conditions from: {{label_vocabulary}}",
        ),
        graph_id="baseline",
    )


def loopback(src, dst, n=3, cond="output is stable"):
    return EdgeSpec(src, dst, EdgeKind.LOOP_BACK, condition=cond, max_iterations=n)


def brute_force_cycles(graph):
    """All simple cycles as lists of (source, target) arcs, by plain DFS."""
    adj = {}
    for e in graph.edges:
        adj.setdefault(e.source, []).append(e.target)
    ids = graph.node_ids
    rank = {n: i for i, n in enumerate(ids)}
    cycles = []

    def dfs(start, cur, path, visited):
        for nxt in adj.get(cur, []):
            if nxt == start:
                cycles.append(list(zip(path, path[1:] + [start])))
            elif nxt not in visited and rank[nxt] > rank[start]:
                visited.add(nxt)
                dfs(start, nxt, path + [nxt], visited)
                visited.discard(nxt)

    for s in ids:
        dfs(s, s, [s], {s})
    return cycles


def reachable(graph, start, forward_only=False):
    seen, stack = {start}, [start]
    while stack:
        cur = stack.pop()
        for e in graph.edges:
            if e.source == cur and (not forward_only or e.kind is not EdgeKind.LOOP_BACK) and e.target not in seen:
                seen.add(e.target)
                stack.append(e.target)
    return seen


class HashLlm:
    """Reply is a digest of the prompt; sleeps a random amount to shuffle completion order."""

    def __init__(self, jitter=0.0, seed=0):
        self.jitter = jitter
        self.rng = random.Random(seed)
        self.lock = threading.Lock()
        self.totals = [0, 0]

    def complete(self, req):
        with self.lock:
            delay = self.rng.random() * self.jitter
        time.sleep(delay)
        digest = hashlib.sha256(req.prompt_text().encode()).hexdigest()[:10]
        resp = LlmResponse(f"out-{digest}", len(req.human_prompt), 3, "hash")
        with self.lock:
            self.totals[0] += resp.prompt_tokens
            self.totals[1] += resp.completion_tokens
        return resp


def random_parallel_graph(rng):
    gr = chain("start", "end")
    arms = [basic(f"arm{i}", f"Arm {i} on {{{{image_ref}}}}; prior {{{{start}}}}") for i in range(rng.randint(2, 4))]
    gr = add_parallel(gr, "start", arms, basic("fusion", "Fuse:\n{{parallel_inputs}}"))
    for arm in list(arms):
        last = arm.node_id
        for j in range(rng.randint(0, 2)):
            nid = f"{arm.node_id}_s{j}"
            gr = g.add_node(gr, basic(nid, f"Step {j} after {{{{{last}}}}}"), after=last)
            last = nid
        if rng.random() < 0.4:
            gr = g.add_edge(gr, loopback(last, arm.node_id, rng.randint(1, 3)))
    if rng.random() < 0.5:
        inner = [basic(f"in{i}") for i in range(2)]
        gr = add_parallel(gr, "arm0", inner, basic("in_fuse", "Inner {{parallel_inputs}}"))
    return gr


# metrics oracles ------------------------------------------------------------

METRIC_VOCAB = ["acne", "boil", "eczema", "psoriasis", "rosacea", "vitiligo"]


def pred(label, ranking, status=TraceStatus.COMPLETED, cid="c"):
    return Prediction(cid, label, tuple(ranking), status=status)


def oracle_top_k(preds, k):
    num = den = 0
    for p in preds:
        if p.status == TraceStatus.FAILED:
            continue
        den += 1
        for i, r in enumerate(p.final_ranking):
            if i >= k:
                break
            if r == p.label:
                num += 1
                break
    if den == 0:
        raise EmptyPredictionSet()
    return num / den


def oracle_majority(votes):
    tally = {}
    for v in votes:
        tally[v] = tally.get(v, 0) + 1
    winner, best = None, -1
    for v in sorted(tally, key=lambda x: (x is None, x or "")):
        if tally[v] > best:
            winner, best = v, tally[v]
    return winner


def oracle_cons(samples, n):
    hits = []
    for label, votes in samples.items():
        assert len(votes) == n
        hits.append(1 if oracle_majority(votes) == label else 0)
    return sum(hits) / len(hits)


def random_prediction_set(rng):
    out = []
    for i in range(rng.randint(1, 30)):
        label = rng.choice(METRIC_VOCAB)
        ranking = rng.sample(METRIC_VOCAB, rng.randint(0, len(METRIC_VOCAB)))
        status = rng.choice([TraceStatus.COMPLETED] * 6 + [TraceStatus.FAILED, TraceStatus.TRUNCATED])
        out.append(pred(label, ranking, status, f"c{i}"))
    return out


# search oracle ---------------------------------------------------------------


def oracle_search(vecs, ids, query, k):
    """Full sort of independently computed cosines; ties by item id."""
    sims = (vecs @ query) / (np.linalg.norm(vecs, axis=1) * np.linalg.norm(query))
    sims = np.round(sims, 12)
    return [ids[i] for i in sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))[:k]]
