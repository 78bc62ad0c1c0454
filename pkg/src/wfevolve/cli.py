"""``wfevolve`` command line.

Exit codes:

    0  success
    1  workflow failed validation
    2  usage or configuration error
    3  bad input data (graph, manifest, index or script files)
    4  model backend failure (``run`` case failed on it, or ``eval`` every case did)
    5  any other runtime error, including a ``run`` case that failed for another reason
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from wfevolve import __version__
from wfevolve.config import LlmConfig, RunConfig, load_config
from wfevolve.errors import (
    BackendFailure,
    ConfigError,
    DimensionMismatch,
    GraphFormatError,
    IndexLeakage,
    ParseError,
    SplitOverlap,
    UnknownLabel,
    ValidationRejected,
    WorkflowError,
)
from wfevolve.evolve import Backends, baseline_workflow, run_evolution
from wfevolve.execution import TraceStatus, execute
from wfevolve.graph import load_graph, validate_graph
from wfevolve.manifest import SPLITS, DatasetManifest, load_manifest
from wfevolve.mermaid import to_mermaid
from wfevolve.metrics import build_report, predictions_from_traces, run_cases
from wfevolve.plotting import plot_topk
from wfevolve.tools import ToolRegistry, check_disjoint, default_registry, load_index, save_index, search

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_BACKEND = 4
EXIT_RUNTIME = 5


class UsageError(Exception):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ValidationRejected):
        return EXIT_INVALID
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, (ParseError, GraphFormatError, SplitOverlap, UnknownLabel, IndexLeakage, DimensionMismatch, OSError)):
        return EXIT_DATA
    if isinstance(exc, BackendFailure):
        return EXIT_BACKEND
    if isinstance(exc, ValueError) and not isinstance(exc, WorkflowError):
        return EXIT_USAGE
    return EXIT_RUNTIME


def _backend_names() -> set[str]:
    names, todo = set(), [BackendFailure]
    while todo:
        cls = todo.pop()
        names.add(cls.__name__)
        todo.extend(cls.__subclasses__())
    return names


def _backend_failed(trace) -> bool:
    return trace.status is TraceStatus.FAILED and (trace.error or "").split(":", 1)[0] in _backend_names()


def _emit(args: argparse.Namespace, data: Any, text: str) -> None:
    if args.json:
        sys.stdout.write(json.dumps(data, indent=2, ensure_ascii=False) + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


# ---------------------------------------------------------------------------
# shared wiring
# ---------------------------------------------------------------------------


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    script = getattr(args, "mock_script", None)
    if script:
        if not Path(script).is_file():
            raise UsageError(f"mock script not found: {script}")
        cfg = replace(cfg, llm=LlmConfig(script=Path(script)))
    return cfg.with_seed(args.seed)


def _tools(cfg: RunConfig, manifest: DatasetManifest | None = None) -> ToolRegistry:
    if cfg.index is None:
        return ToolRegistry()
    index = load_index(cfg.index)
    if manifest is not None:
        check_disjoint(index, manifest.cases)
    return default_registry(index, cfg.search_k)


def _manifest(cases: str | Path, splits: str | Path | None) -> DatasetManifest:
    cases = Path(cases)
    return load_manifest(cases, splits or cases.parent / "splits.json")


def _require_llm(cfg: RunConfig) -> None:
    if cfg.llm.backend == "mock" and cfg.llm.script is None:
        raise UsageError("no model backend: pass --config with an [llm] section or --mock-script")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_validate(args: argparse.Namespace) -> int:
    report = validate_graph(load_graph(args.workflow))
    lines = ["ok" if report.ok else f"invalid: {len(report.violations)} violation(s)"]
    lines += [f"  {v.rule_id}: {v.message}" for v in report.violations]
    _emit(args, report.to_dict(), "\n".join(lines))
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    _require_llm(cfg)
    manifest = _manifest(args.cases or cfg.manifest or _missing("--cases"), args.splits or cfg.splits)
    if args.case not in manifest.cases:
        raise UsageError(f"unknown case {args.case!r}")
    graph = load_graph(args.graph)
    trace = execute(graph, manifest.cases[args.case], cfg.llm.build(), _tools(cfg, manifest), cfg.limits)
    lines = [
        f"case {trace.case_id}  graph v{trace.graph_version}  status {trace.status.value}",
        f"ranking: {', '.join(trace.final_ranking) or '(none)'}",
        f"tokens: {trace.prompt_tokens} prompt, {trace.completion_tokens} completion",
    ]
    if trace.error:
        lines.append(f"error: {trace.error}")
    for i, s in enumerate(trace.steps, 1):
        lines.append(f"  {i:>2}. {s.node_id} [{s.kind}] {s.prompt_tokens}+{s.completion_tokens} tok")
    _emit(args, trace.to_dict(include_wall_time=args.timings), "\n".join(lines))
    if trace.status is TraceStatus.FAILED and not trace.refused:
        return EXIT_BACKEND if _backend_failed(trace) else EXIT_RUNTIME
    return EXIT_OK


def _missing(flag: str):
    raise UsageError(f"{flag} is required (or set it in the config)")


def _write_eval_outputs(out: Path, report, traces, cases) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    with open(out / "per_case.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "label", "status", "refused", "top1", "rank_of_label", "prompt_tokens", "completion_tokens"])
        labels = {c.case_id: c.label for c in cases}
        for t in traces:
            label = labels[t.case_id]
            rank = t.final_ranking.index(label) + 1 if label in t.final_ranking else ""
            top1 = t.final_ranking[0] if t.final_ranking else ""
            w.writerow([t.case_id, label, t.status.value, int(t.refused), top1, rank, t.prompt_tokens, t.completion_tokens])
    with open(out / "top_k.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "accuracy"])
        for k, v in report.top_k.items():
            w.writerow([k, "" if v is None else f"{v:.6f}"])
    plot_topk(report.top_k, out / "top_k.png")


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args)
    _require_llm(cfg)
    manifest = _manifest(args.cases or cfg.manifest or _missing("--cases"), args.splits or cfg.splits)
    cases = manifest.split(args.split)
    if not cases:
        raise UsageError(f"split {args.split!r} is empty")
    graph = load_graph(args.graph)
    traces = run_cases(graph, cases, cfg.llm.build(), _tools(cfg, manifest), cfg.limits, cfg.workers)
    report = build_report(graph, predictions_from_traces(traces, cases), cfg.ks, args.cons_n or cfg.cons_n)
    if args.out:
        _write_eval_outputs(Path(args.out), report, traces, cases)
    sys.stdout.write(report.to_json())
    if all(_backend_failed(t) for t in traces):
        return EXIT_BACKEND
    return EXIT_OK


def cmd_evolve(args: argparse.Namespace) -> int:
    cfg = _config(args)
    _require_llm(cfg)
    if cfg.manifest is None:
        raise UsageError("config needs data.manifest")
    out = Path(args.out) if args.out else cfg.out_dir
    if out is None:
        raise UsageError("no output directory: set data.out_dir or pass --out")
    manifest = _manifest(cfg.manifest, cfg.splits)
    graph = load_graph(cfg.initial_graph) if cfg.initial_graph else baseline_workflow()
    llm = cfg.llm.build()
    backends = Backends(llm, _tools(cfg, manifest), cfg.analyzer.build() if cfg.analyzer else None)
    result = run_evolution(graph, manifest.split("train"), manifest.split("val"), backends, cfg.evolve_config(), out)
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    lines = [f"{'iter':>4} {'version':>7} " + " ".join(f"{'top' + str(k):>6}" for k in cfg.ks)]
    for row in result.curve():
        lines.append(f"{row['iteration']:>4} {row['graph_version']:>7} " + " ".join(f"{row[f'top{k}']:>6.3f}" for k in cfg.ks))
    lines.append(f"best: iteration {result.best_iteration} (v{result.final_graph.version}) -> {out / 'best_graph.json'}")
    _emit(args, summary, "\n".join(lines))
    return EXIT_OK


def cmd_export_mermaid(args: argparse.Namespace) -> int:
    doc = to_mermaid(load_graph(args.inp))
    if args.out:
        Path(args.out).write_text(doc.code, encoding="utf-8")
    else:
        sys.stdout.write(doc.code)
    return EXIT_OK


def cmd_index_build(args: argparse.Namespace) -> int:
    index = load_index(args.inp)
    save_index(index, args.out)
    _emit(args, {"entries": len(index), "dimension": index.dimension}, f"{len(index)} entries, dimension {index.dimension}")
    return EXIT_OK


def cmd_index_query(args: argparse.Namespace) -> int:
    index = load_index(args.index)
    if args.vector:
        try:
            query = [float(x) for x in args.vector.split(",")]
        except ValueError:
            raise UsageError("--vector must be comma-separated numbers") from None
    else:
        if not args.cases:
            raise UsageError("--case needs --cases")
        manifest = _manifest(args.cases, args.splits)
        case = manifest.cases.get(args.case)
        if case is None or case.query_vector is None:
            raise UsageError(f"case {args.case!r} has no query_vector")
        query = case.query_vector
    hits = search(index, query, args.k)
    data = [{"rank": i, "item_id": h.item_id, "label": h.label, "score": h.score} for i, h in enumerate(hits, 1)]
    text = "\n".join(f"{d['rank']}. {d['item_id']} {d['label']} {d['score']:.6f}" for d in data)
    _emit(args, data, text)
    return EXIT_OK


def cmd_manifest(args: argparse.Namespace) -> int:
    manifest = _manifest(args.cases, args.splits)
    s = manifest.summary()
    lines = [f"{s['cases']} cases, {len(manifest.label_vocabulary)} labels"]
    for name, info in s["splits"].items():
        per = ", ".join(f"{k}={v}" for k, v in info["per_class"].items())
        lines.append(f"  {name}: {info['size']} ({per})")
    _emit(args, s, "\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output and errors")
    common.add_argument("--seed", type=int, help="seed passed to every model request")
    common.add_argument("-v", "--verbose", action="count", default=0)

    backend = argparse.ArgumentParser(add_help=False)
    backend.add_argument("--config", help="TOML run configuration")
    backend.add_argument("--mock-script", help="use a scripted mock backend instead of [llm]")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--cases", help="JSONL case manifest")
    data.add_argument("--splits", help="split file (default: splits.json next to the manifest)")

    p = argparse.ArgumentParser(prog="wfevolve", description="Validate, run, evaluate and evolve diagnostic workflows.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", parents=[common], help="check a workflow file")
    s.add_argument("workflow")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("run", parents=[common, backend, data], help="execute one case")
    s.add_argument("--graph", required=True)
    s.add_argument("--case", required=True)
    s.add_argument("--timings", action="store_true", help="include wall times in --json output")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("evolve", parents=[common, backend], help="run the evolution loop")
    s.add_argument("--out", help="output directory (overrides data.out_dir)")
    s.set_defaults(func=cmd_evolve)

    s = sub.add_parser("eval", parents=[common, backend, data], help="evaluate a workflow on a split")
    s.add_argument("--graph", required=True)
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--cons-n", type=int)
    s.add_argument("--out", help="also write report.json, CSV tables and a top-k plot here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-mermaid", parents=[common], help="write a workflow as Mermaid")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_export_mermaid)

    s = sub.add_parser("manifest", parents=[common, data], help="summarise a dataset manifest")
    s.set_defaults(func=cmd_manifest)

    idx = sub.add_parser("index", help="reference image index")
    isub = idx.add_subparsers(dest="index_command", required=True)
    s = isub.add_parser("build", parents=[common], help="validate and normalise an entries file")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_index_build)
    s = isub.add_parser("query", parents=[common, data], help="nearest neighbours of a vector or case")
    s.add_argument("--index", required=True)
    q = s.add_mutually_exclusive_group(required=True)
    q.add_argument("--vector")
    q.add_argument("--case")
    s.add_argument("-k", type=int, default=5)
    s.set_defaults(func=cmd_index_query)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (WorkflowError, UsageError, OSError, ValueError) as exc:
        code = exit_code_for(exc)
        if args.json:
            err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
            if isinstance(exc, ValidationRejected):
                err["rule_ids"] = exc.rule_ids
            sys.stderr.write(json.dumps(err) + "\n")
        else:
            sys.stderr.write(f"wfevolve: {type(exc).__name__}: {exc}\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
