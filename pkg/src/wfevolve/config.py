"""Run configuration (TOML).

Every section and key is optional; unknown sections or keys are errors.
Relative paths resolve against the config file's directory. Secrets never
live in the file: ``api_key_env`` names the environment variable holding
the key.

    [llm]                      # workflow backend
    backend = "http"           # or "mock"
    endpoint_url = "https://.../v1/chat/completions"
    model_id = "gpt-4o"
    api_key_env = "OPENAI_API_KEY"
    max_in_flight = 4
    timeout_seconds = 60
    # script = "mock.json"     # backend = "mock"

    [analyzer]                 # same keys as [llm]; defaults to [llm]

    [tools]
    index = "refs.jsonl"
    k = 5

    [limits]
    max_total_steps = 64
    retries = 2
    backoff_seconds = 0.5
    concurrent_arms = false
    temperature = 1.0
    seed = 42

    [convergence]
    epsilon = 0.01
    window = 2
    max_iterations = 10

    [evolve]
    batch_size = 10
    max_suggestions = 4
    workers = 4
    prompts_dir = "prompts"

    [eval]
    ks = [1, 3, 5]
    cons_n = 20

    [data]
    manifest = "cases.jsonl"
    splits = "splits.json"
    initial_graph = "baseline.json"   # optional
    out_dir = "runs/exp1"
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from wfevolve.errors import ConfigError, ParseError
from wfevolve.evolve import ConvergenceConfig, EvolveConfig
from wfevolve.execution import ExecLimits
from wfevolve.llm import HttpLlm, LlmClient, MockLlm, MockScript
from wfevolve.metrics import DEFAULT_KS
from wfevolve.tools import DEFAULT_SEARCH_K

_NUM = (int, float)

_SCHEMA: dict[str, dict[str, type | tuple[type, ...]]] = {
    "llm": {
        "backend": str,
        "endpoint_url": str,
        "model_id": str,
        "api_key_env": str,
        "max_in_flight": int,
        "timeout_seconds": _NUM,
        "script": str,
    },
    "tools": {"index": str, "k": int},
    "limits": {
        "max_total_steps": int,
        "timeout_seconds": _NUM,
        "retries": int,
        "backoff_seconds": _NUM,
        "concurrent_arms": bool,
        "temperature": _NUM,
        "seed": int,
    },
    "convergence": {"epsilon": _NUM, "window": int, "max_iterations": int},
    "evolve": {"batch_size": int, "max_suggestions": int, "workers": int, "prompts_dir": str},
    "eval": {"ks": list, "cons_n": int},
    "data": {"manifest": str, "splits": str, "initial_graph": str, "out_dir": str},
}
_SCHEMA["analyzer"] = _SCHEMA["llm"]


@dataclass(frozen=True)
class LlmConfig:
    backend: str = "mock"
    endpoint_url: str | None = None
    model_id: str = "mock"
    api_key_env: str | None = None
    max_in_flight: int = 4
    timeout_seconds: float = 60.0
    script: Path | None = None

    def build(self) -> LlmClient:
        if self.backend == "mock":
            try:
                script = MockScript.load(self.script) if self.script else MockScript()
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"mock script {self.script}: {exc}") from None
            return MockLlm(script, self.model_id)
        key = os.environ.get(self.api_key_env) if self.api_key_env else None
        return HttpLlm(self.endpoint_url, self.model_id, key, self.timeout_seconds, self.max_in_flight)


@dataclass(frozen=True)
class RunConfig:
    llm: LlmConfig = field(default_factory=LlmConfig)
    analyzer: LlmConfig | None = None
    index: Path | None = None
    search_k: int = DEFAULT_SEARCH_K
    limits: ExecLimits = field(default_factory=ExecLimits)
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    batch_size: int | None = None
    max_suggestions: int = 4
    workers: int = 1
    prompts_dir: Path | None = None
    ks: tuple[int, ...] = DEFAULT_KS
    cons_n: int | None = None
    manifest: Path | None = None
    splits: Path | None = None
    initial_graph: Path | None = None
    out_dir: Path | None = None

    def evolve_config(self) -> EvolveConfig:
        return EvolveConfig(
            convergence=self.convergence,
            batch_size=self.batch_size,
            max_suggestions=self.max_suggestions,
            ks=self.ks,
            workers=self.workers,
            limits=self.limits,
            prompts_dir=str(self.prompts_dir) if self.prompts_dir else None,
        )

    def with_seed(self, seed: int | None) -> RunConfig:
        if seed is None:
            return self
        return replace(self, limits=replace(self.limits, seed=seed))


def _check_types(raw: Mapping[str, Any]) -> None:
    for section, body in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        keys = _SCHEMA[section]
        for key, value in body.items():
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}")
            expected = keys[key]
            # bool is an int subclass; only accept it where asked for
            if isinstance(value, bool) and expected is not bool:
                raise ConfigError(f"{section}.{key} must not be a boolean")
            if not isinstance(value, expected):
                raise ConfigError(f"{section}.{key} has the wrong type ({type(value).__name__})")


def _path(base: Path, value: str | None, what: str, must_exist: bool = True) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    p = p if p.is_absolute() else base / p
    if must_exist and not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _llm(section: Mapping[str, Any], base: Path, name: str) -> LlmConfig:
    backend = section.get("backend", "mock")
    if backend not in ("mock", "http"):
        raise ConfigError(f"{name}.backend must be 'mock' or 'http'")
    if backend == "http" and not section.get("endpoint_url"):
        raise ConfigError(f"{name}.endpoint_url is required for the http backend")
    if backend == "http" and "script" in section:
        raise ConfigError(f"{name}.script only applies to the mock backend")
    return LlmConfig(
        backend=backend,
        endpoint_url=section.get("endpoint_url"),
        model_id=section.get("model_id", "mock"),
        api_key_env=section.get("api_key_env"),
        max_in_flight=section.get("max_in_flight", 4),
        timeout_seconds=float(section.get("timeout_seconds", 60.0)),
        script=_path(base, section.get("script"), f"{name}.script"),
    )


def parse_config(raw: Mapping[str, Any], base: str | os.PathLike = ".") -> RunConfig:
    _check_types(raw)
    base = Path(base)
    get = lambda s: raw.get(s, {})  # noqa: E731
    try:
        limits = ExecLimits(**get("limits"))
        convergence = ConvergenceConfig(**get("convergence"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    ev, ev_cfg, tools, data = get("evolve"), get("eval"), get("tools"), get("data")
    ks = ev_cfg.get("ks", list(DEFAULT_KS))
    if not ks or not all(isinstance(k, int) and not isinstance(k, bool) and k >= 1 for k in ks):
        raise ConfigError("eval.ks must be a non-empty list of positive integers")
    if 1 not in ks:
        raise ConfigError("eval.ks must include 1")
    for key in ("batch_size", "max_suggestions", "workers"):
        if key in ev and ev[key] < 1:
            raise ConfigError(f"evolve.{key} must be >= 1")
    if tools.get("k", 1) < 1:
        raise ConfigError("tools.k must be >= 1")
    if ev_cfg.get("cons_n", 1) < 1:
        raise ConfigError("eval.cons_n must be >= 1")
    return RunConfig(
        llm=_llm(get("llm"), base, "llm"),
        analyzer=_llm(raw["analyzer"], base, "analyzer") if "analyzer" in raw else None,
        index=_path(base, tools.get("index"), "tools.index"),
        search_k=tools.get("k", DEFAULT_SEARCH_K),
        limits=limits,
        convergence=convergence,
        batch_size=ev.get("batch_size"),
        max_suggestions=ev.get("max_suggestions", 4),
        workers=ev.get("workers", 1),
        prompts_dir=_path(base, ev.get("prompts_dir"), "evolve.prompts_dir"),
        ks=tuple(ks),
        cons_n=ev_cfg.get("cons_n"),
        manifest=_path(base, data.get("manifest"), "data.manifest"),
        splits=_path(base, data.get("splits"), "data.splits"),
        initial_graph=_path(base, data.get("initial_graph"), "data.initial_graph"),
        out_dir=_path(base, data.get("out_dir"), "data.out_dir", must_exist=False),
    )


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, path.parent)
