"""Chat-model backends and prompt template rendering.

Two backends share one contract, ``complete(LlmRequest) -> LlmResponse``:

* :class:`MockLlm` answers from an ordered rule script (first match wins).
* :class:`HttpLlm` posts to an OpenAI-style ``/chat/completions`` endpoint.

Refusals come back as data (``refused=True``), never as exceptions.
"""

from __future__ import annotations

import base64
import json
import mimetypes
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import httpx

from wfevolve.errors import MalformedResponse, RateLimited, TransportError, UnresolvedPlaceholder
from wfevolve.graph import PLACEHOLDER_RE

DEFAULT_TEMPERATURE = 1.0
DEFAULT_SEED = 42


@dataclass(frozen=True)
class LlmRequest:
    system_prompt: str
    human_prompt: str
    image_ref: str | None = None
    temperature: float = DEFAULT_TEMPERATURE
    seed: int | None = DEFAULT_SEED

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not self.system_prompt.strip() or not self.human_prompt.strip():
            raise ValueError("prompts must be non-empty")

    def prompt_text(self) -> str:
        """The text a mock rule is matched against."""
        parts = [self.system_prompt, self.human_prompt]
        if self.image_ref:
            parts.append(f"[image] {self.image_ref}")
        return "\n\n".join(parts)


@dataclass(frozen=True)
class LlmResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    model_id: str = ""
    refused: bool = False


class LlmClient(Protocol):
    def complete(self, req: LlmRequest) -> LlmResponse: ...


class Usage:
    """Thread-safe running token totals reported by a backend."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0

    def add(self, resp: LlmResponse) -> None:
        with self._lock:
            self.calls += 1
            self.prompt_tokens += resp.prompt_tokens
            self.completion_tokens += resp.completion_tokens

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {
                "calls": self.calls,
                "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens,
            }


_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def count_tokens(text: str) -> int:
    """Deterministic token estimate: words plus punctuation marks."""
    return len(_TOKEN_RE.findall(text))


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MockRule:
    reply: str
    match: tuple[str, ...] = ()
    absent: tuple[str, ...] = ()
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    refused: bool = False

    def matches(self, text: str) -> bool:
        return all(m in text for m in self.match) and not any(a in text for a in self.absent)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> MockRule:
        unknown = set(d) - {"match", "absent", "reply", "prompt_tokens", "completion_tokens", "refused"}
        if unknown:
            raise ValueError(f"unknown mock rule field(s): {', '.join(sorted(unknown))}")
        return cls(
            reply=d["reply"],
            match=_as_tuple(d.get("match", ())),
            absent=_as_tuple(d.get("absent", ())),
            prompt_tokens=d.get("prompt_tokens"),
            completion_tokens=d.get("completion_tokens"),
            refused=bool(d.get("refused", False)),
        )

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"match": list(self.match), "reply": self.reply}
        if self.absent:
            d["absent"] = list(self.absent)
        if self.prompt_tokens is not None:
            d["prompt_tokens"] = self.prompt_tokens
        if self.completion_tokens is not None:
            d["completion_tokens"] = self.completion_tokens
        if self.refused:
            d["refused"] = True
        return d


def _as_tuple(v: str | Sequence[str]) -> tuple[str, ...]:
    return (v,) if isinstance(v, str) else tuple(v)


@dataclass(frozen=True)
class MockScript:
    rules: tuple[MockRule, ...] = ()
    default_reply: str = ""

    def lookup(self, text: str) -> MockRule:
        for rule in self.rules:
            if rule.matches(text):
                return rule
        return MockRule(self.default_reply)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> MockScript:
        unknown = set(d) - {"rules", "default_reply"}
        if unknown:
            raise ValueError(f"unknown mock script field(s): {', '.join(sorted(unknown))}")
        return cls(tuple(MockRule.from_dict(r) for r in d.get("rules", [])), d.get("default_reply", ""))

    @classmethod
    def load(cls, path: str | os.PathLike) -> MockScript:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict[str, Any]:
        return {"rules": [r.to_dict() for r in self.rules], "default_reply": self.default_reply}


class MockLlm:
    """Scripted backend; replies depend only on the request text."""

    def __init__(self, script: MockScript, model_id: str = "mock") -> None:
        self.script = script
        self.model_id = model_id
        self.usage = Usage()

    def complete(self, req: LlmRequest) -> LlmResponse:
        text = req.prompt_text()
        rule = self.script.lookup(text)
        resp = LlmResponse(
            text=rule.reply,
            prompt_tokens=count_tokens(text) if rule.prompt_tokens is None else rule.prompt_tokens,
            completion_tokens=count_tokens(rule.reply) if rule.completion_tokens is None else rule.completion_tokens,
            model_id=self.model_id,
            refused=rule.refused,
        )
        self.usage.add(resp)
        return resp


# ---------------------------------------------------------------------------
# HTTP backend
# ---------------------------------------------------------------------------


@dataclass
class HttpLlm:
    """OpenAI-compatible chat-completions client.

    ``image_ref`` values that are URLs (or data URLs) are passed through;
    local files are inlined as base64 data URLs.
    """

    endpoint_url: str
    model_id: str
    api_key: str | None = None
    timeout: float = 60.0
    max_in_flight: int = 4
    client: httpx.Client | None = None
    usage: Usage = field(default_factory=Usage)

    def __post_init__(self) -> None:
        self._gate = threading.BoundedSemaphore(max(1, self.max_in_flight))
        if self.client is None:
            self.client = httpx.Client(timeout=self.timeout)

    @classmethod
    def from_env(cls, endpoint_url: str, model_id: str, api_key_env: str | None, **kw: Any) -> HttpLlm:
        key = os.environ.get(api_key_env) if api_key_env else None
        return cls(endpoint_url, model_id, key, **kw)

    def build_body(self, req: LlmRequest) -> dict[str, Any]:
        user: Any = req.human_prompt
        if req.image_ref:
            user = [
                {"type": "text", "text": req.human_prompt},
                {"type": "image_url", "image_url": {"url": image_url(req.image_ref)}},
            ]
        body: dict[str, Any] = {
            "model": self.model_id,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": user},
            ],
            "temperature": req.temperature,
        }
        if req.seed is not None:
            body["seed"] = req.seed
        return body

    def complete(self, req: LlmRequest) -> LlmResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        with self._gate:
            try:
                r = self.client.post(self.endpoint_url, json=self.build_body(req), headers=headers)
            except httpx.HTTPError as exc:
                raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if r.status_code == 429:
            raise RateLimited("HTTP 429 from backend")
        if r.status_code >= 400:
            raise TransportError(f"HTTP {r.status_code}: {r.text[:200]}")
        resp = parse_chat_response(r.content, self.model_id)
        self.usage.add(resp)
        return resp

    def close(self) -> None:
        if self.client is not None:
            self.client.close()


def image_url(image_ref: str) -> str:
    if re.match(r"^(https?|data):", image_ref):
        return image_ref
    path = Path(image_ref)
    if path.is_file():
        mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
        return f"data:{mime};base64," + base64.b64encode(path.read_bytes()).decode("ascii")
    return image_ref


def parse_chat_response(raw: bytes | str, model_id: str = "") -> LlmResponse:
    try:
        data = json.loads(raw)
        choice = data["choices"][0]
        message = choice["message"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"unexpected chat response shape: {exc}") from None
    usage = data.get("usage") or {}
    refusal = message.get("refusal")
    refused = bool(refusal) or choice.get("finish_reason") == "content_filter"
    text = refusal or message.get("content") or ""
    if refused and not text:
        text = "content filtered by provider"
    if not isinstance(text, str):
        raise MalformedResponse("message content is not text")
    return LlmResponse(
        text=text,
        prompt_tokens=int(usage.get("prompt_tokens", 0)),
        completion_tokens=int(usage.get("completion_tokens", 0)),
        model_id=data.get("model", model_id),
        refused=refused,
    )


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


def render_prompt(template: str, ctx: Mapping[str, Any]) -> str:
    """Substitute ``{{name}}`` placeholders from ``ctx`` in a single pass."""

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in ctx:
            raise UnresolvedPlaceholder(name)
        return str(ctx[name])

    return PLACEHOLDER_RE.sub(sub, template)
