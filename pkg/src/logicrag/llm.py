"""Chat-completion gateway: prompt templates, providers and token metering.

Two providers share one interface. :class:`HttpProvider` talks to any
OpenAI-compatible ``/chat/completions`` endpoint; :class:`ScriptedProvider`
answers from a fixture keyed by ``(template name, match key)`` so that whole
pipeline runs are deterministic and offline.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import requests

log = logging.getLogger(__name__)

TEMPLATE_NAMES = ("decompose", "merge", "resolve", "summarize", "compose", "judge", "augment", "proceed")
DEFAULT_TOKEN_BUDGET = 20_000
_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


class LLMError(RuntimeError):
    pass


class MissingBinding(LLMError, KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"no binding for placeholder {{{name}}}")

    def __str__(self) -> str:
        return self.args[0]


class ProviderError(LLMError):
    def __init__(self, message: str, status: int | None = None, body: str | None = None):
        self.status = status
        self.body = body
        super().__init__(message)


class AuthError(ProviderError):
    pass


class ProviderTimeout(ProviderError):
    pass


class FixtureMiss(ProviderError):
    def __init__(self, template: str, key: str):
        self.template = template
        self.key = key
        super().__init__(f"scripted fixture has no entry for {template}:{key}")


class BudgetExceeded(LLMError):
    def __init__(self, used: int, budget: int):
        self.used = used
        self.budget = budget
        super().__init__(f"token budget exhausted: {used} used of {budget}")


@dataclass(frozen=True)
class ChatTurn:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role != "assistant" and not self.content.strip():
            raise ValueError(f"{self.role} turn has empty content")

    def to_message(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: TokenUsage) -> TokenUsage:
        return TokenUsage(self.prompt_tokens + other.prompt_tokens, self.completion_tokens + other.completion_tokens)

    def to_dict(self) -> dict[str, int]:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "total_tokens": self.total_tokens,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TokenUsage:
        return cls(int(d.get("prompt_tokens", 0)), int(d.get("completion_tokens", 0)))


@dataclass(frozen=True)
class ProviderResponse:
    content: str
    usage: TokenUsage
    latency_ms: int = 0


@dataclass(frozen=True)
class CompletionParams:
    temperature: float = 0.0
    seed: int = 0
    max_tokens: int = 512


@dataclass(frozen=True)
class PromptTemplate:
    """A named system + user prompt pair with ``{placeholder}`` slots.

    Only ``{identifier}`` is a placeholder, so literal JSON braces in a
    template body need no escaping.
    """

    name: str
    body: str
    system: str = "You are a helpful assistant."
    version: int = 1

    @property
    def placeholders(self) -> list[str]:
        found = _PLACEHOLDER.findall(self.system) + _PLACEHOLDER.findall(self.body)
        return list(dict.fromkeys(found))

    def render(self, bindings: Mapping[str, str] | None = None) -> list[ChatTurn]:
        bindings = bindings or {}

        def sub(m: re.Match) -> str:
            name = m.group(1)
            if name not in bindings:
                raise MissingBinding(name)
            return str(bindings[name])

        return [
            ChatTurn("system", _PLACEHOLDER.sub(sub, self.system)),
            ChatTurn("user", _PLACEHOLDER.sub(sub, self.body)),
        ]


def render(template: PromptTemplate, bindings: Mapping[str, str] | None = None) -> list[ChatTurn]:
    return template.render(bindings)


def parse_template(name: str, source: str) -> PromptTemplate:
    """Parse the on-disk template format.

    Header lines ``# key: value`` come first, then a ``[system]`` and a
    ``[user]`` section.
    """
    version = 1
    sections: dict[str, list[str]] = {}
    current = None
    for line in source.splitlines():
        stripped = line.strip()
        if current is None and stripped.startswith("#"):
            key, _, value = stripped.lstrip("#").partition(":")
            if key.strip() == "version":
                version = int(value)
            continue
        if stripped in ("[system]", "[user]"):
            current = stripped[1:-1]
            sections[current] = []
            continue
        if current is not None:
            sections[current].append(line)
    if "user" not in sections:
        raise ValueError(f"template {name!r} has no [user] section")
    system = "\n".join(sections.get("system", [])).strip() or PromptTemplate.system
    return PromptTemplate(name, "\n".join(sections["user"]).strip(), system, version)


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Load every ``<name>.txt`` template, by default the packaged set."""
    out = {}
    if directory is None:
        root = resources.files("logicrag") / "prompts"
        for name in TEMPLATE_NAMES:
            out[name] = parse_template(name, (root / f"{name}.txt").read_text(encoding="utf-8"))
    else:
        for path in sorted(Path(directory).glob("*.txt")):
            out[path.stem] = parse_template(path.stem, path.read_text(encoding="utf-8"))
    return out


class Provider(Protocol):
    def complete(
        self, turns: Sequence[ChatTurn], params: CompletionParams, *, template: str, key: str
    ) -> ProviderResponse: ...


class RateLimiter:
    """Spaces calls so that at most ``per_minute`` start in any minute."""

    def __init__(self, per_minute: float | None, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.interval = 60.0 / per_minute if per_minute else 0.0
        self._next = 0.0
        self._lock = threading.Lock()
        self._clock = clock
        self._sleep = sleep

    def acquire(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            wait = self._next - now
            self._next = max(now, self._next) + self.interval
        if wait > 0:
            self._sleep(wait)


_LIMITERS: dict[str, RateLimiter] = {}
_LIMITERS_LOCK = threading.Lock()


def shared_limiter(name: str, per_minute: float | None) -> RateLimiter:
    """Process-wide limiter per endpoint name."""
    with _LIMITERS_LOCK:
        if name not in _LIMITERS:
            _LIMITERS[name] = RateLimiter(per_minute)
        return _LIMITERS[name]


class HttpProvider:
    """OpenAI-compatible chat completions over HTTP.

    Transient failures (connection errors, timeouts, 429 and 5xx) are retried
    ``max_retries`` times with exponential backoff starting at
    ``backoff_base`` seconds. 401/403 raise :class:`AuthError` immediately.
    """

    transient_status = frozenset({408, 409, 429, 500, 502, 503, 504})

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key: str | None = None,
        api_key_env: str | None = "OPENAI_API_KEY",
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        requests_per_minute: float | None = None,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        if api_key is None and api_key_env:
            api_key = os.environ.get(api_key_env)
        self.api_key = api_key
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.limiter = shared_limiter(self.url, requests_per_minute)
        self.session = session or requests.Session()
        self._sleep = sleep

    def complete(self, turns, params, *, template="", key=""):
        payload = {
            "model": self.model,
            "messages": [t.to_message() for t in turns],
            "temperature": params.temperature,
            "seed": params.seed,
            "max_tokens": params.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last: ProviderError | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self.backoff_base * 2 ** (attempt - 1))
            self.limiter.acquire()
            start = time.perf_counter()
            try:
                resp = self.session.post(self.url, json=payload, headers=headers, timeout=self.timeout)
            except requests.Timeout as exc:
                last = ProviderTimeout(f"request timed out after {self.timeout}s: {exc}")
                continue
            except requests.RequestException as exc:
                last = ProviderError(f"request failed: {exc}")
                continue
            latency = int((time.perf_counter() - start) * 1000)
            if resp.status_code in (401, 403):
                raise AuthError(f"authentication failed (HTTP {resp.status_code})", resp.status_code, resp.text[:2000])
            if resp.status_code in self.transient_status:
                last = ProviderError(f"HTTP {resp.status_code}", resp.status_code, resp.text[:2000])
                log.warning("transient provider failure %s (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"HTTP {resp.status_code}", resp.status_code, resp.text[:2000])
            try:
                data = resp.json()
                content = data["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProviderError(f"malformed completion response: {exc}", resp.status_code, resp.text[:2000]) from exc
            usage = TokenUsage.from_dict(data.get("usage") or {})
            return ProviderResponse(content, usage, latency)
        assert last is not None
        msg = f"{last} (gave up after {self.max_retries} retries)"
        raise type(last)(msg, last.status, last.body)


@dataclass(frozen=True)
class ScriptedReply:
    content: str
    usage: TokenUsage = TokenUsage()


class ScriptedProvider:
    """Deterministic provider answering from a ``(template, key)`` table.

    A missing entry raises :class:`FixtureMiss`; there is no fallback.
    Every call is appended to :attr:`calls` for inspection in tests.
    """

    def __init__(self, fixture: Mapping[tuple[str, str], ScriptedReply | str]):
        self.fixture: dict[tuple[str, str], ScriptedReply] = {}
        for (tmpl, key), reply in fixture.items():
            k = (tmpl, str(key))
            if k in self.fixture:
                raise ValueError(f"duplicate fixture key {tmpl}:{key}")
            self.fixture[k] = reply if isinstance(reply, ScriptedReply) else ScriptedReply(reply)
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def complete(self, turns, params, *, template="", key=""):
        with self._lock:
            self.calls.append((template, str(key)))
        reply = self.fixture.get((template, str(key)))
        if reply is None:
            raise FixtureMiss(template, str(key))
        return ProviderResponse(reply.content, reply.usage, 0)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> ScriptedProvider:
        """Build from the JSON shape ``{"template:key": {"content", "prompt_tokens", ...}}``."""
        table = {}
        for compound, entry in data.items():
            tmpl, sep, key = compound.partition(":")
            if not sep:
                raise ValueError(f"fixture key {compound!r} is not of the form template:key")
            if isinstance(entry, str):
                entry = {"content": entry}
            table[(tmpl, key)] = ScriptedReply(
                entry["content"],
                TokenUsage(int(entry.get("prompt_tokens", 0)), int(entry.get("completion_tokens", 0))),
            )
        return cls(table)

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedProvider:
        return cls.from_mapping(json.loads(Path(path).read_text(encoding="utf-8")))


def scripted_provider(fixture: Mapping) -> ScriptedProvider:
    return ScriptedProvider(fixture)


@dataclass
class CallRecord:
    stage: str
    template: str
    key: str
    usage: TokenUsage
    latency_ms: int

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "template": self.template,
            "key": self.key,
            "usage": self.usage.to_dict(),
            "latency_ms": self.latency_ms,
        }


@dataclass
class TokenMeter:
    """Per-query usage accumulator that enforces a token budget."""

    budget: int | None = DEFAULT_TOKEN_BUDGET
    calls: list[CallRecord] = field(default_factory=list)

    @property
    def usage(self) -> TokenUsage:
        total = TokenUsage()
        for c in self.calls:
            total = total + c.usage
        return total

    @property
    def used(self) -> int:
        return self.usage.total_tokens

    def check(self, *, allow_equal: bool = False) -> None:
        if self.budget is None:
            return
        used = self.used
        if used > self.budget or (used == self.budget and not allow_equal):
            raise BudgetExceeded(used, self.budget)


def complete(
    provider: Provider,
    turns: Sequence[ChatTurn],
    params: CompletionParams | None = None,
    *,
    template: str = "",
    key: str = "",
    meter: TokenMeter | None = None,
    stage: str | None = None,
    enforce_budget: bool = True,
    post_check: bool = True,
) -> ProviderResponse:
    """Run one completion, recording its usage on ``meter``.

    With ``enforce_budget`` the call is refused once the meter's budget is
    spent. With ``post_check`` as well, :class:`BudgetExceeded` is raised
    after any call that overruns it (the overrunning call is still
    recorded).
    """
    if not turns:
        raise ValueError("no chat turns to send")
    params = params or CompletionParams()
    if meter is not None and enforce_budget:
        meter.check()
    resp = provider.complete(turns, params, template=template, key=key)
    if meter is not None:
        meter.calls.append(CallRecord(stage or template, template, key, resp.usage, resp.latency_ms))
        if enforce_budget and post_check:
            meter.check(allow_equal=True)
    return resp
