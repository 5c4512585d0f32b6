"""Append-only run traces and their JSONL form.

A trace is a header record, a chronological list of event records and a
footer. Event records carry a ``"record"`` discriminator: ``call`` (one
completion and its usage), ``round`` (one retrieval round), ``graph``
(a snapshot after augmentation), ``note`` and ``error``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .llm import TokenUsage

FORMAT_VERSION = 1

# Wall-clock fields; everything else in a trace or report is deterministic
# under the scripted provider.
TIMING_KEYS = frozenset({"latency_ms", "latencies_ms", "wall_time_s", "avg_seconds", "judge_latency_ms"})


class TraceFormatError(ValueError):
    pass


def strip_timing(obj: Any) -> Any:
    """Deep copy of ``obj`` with every timing field removed."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


@dataclass
class RunTrace:
    query: str
    query_id: str | None = None
    config: dict = field(default_factory=dict)
    graph: dict | None = None
    events: list[dict] = field(default_factory=list)
    final_answer: str | None = None
    status: str = "running"
    wall_time_s: float = 0.0
    flags: list[str] = field(default_factory=list)

    def add(self, record: str, **data: Any) -> dict:
        event = {"record": record, **data}
        self.events.append(event)
        return event

    def note(self, message: str, **data: Any) -> None:
        self.add("note", message=message, **data)

    @property
    def rounds(self) -> list[dict]:
        return [e for e in self.events if e["record"] == "round"]

    @property
    def calls(self) -> list[dict]:
        return [e for e in self.events if e["record"] == "call"]

    @property
    def graphs(self) -> list[dict]:
        snaps = [self.graph] if self.graph is not None else []
        return snaps + [e["graph"] for e in self.events if e["record"] == "graph"]

    @property
    def usage(self) -> TokenUsage:
        total = TokenUsage()
        for c in self.calls:
            total = total + TokenUsage.from_dict(c["usage"])
        return total

    @property
    def merged_queries(self) -> list[str]:
        return [r["merged_query"] for r in self.rounds]

    def header(self) -> dict:
        return {
            "record": "header",
            "format_version": FORMAT_VERSION,
            "query": self.query,
            "query_id": self.query_id,
            "config": self.config,
            "graph": self.graph,
        }

    def footer(self) -> dict:
        return {
            "record": "footer",
            "status": self.status,
            "final_answer": self.final_answer,
            "rounds": len(self.rounds),
            "usage": self.usage.to_dict(),
            "flags": list(self.flags),
            "wall_time_s": self.wall_time_s,
        }

    def to_records(self) -> list[dict]:
        return [self.header(), *self.events, self.footer()]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in self.to_records())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> RunTrace:
        records = list(records)
        if not records:
            raise TraceFormatError("empty trace")
        head, *body = records
        if head.get("record") != "header":
            raise TraceFormatError("trace does not start with a header record")
        if head.get("format_version") != FORMAT_VERSION:
            raise TraceFormatError(f"unsupported trace format_version {head.get('format_version')!r}")
        if not body or body[-1].get("record") != "footer":
            raise TraceFormatError("trace has no footer record")
        foot = body.pop()
        return cls(
            query=head["query"],
            query_id=head.get("query_id"),
            config=head.get("config", {}),
            graph=head.get("graph"),
            events=body,
            final_answer=foot.get("final_answer"),
            status=foot.get("status", "ok"),
            wall_time_s=foot.get("wall_time_s", 0.0),
            flags=list(foot.get("flags", [])),
        )

    @classmethod
    def from_jsonl(cls, text: str) -> RunTrace:
        records = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        return cls.from_records(records)

    @classmethod
    def read(cls, path: str | Path) -> RunTrace:
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))


def format_trace(trace: RunTrace) -> str:
    """Human-readable per-round table."""
    lines = [f"query: {trace.query}"]
    if trace.graph:
        lines.append(f"graph: {len(trace.graph['nodes'])} subproblems, {len(trace.graph['edges'])} edges")
    ids = [",".join(p["id"] for p in r["retrieved"]) for r in trace.rounds]
    width = max([len("retrieved"), *map(len, ids)])
    header = f"{'round':>5}  {'rank':>4}  {'tokens':>6}  {'retrieved':<{width}}  merged query"
    lines += [header, "-" * len(header)]
    for r, got in zip(trace.rounds, ids):
        tokens = sum(c["usage"]["total_tokens"] for c in r.get("calls", []))
        lines.append(f"{r['round']:>5}  {r['rank']:>4}  {tokens:>6}  {got:<{width}}  {r['merged_query']}")
    u = trace.usage
    lines.append(f"answer: {trace.final_answer}")
    lines.append(f"status: {trace.status}; tokens: {u.total_tokens} "
                 f"(prompt {u.prompt_tokens}, completion {u.completion_tokens}); rounds: {len(trace.rounds)}")
    if trace.flags:
        lines.append("flags: " + ", ".join(trace.flags))
    return "\n".join(lines)
