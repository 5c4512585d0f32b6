"""Logic-aware retrieval loop.

One query runs as: decompose -> dependency graph -> rank plan -> for each
rank group {merge into one retrieval query -> retrieve -> fold passages into
the rolling memory -> resolve the group's subproblems from memory ->
optionally append a newly discovered subproblem} -> compose the answer.

Every model-facing structured reply is strict JSON with exactly one repair
round-trip. Calls go through :class:`LLMSession`, which keys scripted
fixtures as ``<template>:<query_id>/<round>`` (or ``<template>:<round>``
without a query id) and appends one ``call`` record per completion to the
trace.
"""

from __future__ import annotations

import dataclasses
import json
import re
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .dag import (
    DEFAULT_MAX_NODES,
    DependencyGraph,
    EmptyDecomposition,
    ExecutionPlan,
    GraphTooLarge,
    Subproblem,
    augment_graph,
    build_graph,
    build_plan,
    check_acyclic,
    graph_to_record,
)
from .llm import (
    DEFAULT_TOKEN_BUDGET,
    BudgetExceeded,
    ChatTurn,
    CompletionParams,
    PromptTemplate,
    Provider,
    TokenMeter,
    complete,
    load_templates,
)
from .retriever import CorpusIndex, ScoredPassage, normalize, retrieve
from .trace import RunTrace

WITH_REPLACEMENT = "with_replacement"
WITHOUT_REPLACEMENT = "without_replacement"
STRATEGIES = (WITH_REPLACEMENT, WITHOUT_REPLACEMENT)

REPAIR_MESSAGE = (
    "Your previous reply could not be used: {error}. "
    "Reply again with only the corrected JSON object."
)

Retriever = Callable[[str, int], list[ScoredPassage]]


class ReasoningError(RuntimeError):
    pass


class StructuredOutputError(ReasoningError):
    pass


class DecompositionParseError(StructuredOutputError):
    pass


class ResolveParseError(StructuredOutputError):
    pass


class AugmentParseError(StructuredOutputError):
    pass


class ProceedParseError(StructuredOutputError):
    pass


class MissingAnswer(ReasoningError):
    def __init__(self, node_id: str):
        self.node_id = node_id
        super().__init__(f"model reply has no answer for subproblem {node_id}")


class EmptyGroup(ReasoningError):
    pass


class EmptyReply(ReasoningError):
    pass


class NoEvidence(ReasoningError):
    pass


class PipelineError(ReasoningError):
    """A stage failed; ``trace`` holds everything recorded up to the failure."""

    def __init__(self, stage: str, cause: BaseException, trace: RunTrace):
        self.stage = stage
        self.cause = cause
        self.trace = trace
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class EngineConfig:
    top_k: int = 3
    max_rounds: int = 8
    max_augmentations: int = 2
    strategy: str = WITHOUT_REPLACEMENT
    graph_pruning: bool = True
    context_pruning: bool = True
    token_budget: int = DEFAULT_TOKEN_BUDGET
    max_nodes: int = DEFAULT_MAX_NODES
    summary_words: int = 300
    memory_token_cap: int = 2000
    temperature: float = 0.0
    seed: int = 0
    max_tokens: int = 512

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.max_augmentations < 0:
            raise ValueError("max_augmentations must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.token_budget < 1:
            raise ValueError("token_budget must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EngineConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown engine config fields: {sorted(unknown)}")
        return cls(**data)

    @property
    def params(self) -> CompletionParams:
        return CompletionParams(self.temperature, self.seed, self.max_tokens)


@dataclass(frozen=True)
class MemoryState:
    summary: str = ""
    version: int = 0


@dataclass(frozen=True)
class SubAnswer:
    id: str
    answer: str
    round: int


@dataclass
class FinalAnswer:
    text: str
    sub_answers: list[SubAnswer] = field(default_factory=list)
    trace: RunTrace | None = field(default=None, repr=False)
    best_effort: bool = False


class LLMSession:
    """Per-query view of a provider: templates, budget meter and trace."""

    def __init__(
        self,
        provider: Provider,
        *,
        templates: Mapping[str, PromptTemplate] | None = None,
        params: CompletionParams | None = None,
        budget: int | None = DEFAULT_TOKEN_BUDGET,
        trace: RunTrace | None = None,
        query_id: str | None = None,
    ):
        self.provider = provider
        self.templates = templates or load_templates()
        self.params = params or CompletionParams()
        self.meter = TokenMeter(budget)
        self.trace = trace if trace is not None else RunTrace(query="")
        self.prefix = f"{query_id}/" if query_id else ""

    def ask(
        self,
        stage: str,
        template: str,
        bindings: Mapping[str, str],
        key: str | int,
        *,
        extra_turns: Sequence[ChatTurn] = (),
        enforce_budget: bool = True,
        post_check: bool = True,
    ) -> tuple[str, list[ChatTurn]]:
        turns = self.templates[template].render(bindings) + list(extra_turns)
        full_key = f"{self.prefix}{key}"
        try:
            resp = complete(self.provider, turns, self.params, template=template, key=full_key,
                            meter=self.meter, stage=stage, enforce_budget=enforce_budget,
                            post_check=post_check)
        finally:
            # the meter also records a call that overran the budget
            if len(self.meter.calls) > len(self.trace.calls):
                self.trace.add("call", **self.meter.calls[-1].to_dict())
        return resp.content, turns

    def ask_json(
        self,
        stage: str,
        template: str,
        bindings: Mapping[str, str],
        key: str | int,
        validate: Callable[[Any], Any],
        error: type[StructuredOutputError],
    ) -> Any:
        """Ask for JSON, validate it, and re-prompt once with the error."""
        reply, turns = self.ask(stage, template, bindings, key)
        try:
            return validate(parse_json_reply(reply))
        except ValueError as exc:
            first = exc
        self.trace.note("repairing structured reply", stage=stage, error=str(first))
        repair = [ChatTurn("assistant", reply), ChatTurn("user", REPAIR_MESSAGE.format(error=first))]
        reply, _ = self.ask(stage, template, bindings, f"{key}#repair", extra_turns=repair)
        try:
            return validate(parse_json_reply(reply))
        except ValueError as exc:
            raise error(f"{stage}: unusable reply after repair: {exc}") from exc


_FENCE = re.compile(r"^```(?:json)?\s*(.*?)\s*```$", re.DOTALL)
_ANSWER_REF = re.compile(r"#(\d+)\b")


def parse_json_reply(text: str) -> Any:
    body = text.strip()
    m = _FENCE.match(body)
    if m:
        body = m.group(1)
    try:
        return json.loads(body)
    except json.JSONDecodeError as exc:
        raise ValueError(f"not valid JSON ({exc.msg} at position {exc.pos})") from None


def substitute_answers(text: str, answers: Mapping[str, SubAnswer]) -> str:
    """Replace ``#k`` references with the resolved answer of node ``pk``."""

    def sub(m: re.Match) -> str:
        a = answers.get(f"p{m.group(1)}")
        return a.answer if a is not None else m.group(0)

    return _ANSWER_REF.sub(sub, text)


def cap_tokens(text: str, cap: int, *, keep: str = "head") -> str:
    """Trim ``text`` to at most ``cap`` normalized tokens, word by word."""
    if len(normalize(text)) <= cap:
        return text
    words = text.split()
    if keep == "tail":
        words = words[::-1]
    kept, count = [], 0
    for w in words:
        n = len(normalize(w))
        if count + n > cap:
            break
        kept.append(w)
        count += n
    if keep == "tail":
        kept.reverse()
    return " ".join(kept)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValueError(message)


def _is_int(x: Any) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def decompose(llm: LLMSession, query: str, *, max_nodes: int = DEFAULT_MAX_NODES) -> tuple[list[str], list[tuple[int, int]]]:
    if not query.strip():
        raise ValueError("empty query")

    def validate(obj):
        _require(isinstance(obj, dict), "expected a JSON object")
        subs, edges = obj.get("subproblems"), obj.get("edges", [])
        _require(isinstance(subs, list), "'subproblems' must be a list")
        _require(all(isinstance(s, str) and s.strip() for s in subs), "every subproblem must be a non-empty string")
        _require(len(subs) <= max_nodes, f"at most {max_nodes} subproblems are allowed")
        _require(isinstance(edges, list), "'edges' must be a list")
        pairs = []
        for e in edges:
            _require(isinstance(e, list) and len(e) == 2 and all(_is_int(x) for x in e),
                     f"edge {e!r} is not a pair of integers")
            i, j = e
            _require(0 <= i < len(subs) and 0 <= j < len(subs), f"edge {e!r} is out of range")
            _require(i != j, f"edge {e!r} is a self-loop")
            if (i, j) not in pairs:
                pairs.append((i, j))
        return [s.strip() for s in subs], pairs

    bindings = {"question": query, "max_subproblems": str(max_nodes)}
    subs, pairs = llm.ask_json("decompose", "decompose", bindings, 0, validate, DecompositionParseError)
    if not subs:
        raise EmptyDecomposition("model returned no subproblems")
    return subs, pairs


def _list_subproblems(group: Sequence[Subproblem], answers: Mapping[str, SubAnswer]) -> str:
    return "\n".join(f"- {p.id}: {substitute_answers(p.text, answers)}" for p in group)


def merge_rank(
    llm: LLMSession,
    group: Sequence[Subproblem],
    resolved: Mapping[str, SubAnswer],
    query: str,
    key: str | int = 0,
) -> str:
    """Unified retrieval query for a rank group; singletons skip the model."""
    if not group:
        raise EmptyGroup("cannot merge an empty group")
    if len(group) == 1:
        return substitute_answers(group[0].text, resolved)
    bindings = {"question": query, "subproblems": _list_subproblems(group, resolved)}
    reply, _ = llm.ask("merge", "merge", bindings, key)
    merged = reply.strip()
    if not merged:
        raise EmptyReply("merge returned an empty query")
    return merged


def _format_passages(chunks: Sequence[ScoredPassage]) -> str:
    out = []
    for c in chunks:
        title = f"{c.passage.title}: " if c.passage.title else ""
        out.append(f"[{c.passage.id}] {title}{c.passage.text}")
    return "\n\n".join(out)


def summarize_memory(
    llm: LLMSession,
    mem: MemoryState,
    new_chunks: Sequence[ScoredPassage],
    query: str,
    key: str | int = 0,
    *,
    max_words: int = 300,
    token_cap: int = 2000,
) -> MemoryState:
    if not new_chunks:
        return mem
    bindings = {
        "question": query,
        "memory": mem.summary or "(empty)",
        "passages": _format_passages(new_chunks),
        "max_words": str(max_words),
    }
    reply, _ = llm.ask("summarize", "summarize", bindings, key)
    return MemoryState(cap_tokens(reply.strip(), token_cap), mem.version + 1)


def concat_memory(mem: MemoryState, new_chunks: Sequence[ScoredPassage], *, token_cap: int = 2000) -> MemoryState:
    """Context-pruning ablation: append raw passages instead of summarizing."""
    if not new_chunks:
        return mem
    parts = [mem.summary] if mem.summary else []
    parts.append(_format_passages(new_chunks))
    return MemoryState(cap_tokens("\n\n".join(parts), token_cap, keep="tail"), mem.version + 1)


def _known_answers(graph: DependencyGraph, answers: Mapping[str, SubAnswer]) -> str:
    lines = [f"- {n.id}: {substitute_answers(n.text, answers)} -> {answers[n.id].answer}"
             for n in graph.nodes if n.id in answers]
    return "\n".join(lines) or "(none)"


def resolve_rank(
    llm: LLMSession,
    group: Sequence[Subproblem],
    mem: MemoryState,
    query: str,
    resolved: Mapping[str, SubAnswer] | None = None,
    key: str | int = 0,
    *,
    graph: DependencyGraph | None = None,
    round_no: int = 0,
) -> list[SubAnswer]:
    """Answer every subproblem of ``group`` from memory in one call."""
    if not group:
        raise EmptyGroup("cannot resolve an empty group")
    resolved = resolved or {}

    def validate(obj):
        _require(isinstance(obj, dict) and isinstance(obj.get("answers"), list), "expected {\"answers\": [...]}")
        found = {}
        for item in obj["answers"]:
            _require(isinstance(item, dict) and isinstance(item.get("id"), str), f"answer entry {item!r} has no string id")
            ans = item.get("answer")
            _require(ans is not None, f"answer entry for {item['id']} has no answer")
            found.setdefault(item["id"], str(ans).strip())
        return found

    known = _known_answers(graph, resolved) if graph is not None else "(none)"
    bindings = {
        "question": query,
        "memory": mem.summary or "(empty)",
        "known_answers": known,
        "subproblems": _list_subproblems(group, resolved),
    }
    found = llm.ask_json("resolve", "resolve", bindings, key, validate, ResolveParseError)
    out = []
    for p in group:
        if p.id not in found:
            raise MissingAnswer(p.id)
        out.append(SubAnswer(p.id, found[p.id], round_no))
    return out


def maybe_augment(
    llm: LLMSession,
    query: str,
    graph: DependencyGraph,
    plan: ExecutionPlan,
    answers: Mapping[str, SubAnswer],
    mem: MemoryState,
    *,
    augmentations: int,
    max_augmentations: int,
    max_nodes: int = DEFAULT_MAX_NODES,
    key: str | int = 0,
) -> tuple[str, list[str]] | None:
    """Ask whether a missing subproblem blocks the answer.

    Returns ``(text, parent_ids)`` or ``None``. Reaching the augmentation or
    node cap is noted in the trace and costs no model call.
    """
    if augmentations >= max_augmentations:
        llm.trace.note("augmentation capped", augmentations=augmentations)
        return None
    if len(graph) >= max_nodes:
        llm.trace.note("augmentation capped", reason="node cap", nodes=len(graph))
        return None

    def validate(obj):
        _require(isinstance(obj, dict) and isinstance(obj.get("augment"), bool), "'augment' must be a boolean")
        if not obj["augment"]:
            return None
        text = obj.get("subproblem")
        _require(isinstance(text, str) and text.strip(), "'subproblem' must be a non-empty string when augmenting")
        parents = obj.get("parents") or []
        _require(isinstance(parents, list) and all(isinstance(p, str) for p in parents),
                 "'parents' must be a list of subproblem ids")
        for p in parents:
            _require(p in answers, f"parent {p!r} is not a resolved subproblem")
        return text.strip(), list(dict.fromkeys(parents))

    listing = "\n".join(
        f"- {n.id}: {substitute_answers(n.text, answers)} -> {answers[n.id].answer if n.id in answers else '(unresolved)'}"
        for n in graph.nodes
    )
    bindings = {"question": query, "subproblems": listing, "memory": mem.summary or "(empty)"}
    return llm.ask_json("augment", "augment", bindings, key, validate, AugmentParseError)


def should_proceed(
    llm: LLMSession,
    query: str,
    group: Sequence[Subproblem],
    answers: Mapping[str, SubAnswer],
    mem: MemoryState,
    key: str | int = 0,
) -> bool:
    """With-replacement strategy: let the model decide to move on or retry."""

    def validate(obj):
        _require(isinstance(obj, dict) and isinstance(obj.get("proceed"), bool), "'proceed' must be a boolean")
        return obj["proceed"]

    listing = "\n".join(f"- {p.id}: {substitute_answers(p.text, answers)} -> {answers[p.id].answer}" for p in group)
    bindings = {"question": query, "subproblems": listing, "memory": mem.summary or "(empty)"}
    return llm.ask_json("proceed", "proceed", bindings, key, validate, ProceedParseError)


def compose(
    llm: LLMSession,
    query: str,
    sub_answers: Sequence[SubAnswer],
    mem: MemoryState,
    *,
    graph: DependencyGraph | None = None,
    enforce_budget: bool = True,
) -> FinalAnswer:
    """Final answer from the ordered sub-answers and the memory."""
    if not sub_answers and not mem.summary.strip():
        raise NoEvidence("no sub-answers and empty memory")
    by_id = {a.id: a for a in sub_answers}
    lines = []
    for a in sub_answers:
        text = substitute_answers(graph.node(a.id).text, by_id) if graph is not None else a.id
        lines.append(f"- {a.id}: {text} -> {a.answer}")
    bindings = {"question": query, "answers": "\n".join(lines) or "(none)", "memory": mem.summary or "(empty)"}
    # an answer that overruns the budget is still kept
    reply, _ = llm.ask("compose", "compose", bindings, 0, enforce_budget=enforce_budget, post_check=False)
    text = reply.strip()
    if not text:
        raise EmptyReply("compose returned an empty answer")
    return FinalAnswer(text, list(sub_answers))


def _ms(start: float) -> int:
    return int((time.perf_counter() - start) * 1000)


class Engine:
    """Configured pipeline: corpus index (or any retriever) plus a provider.

    Safe to share across threads; every :meth:`run` keeps its own state.
    """

    def __init__(
        self,
        config: EngineConfig,
        index: CorpusIndex | None,
        provider: Provider,
        *,
        retriever: Retriever | None = None,
        templates: Mapping[str, PromptTemplate] | None = None,
    ):
        if retriever is None:
            if index is None:
                raise ValueError("need an index or a retriever")
            retriever = lambda q, k: retrieve(index, q, k)  # noqa: E731
        self.config = config
        self.index = index
        self.provider = provider
        self.retriever = retriever
        self.templates = dict(templates or load_templates())

    def with_config(self, **changes: Any) -> Engine:
        return Engine(dataclasses.replace(self.config, **changes), self.index, self.provider,
                      retriever=self.retriever, templates=self.templates)

    def run(self, query: str, query_id: str | None = None) -> tuple[FinalAnswer, RunTrace]:
        cfg = self.config
        trace = RunTrace(query=query, query_id=query_id, config=cfg.to_dict())
        llm = LLMSession(self.provider, templates=self.templates, params=cfg.params,
                         budget=cfg.token_budget, trace=trace, query_id=query_id)
        started = time.perf_counter()
        state = _RunState()
        try:
            try:
                texts, pairs = decompose(llm, query, max_nodes=cfg.max_nodes)
                state.stage = "plan"
                graph = build_graph(texts, pairs, max_nodes=cfg.max_nodes)
                check_acyclic(graph)
                state.graph, state.plan = graph, build_plan(graph)
                trace.graph = graph_to_record(state.graph, state.plan)
                self._schedule(llm, query, state)
                state.stage = "compose"
                final = compose(llm, query, state.ordered_answers(), state.mem, graph=state.graph)
            except BudgetExceeded as exc:
                trace.flags.append("budget_exceeded")
                trace.note("token budget exhausted; composing best-effort answer", stage=state.stage, used=exc.used)
                state.stage = "compose"
                final = compose(llm, query, state.ordered_answers(), state.mem, graph=state.graph,
                                enforce_budget=False)
                final.best_effort = True
        except Exception as exc:
            trace.add("error", stage=state.stage, error=type(exc).__name__, message=str(exc))
            trace.status = "error"
            trace.wall_time_s = time.perf_counter() - started
            raise PipelineError(state.stage, exc, trace) from exc

        trace.final_answer = final.text
        trace.status = "best_effort" if final.best_effort else "ok"
        trace.wall_time_s = time.perf_counter() - started
        final.trace = trace
        return final, trace

    def _schedule(self, llm: LLMSession, query: str, st: _RunState) -> None:
        """Walk the rank groups, running one round per unit."""
        cfg = self.config
        rank = 0
        while rank < len(st.plan.rank_groups):
            group = [st.graph.node(i) for i in st.plan.rank_groups[rank]]
            units = [group] if cfg.graph_pruning else [[p] for p in group]
            for unit in units:
                if st.round_no >= cfg.max_rounds:
                    llm.trace.flags.append("round_cap")
                    llm.trace.note("round cap reached", rounds=st.round_no, pending_rank=rank)
                    return
                self._round(llm, query, st, unit, rank)

            if cfg.strategy == WITH_REPLACEMENT:
                st.stage = "proceed"
                if not should_proceed(llm, query, group, st.answers, st.mem, key=st.round_no - 1):
                    llm.trace.note("rank retained for another round", rank=rank)
                    continue

            st.stage = "augment"
            found = maybe_augment(llm, query, st.graph, st.plan, st.answers, st.mem,
                                  augmentations=st.augmentations, max_augmentations=cfg.max_augmentations,
                                  max_nodes=cfg.max_nodes, key=st.round_no - 1)
            if found is not None:
                text, parents = found
                st.graph, st.plan = augment_graph(st.graph, st.plan, text, parents,
                                                  current_rank=rank, max_nodes=cfg.max_nodes)
                st.augmentations += 1
                llm.trace.add("graph", reason="augmentation", after_round=st.round_no - 1,
                              new_rank=len(st.plan.rank_groups) - 1,
                              graph=graph_to_record(st.graph, st.plan))
            rank += 1

    def _round(self, llm: LLMSession, query: str, st: _RunState, unit: list[Subproblem], rank: int) -> None:
        cfg = self.config
        r = st.round_no
        first_call = len(llm.trace.calls)
        lat = {}

        t = time.perf_counter()
        st.stage = "merge"
        merged = merge_rank(llm, unit, st.answers, query, key=r)
        lat["merge"] = _ms(t)

        t = time.perf_counter()
        st.stage = "retrieve"
        chunks = self.retriever(merged, cfg.top_k)
        lat["retrieve"] = _ms(t)

        before = st.mem
        t = time.perf_counter()
        st.stage = "summarize"
        if cfg.context_pruning:
            st.mem = summarize_memory(llm, st.mem, chunks, query, key=r,
                                      max_words=cfg.summary_words, token_cap=cfg.memory_token_cap)
        else:
            st.mem = concat_memory(st.mem, chunks, token_cap=cfg.memory_token_cap)
        lat["summarize"] = _ms(t)

        t = time.perf_counter()
        st.stage = "resolve"
        resolved = resolve_rank(llm, unit, st.mem, query, st.answers, key=r, graph=st.graph, round_no=r)
        lat["resolve"] = _ms(t)
        for a in resolved:
            st.answers[a.id] = a

        calls = [{k: v for k, v in c.items() if k != "record"} for c in llm.trace.calls[first_call:]]
        llm.trace.add(
            "round",
            round=r,
            rank=rank,
            subproblems=[p.id for p in unit],
            merged_query=merged,
            retrieved=[{"id": c.passage.id, "score": c.score, "rank": c.rank} for c in chunks],
            memory_before=before.summary,
            memory_after=st.mem.summary,
            memory_version=st.mem.version,
            answers=[{"id": a.id, "answer": a.answer} for a in resolved],
            calls=calls,
            latencies_ms=lat,
        )
        st.round_no += 1


@dataclass
class _RunState:
    graph: DependencyGraph | None = None
    plan: ExecutionPlan | None = None
    mem: MemoryState = MemoryState()
    answers: dict[str, SubAnswer] = field(default_factory=dict)
    round_no: int = 0
    augmentations: int = 0
    stage: str = "decompose"

    def ordered_answers(self) -> list[SubAnswer]:
        if self.plan is None:
            return []
        return [self.answers[i] for i in self.plan.order if i in self.answers]


def run_query(engine: Engine, query: str, query_id: str | None = None) -> tuple[FinalAnswer, RunTrace]:
    return engine.run(query, query_id)


__all__ = [
    "AugmentParseError",
    "DecompositionParseError",
    "Engine",
    "EngineConfig",
    "FinalAnswer",
    "GraphTooLarge",
    "LLMSession",
    "MemoryState",
    "MissingAnswer",
    "NoEvidence",
    "PipelineError",
    "ResolveParseError",
    "SubAnswer",
    "compose",
    "decompose",
    "maybe_augment",
    "merge_rank",
    "resolve_rank",
    "run_query",
    "summarize_memory",
]
