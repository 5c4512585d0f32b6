"""Scoring and batch evaluation.

String accuracy checks whether the normalized gold answer appears as a
contiguous run of words in the normalized generated answer. LLM accuracy
asks a judge model for a yes/no verdict. Reports aggregate both, together
with token, latency and retrieval-round statistics, overall and per
question type.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .llm import CompletionParams, PromptTemplate, Provider, TokenMeter, TokenUsage, complete, load_templates
from .reasoning import WITH_REPLACEMENT, WITHOUT_REPLACEMENT, Engine, PipelineError
from .retriever import normalize
from .trace import RunTrace, strip_timing

REPORT_FORMAT_VERSION = 1
MASKING_RULE = "entry (i, j) averages only over traces with more than max(i, j) rounds"


class EvalError(ValueError):
    pass


class EmptyGold(EvalError):
    pass


class NoTraces(EvalError):
    pass


class DatasetParseError(EvalError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class EvalExample:
    id: str
    question: str
    answer: str
    type: str | None = None

    def __post_init__(self):
        if not self.answer.strip():
            raise EmptyGold(f"example {self.id} has an empty gold answer")


def load_dataset(lines: Iterable[str]) -> list[EvalExample]:
    """Parse the JSONL dataset shape ``{"id", "question", "answer", "type"}``."""
    out, seen = [], set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(lineno, f"invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise DatasetParseError(lineno, "record is not an object")
        qid, question, answer = rec.get("id"), rec.get("question"), rec.get("answer")
        if isinstance(qid, int) and not isinstance(qid, bool):
            qid = str(qid)
        if not isinstance(qid, str) or not qid:
            raise DatasetParseError(lineno, "missing or non-string 'id'")
        if qid in seen:
            raise DatasetParseError(lineno, f"duplicate id {qid!r}")
        if not isinstance(question, str) or not question.strip():
            raise DatasetParseError(lineno, "missing or empty 'question'")
        if not isinstance(answer, str) or not answer.strip():
            raise DatasetParseError(lineno, "missing or empty 'answer'")
        qtype = rec.get("type")
        if qtype is not None and not isinstance(qtype, str):
            raise DatasetParseError(lineno, "'type' must be a string or null")
        seen.add(qid)
        out.append(EvalExample(qid, question, answer, qtype))
    return out


def read_dataset(path: str | Path) -> list[EvalExample]:
    with open(path, encoding="utf-8") as fh:
        return load_dataset(fh)


def string_accuracy(gold: str, generated: str) -> int:
    g = normalize(gold)
    if not g:
        raise EmptyGold("gold answer is empty after normalization")
    words = normalize(generated)
    n = len(g)
    return int(any(words[i:i + n] == g for i in range(len(words) - n + 1)))


def jaccard(a: str, b: str) -> float:
    """Word-level Jaccard similarity; two empty word sets count as identical."""
    wa, wb = set(normalize(a)), set(normalize(b))
    if not wa and not wb:
        return 1.0
    return len(wa & wb) / len(wa | wb)


@dataclass(frozen=True)
class JudgeVerdict:
    correct: int
    flagged: bool
    usage: TokenUsage
    replies: tuple[str, ...]


def llm_accuracy(
    judge: Provider,
    gold: str,
    generated: str,
    question: str,
    *,
    key: str = "0",
    template: PromptTemplate | None = None,
    params: CompletionParams | None = None,
) -> JudgeVerdict:
    """Ask the judge for yes/no; one retry on a non-conforming reply, then 0 with a flag."""
    if not gold.strip():
        raise EmptyGold("gold answer is empty")
    template = template or load_templates()["judge"]
    turns = template.render({"question": question, "gold": gold, "answer": generated or "(no answer)"})
    meter = TokenMeter(budget=None)
    replies = []
    for attempt_key in (key, f"{key}#retry"):
        resp = complete(judge, turns, params, template="judge", key=attempt_key, meter=meter, stage="judge")
        replies.append(resp.content)
        verdict = resp.content.strip().lower().rstrip(".")
        if verdict in ("yes", "no"):
            return JudgeVerdict(int(verdict == "yes"), False, meter.usage, tuple(replies))
    return JudgeVerdict(0, True, meter.usage, tuple(replies))


@dataclass
class JaccardMatrix:
    values: np.ndarray
    counts: np.ndarray

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def to_csv(self) -> str:
        header = "round," + ",".join(str(j + 1) for j in range(self.size))
        rows = [header]
        for i in range(self.size):
            rows.append(f"{i + 1}," + ",".join(repr(float(v)) for v in self.values[i]))
        return "\n".join(rows) + "\n"

    def to_dict(self) -> dict:
        return {"values": self.values.tolist(), "counts": self.counts.tolist(), "masking_rule": MASKING_RULE}


def subquery_similarity_matrix(traces: Sequence[RunTrace] | Sequence[Sequence[str]]) -> JaccardMatrix:
    """Mean pairwise Jaccard similarity of merged queries, indexed by round.

    Accepts traces or plain lists of per-round queries.
    """
    seqs = [t.merged_queries if isinstance(t, RunTrace) else list(t) for t in traces]
    if not seqs:
        raise NoTraces("need at least one trace")
    dim = max(len(s) for s in seqs)
    total = np.zeros((dim, dim))
    counts = np.zeros((dim, dim), dtype=int)
    for s in seqs:
        for i in range(len(s)):
            for j in range(i, len(s)):
                v = jaccard(s[i], s[j])
                total[i, j] += v
                counts[i, j] += 1
                if i != j:
                    total[j, i] += v
                    counts[j, i] += 1
    values = np.divide(total, counts, out=np.zeros_like(total), where=counts > 0)
    return JaccardMatrix(values, counts)


@dataclass
class MetricsReport:
    records: list[dict]
    aggregates: dict
    metadata: dict = field(default_factory=dict)
    traces: list[RunTrace] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "metadata": self.metadata,
            "aggregates": self.aggregates,
            "records": self.records,
        }

    def to_json(self, *, timing: bool = True) -> str:
        data = self.to_dict() if timing else strip_timing(self.to_dict())
        return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, data: Mapping) -> MetricsReport:
        if data.get("format_version") != REPORT_FORMAT_VERSION:
            raise EvalError(f"unsupported report format_version {data.get('format_version')!r}")
        return cls(list(data["records"]), dict(data["aggregates"]), dict(data.get("metadata", {})))

    @classmethod
    def read(cls, path: str | Path) -> MetricsReport:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def table(self) -> str:
        return format_table(self.aggregates)


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs) if xs else 0.0


def aggregate(records: Sequence[dict]) -> dict:
    """Aggregates recomputable from the per-example records alone."""

    def block(rows):
        return {
            "n": len(rows),
            "string_accuracy": _mean([r["string_correct"] for r in rows]),
            "llm_accuracy": _mean([r["llm_correct"] for r in rows]),
            "avg_tokens": _mean([r["usage"]["total_tokens"] for r in rows]),
            "avg_seconds": _mean([r["wall_time_s"] for r in rows]),
            "avg_rounds": _mean([r["rounds"] for r in rows]),
        }

    out = block(records)
    out["failed"] = sum(1 for r in records if r["error"] is not None)
    out["judge_flagged"] = sum(1 for r in records if r["judge_flagged"])
    total = TokenUsage()
    for r in records:
        total = total + TokenUsage.from_dict(r["usage"])
    out["usage"] = total.to_dict()
    types = sorted({r["type"] for r in records if r["type"] is not None})
    out["by_type"] = {t: block([r for r in records if r["type"] == t]) for t in types}
    return out


def format_table(aggregates: Mapping) -> str:
    cols = ("n", "string_accuracy", "llm_accuracy", "avg_tokens", "avg_seconds", "avg_rounds")
    heads = ("type", "n", "str-acc", "llm-acc", "avg tokens", "avg s", "avg rounds")
    rows = [("all", *(aggregates[c] for c in cols))]
    rows += [(t, *(b[c] for c in cols)) for t, b in aggregates.get("by_type", {}).items()]

    def fmt(v):
        return str(v) if isinstance(v, (int, str)) else f"{v:.3f}"

    cells = [heads] + [tuple(fmt(v) for v in row) for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(heads))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _evaluate_one(engine: Engine, judge: Provider | None, ex: EvalExample) -> tuple[dict, RunTrace | None]:
    started = time.perf_counter()
    answer, error, trace = "", None, None
    try:
        final, trace = engine.run(ex.question, query_id=ex.id)
        answer = final.text
    except PipelineError as exc:
        trace, error = exc.trace, f"{exc.stage}: {type(exc.cause).__name__}: {exc.cause}"
    except Exception as exc:  # never abort the batch
        error = f"{type(exc).__name__}: {exc}"

    rec = {
        "id": ex.id,
        "question": ex.question,
        "gold": ex.answer,
        "type": ex.type,
        "answer": answer,
        "status": trace.status if trace is not None else "error",
        "error": error,
        "string_correct": string_accuracy(ex.answer, answer) if answer else 0,
        "llm_correct": 0,
        "judge_flagged": False,
        "judge_usage": TokenUsage().to_dict(),
        "usage": (trace.usage if trace is not None else TokenUsage()).to_dict(),
        "rounds": len(trace.rounds) if trace is not None else 0,
        "wall_time_s": time.perf_counter() - started,
    }
    if judge is not None and answer:
        try:
            verdict = llm_accuracy(judge, ex.answer, answer, ex.question, key=ex.id, template=engine.templates["judge"])
            rec["llm_correct"] = verdict.correct
            rec["judge_flagged"] = verdict.flagged
            rec["judge_usage"] = verdict.usage.to_dict()
        except Exception as exc:
            rec["judge_flagged"] = True
            rec["error"] = rec["error"] or f"judge: {type(exc).__name__}: {exc}"
    return rec, trace


def run_eval(
    dataset: Sequence[EvalExample],
    engine: Engine,
    judge: Provider | None = None,
    concurrency: int = 1,
    *,
    progress: bool = False,
) -> MetricsReport:
    """Answer and score every example; per-example failures are recorded, not raised."""
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    results: dict[str, tuple[dict, RunTrace | None]] = {}
    done = 0

    def one(ex):
        return ex.id, _evaluate_one(engine, judge, ex)

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        for qid, res in pool.map(one, dataset):
            results[qid] = res
            done += 1
            if progress:
                print(f"[{done}/{len(dataset)}] {qid}", flush=True)

    records = [results[ex.id][0] for ex in dataset]
    traces = [results[ex.id][1] for ex in dataset if results[ex.id][1] is not None]
    metadata = {
        "engine": engine.config.to_dict(),
        "judge": judge is not None,
        "examples": len(dataset),
        "jaccard_masking_rule": MASKING_RULE,
    }
    return MetricsReport(records, aggregate(records), metadata, traces)


@dataclass
class StrategyComparison:
    reports: dict[str, MetricsReport]
    matrices: dict[str, JaccardMatrix | None]

    def to_dict(self) -> dict:
        rows = {}
        for name, rep in self.reports.items():
            a = rep.aggregates
            rows[name] = {k: a[k] for k in ("avg_tokens", "string_accuracy", "llm_accuracy", "avg_rounds", "avg_seconds")}
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "paired": rows,
            "reports": {k: r.to_dict() for k, r in self.reports.items()},
            "jaccard": {k: (m.to_dict() if m is not None else None) for k, m in self.matrices.items()},
        }

    def table(self) -> str:
        lines = [f"{'strategy':<22}{'avg tokens':>12}{'str-acc':>10}{'llm-acc':>10}{'avg rounds':>12}"]
        for name, rep in self.reports.items():
            a = rep.aggregates
            lines.append(f"{name:<22}{a['avg_tokens']:>12.1f}{a['string_accuracy']:>10.3f}"
                         f"{a['llm_accuracy']:>10.3f}{a['avg_rounds']:>12.2f}")
        return "\n".join(lines)


def compare_strategies(
    dataset: Sequence[EvalExample],
    engine: Engine,
    judge: Provider | None = None,
    concurrency: int = 1,
) -> StrategyComparison:
    """Run the same dataset with and without replacement."""
    reports, matrices = {}, {}
    for strategy in (WITH_REPLACEMENT, WITHOUT_REPLACEMENT):
        rep = run_eval(dataset, engine.with_config(strategy=strategy), judge, concurrency)
        reports[strategy] = rep
        matrices[strategy] = subquery_similarity_matrix(rep.traces) if rep.traces else None
    return StrategyComparison(reports, matrices)
