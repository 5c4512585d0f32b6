"""Command-line entry point.

Subcommands: ``ingest``, ``ask``, ``eval``, ``compare-strategies`` and
``trace``. Human-readable text goes to stdout; machine artifacts are only
written to the files named by flags.

Exit codes: 0 success, 1 input/engine error, 2 I/O failure during ingest,
3 provider authentication failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import AppConfig, ConfigError, load_config, make_engine, make_provider
from .evaluation import DatasetParseError, compare_strategies, read_dataset, run_eval, subquery_similarity_matrix
from .llm import AuthError
from .reasoning import PipelineError
from .retriever import (
    CorpusError,
    HttpEmbeddingBackend,
    RetrievalError,
    attach_embeddings,
    ingest_corpus,
    load_index,
    read_jsonl,
    save_index,
)
from .trace import RunTrace, TraceFormatError, format_trace

EXIT_OK, EXIT_INPUT, EXIT_IO, EXIT_AUTH = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def cmd_ingest(args) -> int:
    try:
        with open(args.corpus, encoding="utf-8") as fh:
            index = ingest_corpus(read_jsonl(fh))
    except CorpusError as exc:
        _err(f"{args.corpus}: {exc}")
        return EXIT_INPUT
    except OSError as exc:
        _err(f"cannot read corpus: {exc}")
        return EXIT_IO
    if args.dense:
        if not args.backend or not args.model:
            _err("--dense needs --backend and --model")
            return EXIT_INPUT
        try:
            attach_embeddings(index, HttpEmbeddingBackend(args.backend, args.model), args.model)
        except RetrievalError as exc:
            _err(str(exc))
            return EXIT_INPUT
    try:
        save_index(index, args.index)
    except OSError as exc:
        _err(f"cannot write index: {exc}")
        return EXIT_IO
    print(f"ingested {index.doc_count} passages")
    return EXIT_OK


def _load(args) -> tuple[AppConfig, object]:
    cfg = load_config(args.config)
    path = args.index or cfg.retriever.get("index")
    if not path:
        raise ConfigError("no index path given (use --index)")
    try:
        index = load_index(path)
    except FileNotFoundError:
        raise ConfigError(f"index not found: {path}") from None
    return cfg, index


def cmd_ask(args) -> int:
    try:
        cfg, index = _load(args)
        engine = make_engine(cfg, index)
        if args.no_graph_pruning:
            engine = engine.with_config(graph_pruning=False)
        if args.no_context_pruning:
            engine = engine.with_config(context_pruning=False)
    except (ConfigError, RetrievalError, OSError) as exc:
        _err(str(exc))
        return EXIT_INPUT

    try:
        final, trace = engine.run(args.question)
    except PipelineError as exc:
        if args.trace:
            exc.trace.write(args.trace)
        _err(str(exc))
        return EXIT_AUTH if isinstance(exc.cause, AuthError) else EXIT_INPUT
    if args.trace:
        trace.write(args.trace)
    print(final.text)
    u = trace.usage
    flag = " (best effort: token budget exhausted)" if final.best_effort else ""
    print(f"tokens={u.total_tokens} prompt={u.prompt_tokens} completion={u.completion_tokens} "
          f"seconds={trace.wall_time_s:.2f} rounds={len(trace.rounds)}{flag}")
    return EXIT_OK


def _eval_setup(args):
    cfg, index = _load(args)
    dataset = read_dataset(args.dataset)
    engine = make_engine(cfg, index)
    judge = make_provider(cfg.judge) if cfg.judge else engine.provider
    return dataset, engine, judge


def cmd_eval(args) -> int:
    try:
        dataset, engine, judge = _eval_setup(args)
    except DatasetParseError as exc:
        _err(f"{args.dataset}: {exc}")
        return EXIT_INPUT
    except (ConfigError, RetrievalError, OSError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    report = run_eval(dataset, engine, judge, args.concurrency, progress=True)
    out = Path(args.out)
    report.write(out)
    if report.traces:
        out.with_suffix(".jaccard.csv").write_text(subquery_similarity_matrix(report.traces).to_csv())
    print(report.table())
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        dataset, engine, judge = _eval_setup(args)
    except DatasetParseError as exc:
        _err(f"{args.dataset}: {exc}")
        return EXIT_INPUT
    except (ConfigError, RetrievalError, OSError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    cmp = compare_strategies(dataset, engine, judge, args.concurrency)
    out = Path(args.out)
    out.write_text(json.dumps(cmp.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    for name, m in cmp.matrices.items():
        if m is not None:
            out.with_suffix(f".{name}.jaccard.csv").write_text(m.to_csv())
    print(cmp.table())
    return EXIT_OK


def cmd_trace(args) -> int:
    try:
        trace = RunTrace.read(args.path)
    except (OSError, TraceFormatError, KeyError) as exc:
        _err(f"{args.path}: {exc}")
        return EXIT_INPUT
    print(format_trace(trace))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="logicrag", description="Logic-aware multi-hop retrieval QA.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="index a JSONL passage corpus")
    p.add_argument("--corpus", required=True, help="JSONL file of {id, title, text} records")
    p.add_argument("--index", required=True, help="output index directory")
    p.add_argument("--dense", action="store_true", help="also store passage embeddings")
    p.add_argument("--backend", help="embeddings endpoint URL (dense mode)")
    p.add_argument("--model", help="embedding model id (dense mode)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("ask", help="answer one question")
    p.add_argument("--index", help="index directory (overrides the config)")
    p.add_argument("--question", required=True)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--trace", help="write the run trace to this JSONL file")
    p.add_argument("--no-graph-pruning", action="store_true", help="one retrieval round per subproblem")
    p.add_argument("--no-context-pruning", action="store_true", help="raw passages instead of summaries")
    p.set_defaults(func=cmd_ask)

    for name, func, help_ in (
        ("eval", cmd_eval, "evaluate a JSONL dataset"),
        ("compare-strategies", cmd_compare, "evaluate with and without replacement"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--index", help="index directory (overrides the config)")
        p.add_argument("--dataset", required=True, help="JSONL file of {id, question, answer, type} records")
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="report JSON path")
        p.add_argument("--concurrency", type=int, default=1, help="examples in flight (default 1)")
        p.set_defaults(func=func)

    p = sub.add_parser("trace", help="pretty-print a run trace")
    p.add_argument("path", help="trace JSONL file")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "concurrency", 1) < 1:
        _err("--concurrency must be >= 1")
        return EXIT_INPUT
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
