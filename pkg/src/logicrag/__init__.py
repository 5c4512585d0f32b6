"""Logic-aware retrieval-augmented generation for multi-hop questions."""

from .dag import DependencyGraph, ExecutionPlan, augment_graph, build_graph, build_plan, check_acyclic, parents_of
from .evaluation import EvalExample, compare_strategies, jaccard, run_eval, string_accuracy, subquery_similarity_matrix
from .llm import HttpProvider, ScriptedProvider, TokenUsage
from .reasoning import Engine, EngineConfig, FinalAnswer, run_query
from .retriever import CorpusIndex, ingest_corpus, load_corpus, load_index, normalize, retrieve, save_index
from .trace import RunTrace

__version__ = "0.1.0"

__all__ = [
    "CorpusIndex",
    "DependencyGraph",
    "Engine",
    "EngineConfig",
    "EvalExample",
    "ExecutionPlan",
    "FinalAnswer",
    "HttpProvider",
    "RunTrace",
    "ScriptedProvider",
    "TokenUsage",
    "augment_graph",
    "build_graph",
    "build_plan",
    "check_acyclic",
    "compare_strategies",
    "ingest_corpus",
    "jaccard",
    "load_corpus",
    "load_index",
    "normalize",
    "parents_of",
    "retrieve",
    "run_eval",
    "run_query",
    "save_index",
    "string_accuracy",
    "subquery_similarity_matrix",
]
