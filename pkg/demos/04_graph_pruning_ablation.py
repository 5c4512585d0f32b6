"""
Graph pruning: one retrieval per rank, or one per subproblem
============================================================

Five subproblems in two ranks. With pruning the three roots share one
merged query, and so do the two children. Without it every subproblem
gets its own round.
"""

from logicrag import Engine, EngineConfig
from logicrag.testing import plan_provider

subproblems = ["r1", "r2", "r3", "child of #1 and #2", "child of #3"]
edges = [(0, 3), (1, 3), (2, 4)]

calls = []


def retriever(query, k):
    calls.append(query)
    return []


for pruning in (True, False):
    calls.clear()
    engine = Engine(EngineConfig(graph_pruning=pruning, max_augmentations=0), None,
                    plan_provider(subproblems, edges), retriever=retriever)
    _, trace = engine.run("five-part question")
    print(f"graph_pruning={pruning}: {len(calls)} retrievals, {trace.usage.total_tokens} tokens")
