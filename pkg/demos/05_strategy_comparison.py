"""
With and without replacement
============================

Without replacement each rank is visited once. With replacement the model
may ask to stay on a rank, which costs extra rounds. The Jaccard matrix
shows how much the merged queries of different rounds overlap.
"""

import numpy as np

from logicrag import EvalExample, Engine, EngineConfig, ScriptedProvider
from logicrag.evaluation import compare_strategies
from logicrag.testing import plan_fixture

fixture, dataset = {}, []
for i, stay in enumerate([{0: False}, {}, {1: False}]):
    qid = f"q{i}"
    fixture.update(plan_fixture(["first", "second", "third"], [(0, 1), (1, 2)], query_id=qid,
                                final_answer="answer", proceed=stay))
    dataset.append(EvalExample(qid, f"question {i}?", "answer"))
provider = ScriptedProvider.from_mapping(fixture)

engine = Engine(EngineConfig(), None, provider, retriever=lambda q, k: [])
result = compare_strategies(dataset, engine, judge=provider)
print(result.table())

np.set_printoptions(precision=2)
for name, matrix in result.matrices.items():
    print("\n" + name)
    print(matrix.values)
