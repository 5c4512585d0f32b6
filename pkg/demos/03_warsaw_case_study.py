"""
A three-hop question end to end
===============================

The scripted provider replays fixed model replies, so the whole loop runs
offline: decompose, then per rank merge, retrieve, summarize and resolve,
then compose the final answer.
"""

from pathlib import Path

from logicrag import Engine, EngineConfig, ScriptedProvider, load_corpus
from logicrag.trace import format_trace

here = Path(__file__).resolve().parents[1] / "fixtures" / "warsaw"
engine = Engine(EngineConfig(top_k=3), load_corpus(here / "corpus.jsonl"),
                ScriptedProvider.from_file(here / "scripted.json"))

question = (here / "question.txt").read_text().strip()
answer, trace = engine.run(question)

# the per-round table shows what each merged query pulled in
print(format_trace(trace))

for sub in answer.sub_answers:
    print(sub.id, "->", sub.answer)
