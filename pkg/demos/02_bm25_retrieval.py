"""
Lexical retrieval over a passage corpus
=======================================

Passages are tokenized by lowercasing and splitting on punctuation, then
scored with BM25 (k1 = 1.2, b = 0.75). Equal scores fall back to passage id.
"""

from pathlib import Path

from logicrag.retriever import load_corpus, retrieve

corpus = Path(__file__).resolve().parents[1] / "fixtures" / "warsaw" / "corpus.jsonl"
index = load_corpus(corpus)
print(index.doc_count, "passages, mean length", round(index.avg_doc_length, 1))

for query in ["Warsaw Pact headquarters", "tripartite talks Britain France Soviet Union"]:
    print("\n" + query)
    for hit in retrieve(index, query, k=3):
        print(f"  {hit.rank}. {hit.passage.id:<16} {hit.score:.3f}")
