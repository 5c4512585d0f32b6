"""Helpers for building scripted-provider fixtures.

:func:`plan_fixture` writes every reply a run over a given decomposition
can ask for, so the same fixture serves pruned, unpruned and
with-replacement runs. Usage numbers are fixed per template, which makes
token sums easy to predict in tests.
"""

from __future__ import annotations

import json
from typing import Mapping, Sequence

from .llm import ScriptedProvider

USAGE = {
    "decompose": (300, 60),
    "merge": (120, 15),
    "summarize": (250, 40),
    "resolve": (180, 20),
    "augment": (150, 10),
    "proceed": (90, 5),
    "compose": (200, 8),
    "judge": (60, 1),
}


def _entry(template: str, content: str) -> dict:
    p, c = USAGE[template]
    return {"content": content, "prompt_tokens": p, "completion_tokens": c}


def plan_fixture(
    subproblems: Sequence[str],
    edges: Sequence[tuple[int, int]] = (),
    *,
    query_id: str | None = None,
    final_answer: str = "final answer",
    answers: Mapping[str, str] | None = None,
    rounds: int | None = None,
    proceed: Mapping[int, bool] | None = None,
    augment: Mapping[int, dict] | None = None,
    judge: str = "yes",
) -> dict[str, dict]:
    """Fixture mapping ``"template:key"`` to reply entries.

    ``rounds`` defaults to enough rounds for one per subproblem plus two.
    Every resolve reply answers every node id, so any grouping works.
    ``proceed`` and ``augment`` override the per-round replies, which
    default to moving on and to no augmentation.
    """
    n = len(subproblems)
    rounds = rounds if rounds is not None else n + 2
    answers = dict(answers or {})
    ids = [f"p{i + 1}" for i in range(n + rounds)]
    prefix = f"{query_id}/" if query_id else ""
    resolve_reply = json.dumps({"answers": [{"id": i, "answer": answers.get(i, f"answer {i}")} for i in ids]})

    fx = {f"decompose:{prefix}0": _entry("decompose", json.dumps({"subproblems": list(subproblems),
                                                                   "edges": [list(e) for e in edges]}))}
    for r in range(rounds):
        fx[f"merge:{prefix}{r}"] = _entry("merge", f"unified query for round {r}")
        fx[f"summarize:{prefix}{r}"] = _entry("summarize", f"notes after round {r}")
        fx[f"resolve:{prefix}{r}"] = _entry("resolve", resolve_reply)
        aug = (augment or {}).get(r, {"augment": False, "subproblem": None, "parents": []})
        fx[f"augment:{prefix}{r}"] = _entry("augment", json.dumps(aug))
        fx[f"proceed:{prefix}{r}"] = _entry("proceed", json.dumps({"proceed": (proceed or {}).get(r, True)}))
    fx[f"compose:{prefix}0"] = _entry("compose", final_answer)
    fx[f"judge:{query_id or '0'}"] = _entry("judge", judge)
    return fx


def plan_provider(*args, **kwargs) -> ScriptedProvider:
    return ScriptedProvider.from_mapping(plan_fixture(*args, **kwargs))
