import json
import math

import numpy as np
import pytest

from logicrag.evaluation import (
    DatasetParseError,
    EmptyGold,
    EvalExample,
    MetricsReport,
    NoTraces,
    aggregate,
    compare_strategies,
    jaccard,
    llm_accuracy,
    load_dataset,
    run_eval,
    string_accuracy,
    subquery_similarity_matrix,
)
from logicrag.llm import ScriptedProvider
from logicrag.reasoning import WITH_REPLACEMENT, WITHOUT_REPLACEMENT, Engine, EngineConfig
from logicrag.testing import USAGE, plan_fixture

from .oracles import word_subsequence
from .test_reasoning import CountingRetriever


@pytest.mark.parametrize("gold,gen,expected", [
    ("June", "The talks began in June 1939.", 1),
    ("june", "JUNE!", 1),
    ("New York", "New York City", 1),
    ("New York", "Newark, New Jersey", 0),
    ("New York", "york new", 0),
    ("June", "", 0),
    ("Soviet Union", "the Soviet  Union.", 1),
])
def test_string_accuracy(gold, gen, expected):
    assert string_accuracy(gold, gen) == expected == word_subsequence(gold, gen)


def test_string_accuracy_verbatim_gold():
    for gold in ("June", "Warsaw Pact", "1 2 3"):
        assert string_accuracy(gold, gold) == 1


def test_empty_gold():
    with pytest.raises(EmptyGold):
        string_accuracy("!!", "x")


@pytest.mark.parametrize("a,b,expected", [
    ("the cat sat on the mat", "the cat lay on a mat", 4 / 7),
    ("a b c d e", "a b c d e f g", 5 / 7),
    ("", "", 1.0),
    ("", "x", 0.0),
    ("X y", "x Y", 1.0),
])
def test_jaccard(a, b, expected):
    assert jaccard(a, b) == pytest.approx(expected, abs=1e-9)


class TestMatrix:
    def test_identical_sequences(self):
        m = subquery_similarity_matrix([["a b", "c d"], ["a b", "c d"]])
        assert np.array_equal(m.values, [[1.0, 0.0], [0.0, 1.0]])

    def test_symmetric_with_unit_diagonal(self):
        m = subquery_similarity_matrix([["a b c", "a b", "z"], ["x y", "x"]])
        assert np.allclose(m.values, m.values.T) and np.allclose(np.diag(m.values), 1.0)
        assert m.values[0, 1] == pytest.approx((2 / 3 + 1 / 2) / 2)
        # round 3 only exists in the first trace
        assert m.counts[0, 2] == 1 and m.values[0, 2] == 0.0 and m.counts[0, 1] == 2

    def test_csv(self):
        csv = subquery_similarity_matrix([["a", "a"]]).to_csv().splitlines()
        assert csv == ["round,1,2", "1,1.0,1.0", "2,1.0,1.0"]

    def test_no_traces(self):
        with pytest.raises(NoTraces):
            subquery_similarity_matrix([])


class TestJudge:
    def judge(self, *replies):
        fx = {"judge:0": replies[0]}
        if len(replies) > 1:
            fx["judge:0#retry"] = replies[1]
        return ScriptedProvider.from_mapping(fx)

    def test_yes(self):
        v = llm_accuracy(self.judge("Yes."), "June", "June 1939", "q")
        assert (v.correct, v.flagged) == (1, False)

    def test_no(self):
        assert llm_accuracy(self.judge("no"), "June", "July", "q").correct == 0

    def test_nonconforming_twice(self):
        v = llm_accuracy(self.judge("maybe", "perhaps"), "June", "x", "q")
        assert (v.correct, v.flagged, v.replies) == (0, True, ("maybe", "perhaps"))

    def test_retry_recovers(self):
        assert llm_accuracy(self.judge("hmm", "yes"), "June", "x", "q").correct == 1


class TestDataset:
    def test_parse(self):
        lines = ['{"id": "a", "question": "q?", "answer": "x", "type": "bridge"}', "",
                 '{"id": 2, "question": "r?", "answer": "y"}']
        assert load_dataset(lines) == [EvalExample("a", "q?", "x", "bridge"), EvalExample("2", "r?", "y")]

    @pytest.mark.parametrize("bad", ["{", '{"id": "a", "question": "q"}', '{"id": "a", "question": "q", "answer": " "}', "[1]"])
    def test_errors_carry_line(self, bad):
        with pytest.raises(DatasetParseError) as info:
            load_dataset(['{"id": "z", "question": "q", "answer": "a"}', bad])
        assert info.value.line == 2

    def test_duplicate(self):
        rec = '{"id": "a", "question": "q", "answer": "a"}'
        with pytest.raises(DatasetParseError):
            load_dataset([rec, rec])


def scripted_dataset(specs):
    """specs: list of (id, gold, final_answer, subproblems, edges, extra kwargs)."""
    fx, data = {}, []
    for qid, gold, final, subs, edges, kw in specs:
        fx.update(plan_fixture(subs, edges, query_id=qid, final_answer=final, **kw))
        data.append(EvalExample(qid, f"question {qid}?", gold))
    return data, ScriptedProvider.from_mapping(fx)


def make_engine(provider, **cfg):
    return Engine(EngineConfig(**cfg), None, provider, retriever=CountingRetriever())


TWO = [("q1", "June", "June", ["a"], [], {}), ("q2", "Paris", "Lyon", ["a", "b"], [(0, 1)], {"judge": "no"})]


class TestRunEval:
    def test_half_correct(self):
        data, provider = scripted_dataset(TWO)
        rep = run_eval(data, make_engine(provider), provider)
        assert rep.aggregates["string_accuracy"] == 0.5 and rep.aggregates["llm_accuracy"] == 0.5
        assert [r["id"] for r in rep.records] == ["q1", "q2"]
        assert [r["rounds"] for r in rep.records] == [1, 2]

    def test_aggregates_recompute(self):
        data, provider = scripted_dataset(TWO)
        rep = run_eval(data, make_engine(provider), provider)
        recs = rep.records
        assert rep.aggregates["avg_tokens"] == math.fsum(r["usage"]["total_tokens"] for r in recs) / len(recs)
        assert rep.aggregates == aggregate(json.loads(rep.to_json())["records"])
        for r, t in zip(recs, rep.traces):
            assert r["usage"]["total_tokens"] == sum(c["usage"]["total_tokens"] for c in t.calls)

    def test_judge_tokens_kept_apart(self):
        data, provider = scripted_dataset(TWO)
        rep = run_eval(data, make_engine(provider), provider)
        assert all(r["judge_usage"]["total_tokens"] == sum(USAGE["judge"]) for r in rep.records)
        assert all(all(c["template"] != "judge" for c in t.calls) for t in rep.traces)

    def test_concurrency_invariant(self):
        specs = [(f"q{i}", "answer", "the answer", ["a", "b"][: 1 + i % 2], [(0, 1)] if i % 2 else [], {})
                 for i in range(6)]
        outs = []
        for c in (1, 4):
            data, provider = scripted_dataset(specs)
            rep = run_eval(data, make_engine(provider), provider, concurrency=c)
            outs.append(rep.to_json(timing=False))
        assert outs[0] == outs[1]

    def test_failure_recorded(self):
        data, provider = scripted_dataset(TWO)
        del provider.fixture[("compose", "q2/0")]
        rep = run_eval(data, make_engine(provider), provider)
        bad = rep.records[1]
        assert bad["status"] == "error" and bad["error"].startswith("compose: FixtureMiss")
        assert rep.aggregates["failed"] == 1 and bad["string_correct"] == 0

    def test_by_type(self):
        data, provider = scripted_dataset(TWO)
        data = [EvalExample(e.id, e.question, e.answer, t) for e, t in zip(data, ("bridge", "comparison"))]
        rep = run_eval(data, make_engine(provider), provider)
        assert rep.aggregates["by_type"]["bridge"]["string_accuracy"] == 1.0
        assert rep.aggregates["by_type"]["comparison"]["n"] == 1

    def test_report_round_trip(self, tmp_path):
        data, provider = scripted_dataset(TWO)
        rep = run_eval(data, make_engine(provider), provider)
        rep.write(tmp_path / "r.json")
        back = MetricsReport.read(tmp_path / "r.json")
        assert back.to_json() == rep.to_json()
        assert "avg tokens" in rep.table()


class TestCompare:
    def test_looping_costs_more(self):
        specs = [("q1", "x", "x", ["a", "b"], [(0, 1)], {"proceed": {0: False}})]
        data, provider = scripted_dataset(specs)
        cmp = compare_strategies(data, make_engine(provider), provider)
        w, wo = cmp.reports[WITH_REPLACEMENT].aggregates, cmp.reports[WITHOUT_REPLACEMENT].aggregates
        assert w["avg_tokens"] > wo["avg_tokens"] and w["avg_rounds"] == 3 and wo["avg_rounds"] == 2
        assert cmp.matrices[WITH_REPLACEMENT].size == 3
        assert set(cmp.to_dict()["paired"]) == {WITH_REPLACEMENT, WITHOUT_REPLACEMENT}

    def test_single_rank_same_answers(self):
        data, provider = scripted_dataset([("q1", "x", "x", ["a", "b"], [], {})])
        cmp = compare_strategies(data, make_engine(provider), provider)
        w, wo = (cmp.reports[s] for s in (WITH_REPLACEMENT, WITHOUT_REPLACEMENT))
        assert [r["answer"] for r in w.records] == [r["answer"] for r in wo.records]
        # the only difference is the one proceed call
        assert w.aggregates["avg_tokens"] - wo.aggregates["avg_tokens"] == sum(USAGE["proceed"])
