import json

import pytest

from logicrag.reasoning import Engine, EngineConfig
from logicrag.testing import plan_provider
from logicrag.trace import RunTrace, TraceFormatError, format_trace, strip_timing

from .test_reasoning import FIVE, CountingRetriever


@pytest.fixture
def trace():
    eng = Engine(EngineConfig(), None, plan_provider(*FIVE), retriever=CountingRetriever())
    return eng.run("five node question")[1]


def test_layout(trace):
    records = trace.to_records()
    assert records[0]["record"] == "header" and records[-1]["record"] == "footer"
    assert {r["record"] for r in records[1:-1]} <= {"call", "round", "graph", "note", "error"}
    assert records[-1]["rounds"] == 2 and records[-1]["usage"] == trace.usage.to_dict()


def test_round_record_fields(trace):
    r = trace.rounds[0]
    assert set(r) >= {"round", "rank", "subproblems", "merged_query", "retrieved", "memory_before",
                      "memory_after", "answers", "calls", "latencies_ms"}
    assert [x["rank"] for x in r["retrieved"]] == [1, 2, 3]
    assert r["memory_before"] == "" and r["memory_after"] == "notes after round 0"


def test_jsonl_round_trip(trace, tmp_path):
    path = tmp_path / "t.jsonl"
    trace.write(path)
    back = RunTrace.read(path)
    assert back == trace
    assert back.to_jsonl() == path.read_text()


def test_strip_timing(trace):
    stripped = strip_timing(trace.to_records())
    text = json.dumps(stripped)
    assert "latenc" not in text and "wall_time_s" not in text
    assert stripped[-1]["final_answer"] == trace.final_answer


@pytest.mark.parametrize("text,msg", [
    ("", "empty"),
    ('{"record": "call"}\n', "header"),
    ('{"record": "header", "format_version": 1, "query": "q"}\n', "footer"),
    ('{"record": "header", "format_version": 9, "query": "q"}\n{"record": "footer"}\n', "format_version"),
    ("not json\n", "line 1"),
])
def test_bad_traces(text, msg):
    with pytest.raises(TraceFormatError, match=msg):
        RunTrace.from_jsonl(text)


def test_format_trace(trace):
    out = format_trace(trace)
    assert "graph: 5 subproblems, 3 edges" in out
    assert out.count("unified query for round") == 2
    assert f"tokens: {trace.usage.total_tokens}" in out
