import json

import pytest

from logicrag.cli import main
from logicrag.evaluation import MetricsReport
from logicrag.trace import RunTrace
from logicrag.testing import plan_fixture

from .conftest import WARSAW

CORPUS = [
    {"id": "a", "title": "A", "text": "Alpha facts about the first topic."},
    {"id": "b", "title": "B", "text": "Beta facts about a second topic."},
    {"id": "c", "title": None, "text": "Gamma is unrelated to either one."},
]


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


@pytest.fixture
def workspace(tmp_path):
    """Corpus, built index, a two-question dataset and its scripted fixture."""
    write_jsonl(tmp_path / "corpus.jsonl", CORPUS)
    assert main(["ingest", "--corpus", str(tmp_path / "corpus.jsonl"), "--index", str(tmp_path / "ix")]) == 0
    fx = {}
    fx.update(plan_fixture(["alpha topic"], query_id="q1", final_answer="Alpha"))
    fx.update(plan_fixture(["beta topic", "second #1"], [(0, 1)], query_id="q2", final_answer="Gamma", judge="no"))
    fx.update(plan_fixture(["r1", "r2", "r3", "child #1 #2", "child #3"], [(0, 3), (1, 3), (2, 4)]))
    (tmp_path / "fx.json").write_text(json.dumps(fx))
    (tmp_path / "config.json").write_text(json.dumps({
        "top_k": 2,
        "provider": {"kind": "scripted", "fixture": "fx.json"},
        "retriever": {"index": "ix"},
    }))
    write_jsonl(tmp_path / "data.jsonl", [
        {"id": "q1", "question": "What is alpha?", "answer": "alpha", "type": "bridge"},
        {"id": "q2", "question": "What is beta?", "answer": "beta", "type": "comparison"},
    ])
    return tmp_path


def test_ingest(tmp_path, capsys):
    write_jsonl(tmp_path / "c.jsonl", CORPUS)
    assert main(["ingest", "--corpus", str(tmp_path / "c.jsonl"), "--index", str(tmp_path / "ix")]) == 0
    assert capsys.readouterr().out.strip() == "ingested 3 passages"
    assert (tmp_path / "ix" / "manifest.json").exists()


def test_ingest_malformed_line(tmp_path, capsys):
    (tmp_path / "c.jsonl").write_text(json.dumps(CORPUS[0]) + "\n{broken\n")
    assert main(["ingest", "--corpus", str(tmp_path / "c.jsonl"), "--index", str(tmp_path / "ix")]) == 1
    assert "line 2" in capsys.readouterr().err


def test_ingest_unwritable(tmp_path, capsys):
    write_jsonl(tmp_path / "c.jsonl", CORPUS)
    (tmp_path / "file").write_text("x")
    assert main(["ingest", "--corpus", str(tmp_path / "c.jsonl"), "--index", str(tmp_path / "file" / "ix")]) == 2
    assert "cannot write index" in capsys.readouterr().err


def test_ingest_missing_corpus(tmp_path):
    assert main(["ingest", "--corpus", str(tmp_path / "nope.jsonl"), "--index", str(tmp_path / "ix")]) == 2


def test_ask_warsaw(tmp_path, capsys):
    assert main(["ingest", "--corpus", str(WARSAW / "corpus.jsonl"), "--index", str(tmp_path / "ix")]) == 0
    capsys.readouterr()
    question = (WARSAW / "question.txt").read_text().strip()
    rc = main(["ask", "--index", str(tmp_path / "ix"), "--config", str(WARSAW / "config.json"),
               "--question", question, "--trace", str(tmp_path / "t.jsonl")])
    out = capsys.readouterr().out.splitlines()
    assert rc == 0 and out[0] == "June"
    assert out[1].startswith("tokens=3276 prompt=3016 completion=260 ") and out[1].endswith("rounds=3")
    assert len(RunTrace.read(tmp_path / "t.jsonl").rounds) == 3


def test_ask_missing_index(workspace, capsys):
    rc = main(["ask", "--index", str(workspace / "missing"), "--config", str(workspace / "config.json"), "--question", "q"])
    assert rc == 1 and "index not found" in capsys.readouterr().err


def test_ask_graph_pruning_flag(workspace, capsys):
    base = ["ask", "--config", str(workspace / "config.json"), "--question", "five"]
    assert main(base) == 0
    assert capsys.readouterr().out.strip().endswith("rounds=2")
    assert main(base + ["--no-graph-pruning"]) == 0
    assert capsys.readouterr().out.strip().endswith("rounds=5")


def test_ask_engine_error_names_stage(workspace, capsys):
    fx = json.loads((workspace / "fx.json").read_text())
    del fx["compose:0"]
    (workspace / "fx.json").write_text(json.dumps(fx))
    rc = main(["ask", "--config", str(workspace / "config.json"), "--question", "five", "--trace", str(workspace / "t.jsonl")])
    assert rc == 1 and "'compose'" in capsys.readouterr().err
    assert RunTrace.read(workspace / "t.jsonl").status == "error"


def test_ask_auth_failure(workspace, capsys, monkeypatch):
    from http.server import BaseHTTPRequestHandler, HTTPServer
    import threading

    class Deny(BaseHTTPRequestHandler):
        def do_POST(self):
            self.rfile.read(int(self.headers["Content-Length"]))
            self.send_response(401)
            self.send_header("Content-Length", "0")
            self.end_headers()

        def log_message(self, *a):
            pass

    srv = HTTPServer(("127.0.0.1", 0), Deny)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    monkeypatch.setenv("TEST_KEY", "bad")
    (workspace / "live.json").write_text(json.dumps({
        "provider": {"kind": "openai", "base_url": f"http://127.0.0.1:{srv.server_port}", "model": "m",
                     "api_key_env": "TEST_KEY"},
        "retriever": {"index": "ix"},
    }))
    try:
        assert main(["ask", "--config", str(workspace / "live.json"), "--question", "q"]) == 3
    finally:
        srv.shutdown()


def test_eval(workspace, capsys):
    out = workspace / "report.json"
    args = ["eval", "--config", str(workspace / "config.json"), "--dataset", str(workspace / "data.jsonl"), "--out", str(out)]
    assert main(args) == 0
    rep = MetricsReport.read(out)
    assert rep.aggregates["string_accuracy"] == 0.5 and rep.aggregates["llm_accuracy"] == 0.5
    assert (workspace / "report.jaccard.csv").read_text().startswith("round,1,2")
    assert "str-acc" in capsys.readouterr().out
    first = MetricsReport.read(out).to_json(timing=False)
    assert main(args + ["--concurrency", "2"]) == 0
    assert MetricsReport.read(out).to_json(timing=False) == first


def test_eval_bad_dataset(workspace, capsys):
    (workspace / "bad.jsonl").write_text('{"id": "x"}\n')
    rc = main(["eval", "--config", str(workspace / "config.json"), "--dataset", str(workspace / "bad.jsonl"),
               "--out", str(workspace / "r.json")])
    assert rc == 1 and "line 1" in capsys.readouterr().err


def test_eval_bad_concurrency(workspace):
    assert main(["eval", "--config", str(workspace / "config.json"), "--dataset", str(workspace / "data.jsonl"),
                 "--out", str(workspace / "r.json"), "--concurrency", "0"]) == 1


def test_compare_strategies(workspace, capsys):
    out = workspace / "cmp.json"
    rc = main(["compare-strategies", "--config", str(workspace / "config.json"),
               "--dataset", str(workspace / "data.jsonl"), "--out", str(out)])
    assert rc == 0
    data = json.loads(out.read_text())
    assert set(data["paired"]) == {"with_replacement", "without_replacement"}
    assert (workspace / "cmp.with_replacement.jaccard.csv").exists()
    assert "with_replacement" in capsys.readouterr().out


def test_trace_command(workspace, capsys):
    main(["ask", "--config", str(workspace / "config.json"), "--question", "five", "--no-graph-pruning",
          "--trace", str(workspace / "t.jsonl")])
    capsys.readouterr()
    assert main(["trace", str(workspace / "t.jsonl")]) == 0
    out = capsys.readouterr().out
    assert sum(1 for line in out.splitlines() if line.startswith("    ")) == 5


def test_trace_empty_file(tmp_path, capsys):
    (tmp_path / "t.jsonl").write_text("")
    assert main(["trace", str(tmp_path / "t.jsonl")]) == 1
    assert "empty trace" in capsys.readouterr().err


@pytest.mark.parametrize("cmd", [[], ["ingest"], ["ask"], ["eval"], ["compare-strategies"], ["trace"]])
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        main(cmd + ["--help"])
    assert info.value.code == 0
    assert "usage:" in capsys.readouterr().out
