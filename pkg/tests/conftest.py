from __future__ import annotations

from pathlib import Path

import pytest

from logicrag.llm import ScriptedProvider
from logicrag.retriever import load_corpus

ROOT = Path(__file__).resolve().parents[1]
WARSAW = ROOT / "fixtures" / "warsaw"

_criteria: dict[int, tuple[str, list[str]]] = {}


@pytest.fixture(scope="session")
def warsaw_index():
    return load_corpus(WARSAW / "corpus.jsonl")


@pytest.fixture
def warsaw_provider():
    return ScriptedProvider.from_file(WARSAW / "scripted.json")


@pytest.fixture(scope="session")
def warsaw_question():
    return (WARSAW / "question.txt").read_text().strip()


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    _, outcomes = _criteria.setdefault(number, (title, []))
    if report.when == "call" or report.outcome != "passed":
        outcomes.append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        report.criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcomes = _criteria[number]
        if any(o == "failed" for o in outcomes):
            verdict = "FAIL"
        elif outcomes and all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}")
