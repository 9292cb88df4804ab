"""Shared fixtures plus a per-criterion summary for the acceptance suite.

Every test in test_acceptance.py carries a one-line docstring naming its
criterion; after the run, one PASS/FAIL line per criterion is printed so the
suite doubles as a checklist.
"""

import numpy as np
import pytest

_acceptance_labels: dict[str, str] = {}
_acceptance_outcomes: dict[str, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        if "test_acceptance.py" in item.nodeid:
            doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
            _acceptance_labels[item.nodeid] = doc


def pytest_runtest_logreport(report):
    if report.nodeid not in _acceptance_labels:
        return
    if report.when == "call":
        _acceptance_outcomes[report.nodeid] = report.outcome
    elif report.when == "setup" and report.outcome != "passed":
        _acceptance_outcomes[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_labels:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, label in _acceptance_labels.items():
        outcome = _acceptance_outcomes.get(nodeid, "not run")
        flag = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"[{flag}] {label}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
