"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import time
from contextlib import contextmanager

import pytest

_RESULTS = {}


@pytest.fixture
def criterion(record_property):
    """``with criterion(n, title, budget_s): ...`` tags the test and enforces its runtime budget."""

    @contextmanager
    def run(number, title, budget):
        record_property("criterion", number)
        record_property("title", title)
        t0 = time.perf_counter()
        yield
        elapsed = time.perf_counter() - t0
        assert elapsed < budget, f"criterion {number} took {elapsed:.1f}s, budget {budget}s"

    return run


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    key = props["criterion"]
    if report.when == "call" or report.failed:
        prev = _RESULTS.get(key)
        passed = report.passed and (prev is None or prev[0])
        _RESULTS[key] = (passed, props["title"], report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS):
        passed, title, duration = _RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {title}  ({duration:.1f}s)")
