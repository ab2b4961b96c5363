"""Shared test plumbing.

The acceptance suite reports one PASS/FAIL line per criterion in the
terminal summary, independent of output capture.
"""

import re

_ACCEPTANCE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    match = _ACCEPTANCE.search(report.nodeid)
    if match is None:
        return
    number = int(match.group(1))
    name = match.group(2).replace("_", " ")
    if report.when == "call":
        _results[number] = (name, report.outcome.upper())
    elif report.when == "setup" and report.outcome != "passed":
        _results[number] = (name, report.outcome.upper())


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        name, outcome = _results[number]
        verdict = "PASS" if outcome == "PASSED" else outcome
        terminalreporter.write_line(f"criterion {number:2d} ({name}): {verdict}")
