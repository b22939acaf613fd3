import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE_RESULTS: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    name = Path(report.nodeid.split("::")[0]).name
    if name != "test_acceptance.py":
        return
    test = report.nodeid.split("::")[-1]
    if test.startswith("test_a"):
        criterion = test.split("_")[1].upper()
        _ACCEPTANCE_RESULTS.append((criterion, test, report.outcome.upper()))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for criterion, test, outcome in sorted(set(_ACCEPTANCE_RESULTS)):
        word = "PASS" if outcome == "PASSED" else outcome
        terminalreporter.write_line(f"{criterion:4s} {word:6s} {test}")
