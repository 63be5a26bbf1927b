import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_REPORT = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion and return the flag."""

    def _report(name, ok, detail=""):
        line = f"{name}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        print(line)
        _REPORT.append(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)
