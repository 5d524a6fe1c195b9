"""Collects acceptance verdicts and prints one line per criterion at the end."""

import pytest

VERDICTS = {}


def record(criterion, passed, detail):
    VERDICTS[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}")


@pytest.fixture
def verdict():
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS):
        passed, detail = VERDICTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'} | {detail}")
