"""Collects one pass/fail line per acceptance criterion and prints them at the end."""

import pytest

_LINES = {}


class CriterionLog:
    def record(self, number: int, title: str, passed: bool, detail: str) -> None:
        _LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {title}: {detail}"
        print(_LINES[number])


@pytest.fixture(scope="session")
def criteria():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
