"""Shared fixtures: the acceptance verdict recorder and its summary section."""

import pytest

_verdicts = []


@pytest.fixture(scope="session")
def verdict():
    """Record one pass/fail line per acceptance check and echo it at the end."""

    def record(number, name, ok, details):
        line = (f"[criterion {number}] {name}: "
                f"{'PASS' if ok else 'FAIL'} ({details})")
        _verdicts.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance verdicts")
        for _, line in sorted(_verdicts):
            terminalreporter.write_line(line)
