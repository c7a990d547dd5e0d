"""Shared pytest hooks: the acceptance suite's PASS/FAIL lines go into the summary."""
import pytest

_LINES = {}


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, ok, text)`` prints and records one PASS/FAIL line."""

    def record(n: int, ok: bool, text: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {n}: {text}"
        _LINES[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
