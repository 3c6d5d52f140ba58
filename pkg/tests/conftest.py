from __future__ import annotations

import pytest

_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdicts() -> list[str]:
    """Pass/fail lines collected by the acceptance suite, echoed in the terminal summary."""
    return _VERDICTS


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
