"""Collects acceptance verdicts and prints them after the run."""

import pytest

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records criterion ``n`` and returns ``ok``."""
    def record(n: int, ok: bool, detail: str) -> bool:
        _VERDICTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_VERDICTS[n])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
