"""Collects one verdict per acceptance criterion and prints them after the run."""
import pytest

VERDICTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """``verdict(k, passed, detail)`` records criterion k; the calling test should then assert ``passed``."""

    def record(k: int, passed: bool, detail: str) -> bool:
        VERDICTS[k] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        ok, detail = VERDICTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
