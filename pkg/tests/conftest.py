from __future__ import annotations

import time
from contextlib import contextmanager

import pytest

# criterion number -> one-line verdict
ACCEPTANCE: dict[int, str] = {}


class Outcome:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    """Time a block against its runtime bound and record a one-line verdict."""

    @contextmanager
    def run(number: int, title: str, limit_seconds: float):
        outcome = Outcome()
        start = time.perf_counter()
        try:
            yield outcome
        except BaseException as exc:
            elapsed = time.perf_counter() - start
            ACCEPTANCE[number] = f"FAIL  {number:>2}. {title} ({elapsed:.1f}s): {exc}".splitlines()[0]
            raise
        elapsed = time.perf_counter() - start
        ok = elapsed < limit_seconds
        verdict = "PASS" if ok else "FAIL"
        bound = f"{elapsed:.1f}s < {limit_seconds:g}s" if ok else f"{elapsed:.1f}s exceeds {limit_seconds:g}s"
        ACCEPTANCE[number] = f"{verdict}  {number:>2}. {title} ({bound}) {outcome.detail}".rstrip()
        assert ok, ACCEPTANCE[number]

    return run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
