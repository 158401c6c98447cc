from __future__ import annotations

import numpy as np
import pytest

NUM_CRITERIA = 10
_criteria: dict[int, dict[str, tuple[bool, str]]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record the outcome of an acceptance criterion for the terminal summary."""

    def record(number: int, passed: bool, detail: str, part: str = "") -> None:
        _criteria.setdefault(number, {})[part] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, NUM_CRITERIA + 1):
        if n in _criteria:
            parts = _criteria[n]
            passed = all(ok for ok, _ in parts.values())
            detail = "; ".join(d for _, d in parts.values())
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
