import numpy as np
import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def accept():
    """Record one acceptance line: accept(number, passed, detail)."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")
        print(_ACCEPTANCE[-1])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
