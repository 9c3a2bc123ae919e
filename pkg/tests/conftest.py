import numpy as np
import pytest

_ACCEPTANCE = []


def record(criterion: str, passed: bool, detail: str = ""):
    """Register one acceptance line; printed in the terminal summary."""
    _ACCEPTANCE.append((criterion, bool(passed), detail))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {crit}  {detail}")
