import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    """Collected by the acceptance tests; printed again in the terminal summary."""
    _criteria.append((name, passed, detail))
    print(f"\n[{'PASS' if passed else 'FAIL'}] {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _criteria:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
