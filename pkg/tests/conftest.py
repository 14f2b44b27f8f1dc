import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def report():
    """Print a PASS/FAIL line now and repeat it in the terminal summary."""
    def _report(number, title, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}  {title}: {detail}"
        print("\n" + line)
        ACCEPTANCE_LINES.append(line)
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
