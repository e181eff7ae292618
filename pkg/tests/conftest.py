import numpy as np
import pytest

from oracles import central_difference, relative_error


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def numgrad():
    return central_difference


@pytest.fixture
def relerr():
    return relative_error


ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; printed at the end of the run."""

    def record(number, ok, detail):
        ACCEPTANCE.append((number, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
