import numpy as np
import pytest

from mvheat.tensor import precision

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(autouse=True)
def float64():
    """Verification runs at 64-bit precision unless a test says otherwise."""
    with precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail, seconds)``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(number: int, passed: bool, detail: str, seconds: float) -> str:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}  ({seconds:.1f} s)"
        lines[number] = line
        print(line)
        return line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
