import numpy as np
import pytest
from hypothesis import settings

from battwin.params import CellParameters

settings.register_profile("battwin", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("battwin")


@pytest.fixture(scope="session")
def truth():
    return CellParameters()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, name, ok, detail):
        line = f"ACCEPTANCE {number} {name}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
