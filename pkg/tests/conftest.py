import numpy as np
import pytest

from diffspot.covers import make_cover, make_same_pairs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cover():
    return make_cover(np.random.default_rng(7), 256, 192)


@pytest.fixture(scope="session")
def same_pairs():
    return make_same_pairs(12, seed=3)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def record_criterion(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
