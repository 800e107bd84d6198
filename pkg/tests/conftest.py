import numpy as np
import pytest

from wfopt.harness import load_dataset


@pytest.fixture(scope="session")
def iris():
    return load_dataset("iris")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Lines reported by the acceptance suite, echoed in the terminal summary."""
    return pytestconfig.stash.setdefault(_ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
