import numpy as np
import pytest

from bloch_chain.geometry import cosine_profile, flat_profile


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running desk-scale computation")
    config.addinivalue_line("markers", "acceptance: one of the numbered acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    from tests import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def cosine03():
    return cosine_profile(0.3)


@pytest.fixture
def flat():
    return flat_profile()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
