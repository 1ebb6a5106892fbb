import pytest

from sidsearch.corpus import WorldConfig, generate_world, simulate_logs


@pytest.fixture(scope="session")
def world():
    return generate_world(WorldConfig(), seed=0)


@pytest.fixture(scope="session")
def logs(world):
    return simulate_logs(world, seed=0)


@pytest.fixture(scope="session")
def small_world():
    cfg = WorldConfig(n_items=300, n_users=30, n_queries=80, sessions=600)
    return generate_world(cfg, seed=1)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
