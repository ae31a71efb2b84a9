import numpy as np
import pytest
import torch

from superapp_privacy.domain import build_catalog
from superapp_privacy.simulator import PopulationSpec, default_personas, generate_population

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def catalog():
    return build_catalog(400, 80, seed=3)


@pytest.fixture(scope="session")
def personas():
    return default_personas()


@pytest.fixture(scope="session")
def population(catalog, personas):
    pop = PopulationSpec(num_users=40, samples_per_user=2, seed=11)
    return pop, generate_population(pop, personas, catalog)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
