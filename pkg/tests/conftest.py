import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def cube():
    from afabench.datasets import make_dataset

    return make_dataset("cube", seed=0)


@pytest.fixture(scope="session")
def afacontext():
    from afabench.datasets import make_dataset

    return make_dataset("afacontext", seed=0)


@pytest.fixture(scope="session")
def cube_predictor(cube):
    from afabench.predictor import pretrain_shared

    return pretrain_shared(cube, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
