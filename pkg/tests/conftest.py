import numpy as np
import pytest

from subnet_tune.net import build_mlp, clone_as_pretrained
from subnet_tune.tensor import make_rng
from subnet_tune.trainer import Dataset

ACCEPTANCE_LINES: list[str] = []


def toy_model(seed=0, in_dim=4, hidden=(6, 5), out_dim=3, head="classification", activation="tanh"):
    return clone_as_pretrained(build_mlp(in_dim, list(hidden), out_dim, make_rng(seed), activation, head))


def toy_data(seed=1, n=64, in_dim=4, classes=3):
    rng = make_rng(seed)
    x = rng.normal(size=(n, in_dim))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int) + (x[:, 2] > 1).astype(int)
    return Dataset(x, np.minimum(y, classes - 1))


@pytest.fixture
def model():
    return toy_model()


@pytest.fixture
def data():
    return toy_data()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
