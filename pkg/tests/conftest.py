import numpy as np
import pytest

from gpcert.controller import ClosedLoopModel, CostSpec, ValueFunction
from gpcert.gpmodel import Hyperparams, TrainingSet, fit_mean

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_model(rng, n=2, D=None, m=1, box=3.0):
    """A small random closed-loop model with GP-style kernels."""
    D = int(rng.integers(3, 10)) if D is None else D
    X = rng.uniform(-box, box, size=(D, n))
    Y = rng.normal(size=(D, n))
    ls2 = rng.uniform(0.5, 3.0, size=n)
    hp = Hyperparams.from_values(ls2, float(rng.uniform(0.5, 2.0)), 0.3)
    gp = fit_mean(TrainingSet(X, Y), hp)
    vp = ValueFunction.for_model(gp, rng.normal(size=D))
    g = rng.normal(size=(n, m))
    Rm = rng.normal(size=(m, m))
    cost = CostSpec(np.eye(n), Rm @ Rm.T + m * np.eye(m))
    return ClosedLoopModel(gp, g, vp, cost)


def random_simplex_vertices(rng, n, size, center_box=3.0):
    c = rng.uniform(-center_box, center_box, size=n)
    return c + size * rng.normal(size=(n + 1, n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
