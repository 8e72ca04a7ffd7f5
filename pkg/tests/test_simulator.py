import math

import numpy as np
import pytest

from conftest import random_model
from gpcert.controller import ClosedLoopModel, CostSpec, ValueFunction
from gpcert.simulator import NonFiniteState, PlantSpec, grid_states, pendulum_f, simulate, sweep


def test_equilibrium_stays():
    tr = simulate(PlantSpec.pendulum(horizon=1.0), None, [0.0, 0.0])
    assert tr.converged and np.all(tr.states == 0)


def test_zero_control_from_six_does_not_reach_origin():
    tr = simulate(PlantSpec.pendulum(), None, [6.0, 0.0])
    assert not tr.converged
    assert abs(tr.final_state[0] - 2 * math.pi) < 0.1


def test_damped_pendulum_from_three_returns_home():
    # |x1| < pi lies in the basin of the downward rest state, so even u = 0 converges
    tr = simulate(PlantSpec.pendulum(), None, [3.0, 0.0])
    assert tr.converged


def test_linear_plant_matches_closed_form():
    plant = PlantSpec(lambda x: -x, np.zeros((1, 1)), dt=0.005, horizon=10.0, convergence_radius=1e-9)
    tr = simulate(plant, None, [1.0])
    assert tr.final_state[0] == pytest.approx(math.exp(-10.0), abs=1e-3)
    assert tr.times[-1] == pytest.approx(10.0)


def test_divergence_exit():
    plant = PlantSpec(lambda x: x, np.zeros((1, 1)), dt=0.01, horizon=100.0)
    tr = simulate(plant, None, [1.0])
    assert tr.status == "diverged" and abs(tr.final_state[0]) > 50


def test_non_finite():
    plant = PlantSpec(lambda x: np.array([np.inf]), np.zeros((1, 1)), horizon=1.0)
    with pytest.raises(NonFiniteState):
        simulate(plant, None, [1.0])
    with pytest.raises(NonFiniteState):
        simulate(plant, None, [np.nan])
    out = sweep(plant, None, [[1.0]])
    assert out[0].status == "error"


def test_plant_validation():
    with pytest.raises(ValueError):
        PlantSpec(pendulum_f, np.zeros((2, 1)), dt=0.0)
    with pytest.raises(ValueError):
        PlantSpec(pendulum_f, np.zeros((2, 1)), dt=0.1, horizon=0.01)


def test_sweep_empty_and_deterministic(rng):
    plant = PlantSpec.pendulum(horizon=2.0)
    assert sweep(plant, None, []) == []
    m = random_model(rng)
    a = simulate(plant, m, [1.0, -1.0])
    b = simulate(plant, m, [1.0, -1.0])
    assert np.array_equal(a.states, b.states) and a.to_csv() == b.to_csv()


def test_trajectory_shapes_and_csv(rng):
    m = random_model(rng)
    tr = simulate(PlantSpec.pendulum(horizon=0.05), m, [0.5, 0.5])
    assert tr.states.shape == (11, 2) and tr.inputs.shape == (11, 1) and tr.values.shape == (11,)
    lines = tr.to_csv().splitlines()
    assert lines[0] == "t,x_1,x_2,u_1,V" and len(lines) == 12


def test_euler_consistency_zero_control():
    starts = grid_states([(-2, 2), (-2, 2)], 3)
    for x0 in starts:
        a = simulate(PlantSpec.pendulum(), None, x0)
        b = simulate(PlantSpec.pendulum(dt=0.0025), None, x0)
        if a.converged:
            assert np.linalg.norm(a.final_state - b.final_state) <= 5e-2


def test_grid_states():
    g = grid_states([(-6, 6), (-6, 6)], 5)
    assert g.shape == (25, 2) and g.min() == -6 and g.max() == 6
