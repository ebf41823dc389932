import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from modelcollab.pso import PSOHyper, PSOState, pso_maximize, pso_step


def scalar_objective(x):
    return -float((x[0] - 3.0) ** 2)


def test_zero_coefficients_freeze_positions():
    state = PSOState.init([[1.0], [2.0]], velocities=[[0.0], [0.0]], hyper=PSOHyper(0, 0, 0))
    pso_step(state, [0.5, 0.9])
    assert [x.tolist() for x in state.positions] == [[1.0], [2.0]]
    assert state.gbest_utility == 0.9 and state.gbest_position.tolist() == [2.0]


def test_velocity_decays_at_own_best():
    state = PSOState.init([[4.0]], velocities=[[1.0]], hyper=PSOHyper(0.5, 1.5, 1.5, 1))
    state.pbest_utilities[0] = math.inf
    state.gbest_position, state.gbest_utility = state.positions[0].copy(), math.inf
    pso_step(state, [0.0])
    assert state.velocities[0].tolist() == [0.5]


def test_nonfinite_utility_is_minus_infinity():
    state = PSOState.init([[0.0], [1.0]])
    pso_step(state, [float("nan"), 2.0])
    assert state.pbest_utilities[0] == -math.inf
    assert state.gbest_utility == 2.0


def test_scalar_swarm_reaches_optimum():
    rng = np.random.default_rng(0)
    state = pso_maximize(scalar_objective, list(rng.uniform(-10, 10, size=(8, 1))), 50)
    assert state.gbest_utility >= -1e-2


def grid_oracle():
    grid = np.linspace(-10, 10, 20001)
    return grid[np.argmax(-(grid - 3.0) ** 2)]


def test_scalar_swarm_agrees_with_grid():
    rng = np.random.default_rng(2)
    state = pso_maximize(scalar_objective, list(rng.uniform(-10, 10, size=(8, 1))), 50, seed=2)
    assert abs(state.gbest_position[0] - grid_oracle()) < 0.1


def test_failing_objective_scores_minus_infinity():
    def obj(x):
        if x[0] < 0:
            raise RuntimeError("infeasible")
        return -x[0]
    state = pso_maximize(obj, [[-1.0], [2.0]], 0)
    assert state.pbest_utilities == [-math.inf, -2.0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_gbest_never_decreases(seed):
    rng = np.random.default_rng(seed)
    state = pso_maximize(lambda x: -float(np.sum(np.abs(x - 1.0))), list(rng.normal(size=(5, 3))), 20, seed=seed)
    assert all(b >= a for a, b in zip(state.history, state.history[1:]))
    assert state.gbest_utility == max(state.pbest_utilities)
