"""Tests for exhaustive-rollout ground truth."""

import numpy as np
import pytest

from mod.dynamics import EnvParams
from mod.errors import BudgetExceededError, ContractError
from mod.oracle import (
    ChainClosedLoop, RobotClosedLoop, classify_state, exact_value, exact_values_many, sweep_sets,
)
from mod.policies import GoalSeekingController
from mod.ravalue import solve_tabular


def _random_chain(rng, n=30):
    return ChainClosedLoop(rng.integers(0, n, n), rng.uniform(-0.3, 1.0, n), rng.uniform(-1.0, 0.3, n))


class TestChainValues:
    """Exact values on finite lattices."""

    def test_worked_undiscounted_value(self):
        loop = ChainClosedLoop([1, 1], [0.5, -0.2], [-0.3, -0.4])
        value = exact_value(np.array([0.0]), loop, 10, 0.9)

        assert value.undiscounted == pytest.approx(-0.2)
        assert value.discounted == pytest.approx(-0.18)
        assert value.terminal
        assert value.steps == 1

    def test_matches_value_iteration(self, rng):
        """Unrolled fixed points agree with Jacobi iteration on the same chain."""
        for _ in range(5):
            loop = _random_chain(rng)
            solved, _ = solve_tabular(loop.to_problem(), 0.99, 1e-12, 10000)
            exact = exact_values_many(loop.states(), loop, loop.n_states + 1, 0.99)
            np.testing.assert_allclose(exact[:, 2], solved, atol=1e-6)

    def test_gamma_one_drabe_is_undiscounted(self, rng):
        loop = _random_chain(rng)
        exact = exact_values_many(loop.states(), loop, loop.n_states + 1, 1.0)
        np.testing.assert_allclose(exact[:, 2], exact[:, 0])
        np.testing.assert_allclose(exact[:, 1], exact[:, 0])

    def test_cycle_without_target(self):
        """A safe two-state cycle that never reaches keeps a positive value."""
        loop = ChainClosedLoop([1, 0], [0.4, 0.6], [-0.5, -0.5])
        value = exact_value(np.array([0.0]), loop, 20, 0.9)

        assert not value.terminal
        assert value.undiscounted == pytest.approx(0.4)
        assert value.drabe == pytest.approx(0.4)

    def test_invalid_gamma(self):
        loop = ChainClosedLoop([0], [0.1], [-0.1])
        with pytest.raises(ContractError):
            exact_value(np.array([0.0]), loop, 5, 1.5)

    def test_invalid_successor(self):
        with pytest.raises(ContractError, match="out of range"):
            ChainClosedLoop([3], [0.1], [-0.1])


class TestMembership:
    """Safe, reachable and reach-avoid membership."""

    def test_path_through_failure(self):
        """Reaching through a failure state is not reach-avoid."""
        loop = ChainClosedLoop([1, 2, 2], [1.0, 1.0, -0.5], [-1.0, 0.5, -1.0])
        state = classify_state(np.array([0.0]), loop, 5)

        assert state.reaches
        assert not state.safe
        assert not state.reach_avoid

    def test_horizon_cuts_reach(self):
        loop = ChainClosedLoop([1, 2, 2], [1.0, 1.0, -0.5], [-1.0, -1.0, -1.0])
        assert not classify_state(np.array([0.0]), loop, 1).reaches
        assert classify_state(np.array([0.0]), loop, 2).reach_avoid

    def test_set_algebra_on_random_chains(self, rng):
        for _ in range(5):
            loop = _random_chain(rng)
            membership = sweep_sets(loop.states(), [loop], 40)[0]
            assert membership.algebra_holds()
            np.testing.assert_array_equal(membership.reach_avoid, membership.safe & membership.reaches)

    def test_negative_horizon(self):
        with pytest.raises(ContractError):
            classify_state(np.array([0.0]), ChainClosedLoop([0], [0.1], [-0.1]), -1)

    def test_budget_refused(self):
        loop = ChainClosedLoop(np.zeros(11, dtype=int), np.ones(11), -np.ones(11))
        with pytest.raises(BudgetExceededError, match="exceeds"):
            sweep_sets(loop.states(), [loop], 5, budget=10)


class TestRobotLoop:
    """Membership of robot start states."""

    def test_open_world_start_is_reach_avoid(self, open_world):
        loop = RobotClosedLoop(GoalSeekingController(), EnvParams(), open_world)
        state = classify_state(np.zeros(5), loop, 160)
        assert state.reach_avoid

    def test_forward_driver_through_obstacle(self, blocked_world):
        loop = RobotClosedLoop(GoalSeekingController(brake_distance=0.0), EnvParams(), blocked_world)
        state = classify_state(np.zeros(5), loop, 160)

        assert state.reaches
        assert not state.safe
        assert not state.reach_avoid

    def test_sweep_rasters(self, blocked_world):
        starts = np.zeros((6, 5))
        starts[:, 0] = [0.0, 2.0, 5.0, 0.0, 2.0, 5.0]
        starts[:, 1] = [-2.0, -2.0, -2.0, 0.0, 0.0, 0.0]
        loops = [RobotClosedLoop(GoalSeekingController(), EnvParams(payload_mass=m), blocked_world)
                 for m in (0.0, 8.0)]
        memberships = sweep_sets(starts, loops, 160, grid_shape=(2, 3))

        assert len(memberships) == 2
        assert memberships[0].safe.shape == (2, 3)
        assert not memberships[0].safe[1, 2]
        assert memberships[1].params[0] == 8.0
        assert memberships[0].counts()['cells'] == 6
