"""Tests for the robot dynamics, parameters and sensing."""

import math

import numpy as np
import pytest

from mod.dynamics import (
    Action, DynamicsConfig, EnvParams, RandomizationRanges, SensorConfig, State, observe, observe_batch,
    sample_params, step, step_batch, wrap_angle,
)
from mod.errors import ConfigError, ContractError, InvalidStateError

QUIET = SensorConfig(proprio_noise_std=0.0, ray_noise_std=0.0, goal_noise_std=0.0)


class TestStep:
    """Tests for the single-step transition."""

    def test_heavier_payload_accelerates_slower(self):
        """The forward acceleration limit falls with payload mass."""
        start = State(0.0, 0.0, 0.0)
        full = Action(3.5, 0.0)
        light = step(start, full, EnvParams(payload_mass=0.0, friction=1.5))
        heavy = step(start, full, EnvParams(payload_mass=12.0, friction=1.5))

        assert light.v == pytest.approx(8.0 * 0.05)
        assert heavy.v == pytest.approx(4.0 * 0.05)

    def test_low_friction_limits_acceleration(self):
        slick = step(State(0.0, 0.0, 0.0), Action(3.5, 0.0), EnvParams(friction=0.25))
        assert slick.v == pytest.approx(0.25 * 9.81 * 0.8 * 0.05)

    def test_moves_along_heading(self):
        s = State(0.0, 0.0, math.pi / 2, 2.0, 0.0)
        nxt = step(s, Action(2.0, 0.0), EnvParams())
        assert nxt.x == pytest.approx(0.0, abs=1e-12)
        assert nxt.y == pytest.approx(0.1)

    def test_heading_wraps(self):
        s = State(0.0, 0.0, math.pi - 0.01, 0.0, 2.0)
        nxt = step(s, Action(0.0, 2.5), EnvParams())
        assert -math.pi < nxt.theta <= math.pi

    def test_external_force_drifts(self):
        """A lateral force moves a stopped robot sideways."""
        nxt = step(State(0.0, 0.0, 0.0), Action(0.0, 0.0), EnvParams(ext_force=(0.0, 15.0)))
        assert nxt.y > 0.0
        assert nxt.x == pytest.approx(0.0)

    def test_external_force_drift_per_step(self):
        """Each step under a constant force adds the same mass-scaled displacement."""
        params = EnvParams(payload_mass=3.0, ext_force=(0.0, 15.0))
        expected = 15.0 / (12.0 + 3.0) * 0.1 * 0.05
        s1 = step(State(0.0, 0.0, 0.0), Action(0.0, 0.0), params)
        s2 = step(s1, Action(0.0, 0.0), params)

        assert s1.y == pytest.approx(expected)
        assert s2.y - s1.y == pytest.approx(expected)

    def test_lateral_com_biases_yaw(self):
        nxt = step(State(0.0, 0.0, 0.0), Action(0.0, 0.0), EnvParams(com_shift=(0.0, 0.05, 0.0)))
        assert nxt.omega > 0.0

    def test_action_outside_limits_rejected(self):
        with pytest.raises(ContractError, match="outside command limits"):
            step(State(0.0, 0.0, 0.0), Action(5.0, 0.0), EnvParams())

    def test_non_finite_state_rejected(self):
        with pytest.raises(InvalidStateError):
            step(State(math.nan, 0.0, 0.0), Action(0.0, 0.0), EnvParams())

    def test_non_positive_dt_rejected(self):
        with pytest.raises(ContractError, match="dt must be positive"):
            step(State(0.0, 0.0, 0.0), Action(0.0, 0.0), EnvParams(), dt=0.0)

    def test_batch_matches_scalar(self, rng):
        """step_batch gives the same successors as repeated step calls."""
        states = np.column_stack([rng.uniform(0, 10, 20), rng.uniform(-2, 2, 20), rng.uniform(-3, 3, 20),
                                  rng.uniform(0, 3, 20), rng.uniform(-1, 1, 20)])
        actions = np.column_stack([rng.uniform(-1, 3.5, 20), rng.uniform(-2.5, 2.5, 20)])
        ranges = RandomizationRanges()
        params = [sample_params(rng, ranges) for _ in range(20)]
        batch = step_batch(states, actions, np.stack([p.as_vector() for p in params]))
        for k in range(20):
            single = step(State(*states[k]), Action.from_array(actions[k]), params[k])
            np.testing.assert_allclose(batch[k], single.as_array(), rtol=1e-12, atol=1e-12)

    def test_estimated_matrix_means_zero_force(self, rng):
        states = np.zeros((3, 5))
        actions = np.tile([1.0, 0.0], (3, 1))
        e = np.tile(EnvParams(payload_mass=2.0).estimated_vector(), (3, 1))
        np.testing.assert_allclose(step_batch(states, actions, e),
                                   step_batch(states, actions, EnvParams(payload_mass=2.0)))


class TestConfigs:
    """Tests for dynamics constants and randomization ranges."""

    def test_dt_above_lag_rejected(self):
        with pytest.raises(ConfigError, match="lag time constants"):
            DynamicsConfig(dt=0.5)

    def test_invalid_range_rejected(self):
        with pytest.raises(ConfigError, match="invalid range"):
            RandomizationRanges(friction=(1.0, 0.5))

    def test_normalize_round_trip(self, rng):
        ranges = RandomizationRanges()
        lo, hi = ranges.bounds()
        values = rng.uniform(lo, hi)
        unit = ranges.normalize(values)

        assert np.all(np.abs(unit) <= 1.0)
        np.testing.assert_allclose(ranges.denormalize(unit), values)
        np.testing.assert_allclose(ranges.normalize((lo + hi) / 2), 0.0, atol=1e-12)

    def test_clamp(self):
        ranges = RandomizationRanges()
        clamped = ranges.clamp(np.array([100.0, 0.0, 0.0, 0.0, -5.0]))
        assert clamped[0] == 12.0
        assert clamped[4] == 0.25

    def test_sample_params_within_ranges(self, rng):
        ranges = RandomizationRanges()
        for _ in range(50):
            p = sample_params(rng, ranges)
            assert -2.0 <= p.payload_mass <= 12.0
            assert 0.25 <= p.friction <= 1.5
            assert all(-15.0 <= f <= 15.0 for f in p.ext_force)

    def test_degenerate_range_returns_point(self, rng):
        p = sample_params(rng, RandomizationRanges(payload_mass=(3.0, 3.0)))
        assert p.payload_mass == 3.0

    def test_param_vectors(self):
        p = EnvParams(payload_mass=4.0, friction=0.7, com_shift=(0.01, 0.02, 0.03), ext_force=(1.0, -1.0))
        np.testing.assert_allclose(p.estimated_vector(), [4.0, 0.01, 0.02, 0.03, 0.7])
        assert EnvParams.from_vector(p.as_vector()) == p
        assert p.replace(payload_mass=0.0).payload_mass == 0.0

    def test_wrap_angle(self):
        angles = np.array([0.0, math.pi, -math.pi, 3 * math.pi, 7.0])
        wrapped = wrap_angle(angles)
        assert np.all(wrapped > -math.pi) and np.all(wrapped <= math.pi)
        np.testing.assert_allclose(np.cos(wrapped), np.cos(angles), atol=1e-12)


class TestObserve:
    """Tests for the observation model."""

    def test_noise_requires_stream(self, open_world):
        with pytest.raises(ContractError, match="noise stream"):
            observe(State(0.0, 0.0, 0.0), Action.zero(), None, open_world, open_world.goal_center)

    def test_goal_in_body_frame(self, open_world):
        """A goal straight ahead in the world is to the right when facing +y."""
        obs = observe(State(0.0, 0.0, math.pi / 2), Action.zero(), None, open_world, (10.0, 0.0), sensor=QUIET)
        np.testing.assert_allclose(obs.goal_relative, [0.0, -10.0], atol=1e-9)

    def test_proprio_carries_speed_and_command(self, open_world):
        obs = observe(State(0.0, 0.0, 0.0, 1.5, 0.2), Action(2.0, 0.1), None, open_world, (10.0, 0.0),
                      sensor=QUIET)
        assert obs.proprio[0] == pytest.approx(1.5)
        assert obs.proprio[2] == pytest.approx(2.0)
        assert obs.proprio[3] == pytest.approx(0.1)

    def test_accelerations_from_previous_state(self, open_world):
        prev = State(0.0, 0.0, 0.0, 1.0, 0.0)
        obs = observe(State(0.0, 0.0, 0.0, 1.2, 0.0), Action.zero(), None, open_world, (10.0, 0.0),
                      prev_state=prev, sensor=QUIET)
        assert obs.proprio[4] == pytest.approx(0.2 / 0.05)

    def test_noise_is_seeded(self, open_world):
        a = observe(State(1.0, 0.0, 0.0), Action.zero(), np.random.default_rng(3), open_world, (10.0, 0.0))
        b = observe(State(1.0, 0.0, 0.0), Action.zero(), np.random.default_rng(3), open_world, (10.0, 0.0))
        np.testing.assert_array_equal(a.proprio, b.proprio)
        np.testing.assert_array_equal(a.rays, b.rays)

    def test_batch_feature_shape(self, blocked_world):
        states = np.zeros((6, 5))
        states[:, 0] = np.linspace(0, 4, 6)
        features = observe_batch(states, blocked_world, blocked_world.goal_center,
                                 EnvParams().estimated_vector(), QUIET)
        assert features.shape == (6, QUIET.feature_dim)
