"""Tests for the switched closed loop."""

import math

import numpy as np
import pytest

from mod.dynamics import DynamicsConfig, EnvParams, SensorConfig, State
from mod.errors import ConfigError, ContractError
from mod.estimator import EstimatorConfig
from mod.policies import (
    GoalSeekingController, PolicyParams, RecoveryPolicy, RolloutContext, SearchConfig, recovery_layer_sizes,
)
from mod.safeguard import (
    Components, ParamShift, SafeguardConfig, candidate_twists, classify, run_episode, select_recovery_twist,
    should_recover,
)

SENSOR = SensorConfig(n_rays=4, proprio_noise_std=0.0, ray_noise_std=0.0)


class ConstantValue:
    """Value model returning the same value everywhere."""

    def __init__(self, value):
        self.value = value

    def value_batch(self, states, e_hat, world=None):
        states = np.atleast_2d(states)
        return np.full(states.shape[0], self.value), np.zeros(states.shape[0], dtype=bool)


class PastLine:
    """Value that turns positive once the robot passes ``x = line``."""

    def __init__(self, line):
        self.line = line

    def value_batch(self, states, e_hat, world=None):
        states = np.atleast_2d(states)
        return states[:, 0] - self.line, np.zeros(states.shape[0], dtype=bool)


@pytest.fixture
def ctx():
    return RolloutContext(dynamics=DynamicsConfig(horizon_steps=80), sensor=SENSOR,
                          estimator=EstimatorConfig(window_length=2, hidden_units=0))


@pytest.fixture
def recovery(ctx):
    sizes = recovery_layer_sizes(SENSOR, SearchConfig(hidden_units=4, hidden_layers=1))
    return RecoveryPolicy(PolicyParams.zeros(sizes), SENSOR, ctx.dynamics)


class TestSwitchRule:
    """Tests for the switch rule and recovery twist selection."""

    def test_candidate_grid_includes_stop(self, ctx):
        twists = candidate_twists(ctx.dynamics, 9, 9)
        assert twists.shape == (82, 2)
        np.testing.assert_array_equal(twists[-1], [0.0, 0.0])

    def test_threshold(self):
        state = State(0.0, 0.0, 0.0)
        e = EnvParams().estimated_vector()
        assert should_recover(state, e, ConstantValue(0.2))
        assert not should_recover(state, e, ConstantValue(0.0))
        assert not should_recover(state, e, ConstantValue(0.2), threshold=0.3)

    def test_hysteresis_keeps_recovering(self):
        state = State(0.0, 0.0, 0.0)
        e = EnvParams().estimated_vector()
        model = ConstantValue(-0.05)
        assert should_recover(state, e, model, recovering=True, hysteresis=0.1)
        assert not should_recover(state, e, model, recovering=False, hysteresis=0.1)

    def test_selects_lowest_successor_value(self, ctx, open_world):
        """Backing straight up gives the smallest successor x."""
        twist, values = select_recovery_twist(State(0.0, 0.0, 0.0), EnvParams().estimated_vector(), PastLine(0.0),
                                              candidate_twists(ctx.dynamics), open_world, ctx=ctx)
        assert twist.v_cmd == pytest.approx(-1.0)
        assert twist.omega_cmd == pytest.approx(0.0)
        assert values.shape == (82,)

    def test_ties_prefer_smallest_twist(self, ctx, open_world):
        twist, _ = select_recovery_twist(State(0.0, 0.0, 0.0), EnvParams().estimated_vector(), ConstantValue(0.5),
                                         candidate_twists(ctx.dynamics), open_world, ctx=ctx)
        assert (twist.v_cmd, twist.omega_cmd) == (0.0, 0.0)

    def test_empty_candidates_rejected(self, ctx, open_world):
        with pytest.raises(ContractError):
            select_recovery_twist(State(0.0, 0.0, 0.0), EnvParams().estimated_vector(), ConstantValue(0.0),
                                  np.zeros((0, 2)), open_world, ctx=ctx)

    def test_unknown_model_kind(self):
        with pytest.raises(ConfigError):
            SafeguardConfig(model='oracle')


class TestClassify:
    """Tests for outcome classification."""

    def test_reach(self):
        assert classify([1.0, -0.1], [-1.0, -1.0]) == 'reach'

    def test_collision_first(self):
        assert classify([1.0, 0.5], [0.1, -1.0]) == 'collision'

    def test_collision_beats_reach_at_same_step(self):
        assert classify([-0.1], [0.2]) == 'collision'

    def test_timeout(self):
        assert classify([1.0, 0.5], [-1.0, -1.0]) == 'timeout'


class TestRunEpisode:
    """Tests for run_episode."""

    def test_agile_only_reaches_open_goal(self, ctx, open_world, rng):
        ctx = RolloutContext(sensor=SENSOR, estimator=ctx.estimator)
        trajectory, outcome = run_episode(open_world, EnvParams(), Components(agile=GoalSeekingController()),
                                          'agile_only', rng, ctx)

        assert outcome.classification == 'reach'
        assert outcome.recovery_fraction == 0.0
        assert math.isnan(outcome.min_ra_value)
        assert outcome.to_dict()['min_ra_value'] is None
        assert len(trajectory.rows) == outcome.steps + 1
        assert trajectory.rows[-1]['policy'] == 'terminal'
        assert outcome.v_peak > 1.0

    def test_forward_driver_collides_without_safeguard(self, ctx, blocked_world, rng):
        driver = GoalSeekingController(brake_distance=0.0)
        _, outcome = run_episode(blocked_world, EnvParams(), Components(agile=driver), 'agile_only', rng, ctx)
        assert outcome.classification == 'collision'

    def test_safeguard_prevents_collision(self, ctx, blocked_world, rng, recovery):
        """Recovery takes over past x = 3 and keeps the robot off the obstacle."""
        components = Components(agile=GoalSeekingController(brake_distance=0.0), recovery=recovery,
                                model=PastLine(3.0))
        trajectory, outcome = run_episode(blocked_world, EnvParams(), components, 'safeguarded', rng, ctx)

        assert outcome.classification == 'timeout'
        assert 0.0 < outcome.recovery_fraction < 1.0
        assert trajectory.switch_events
        assert trajectory.switch_events[0]['to'] == 'recovery'
        assert trajectory.states()[:, 0].max() < 4.5

    def test_quiet_model_matches_agile_only(self, ctx, open_world, recovery):
        """A value that never crosses the threshold leaves the agile loop untouched."""
        agile = GoalSeekingController()
        guarded, _ = run_episode(open_world, EnvParams(), Components(agile, recovery, None, ConstantValue(-1.0)),
                                 'safeguarded', np.random.default_rng(0), ctx)
        plain, _ = run_episode(open_world, EnvParams(), Components(agile=agile), 'agile_only',
                               np.random.default_rng(0), ctx)
        np.testing.assert_allclose(guarded.states(), plain.states())

    def test_recovery_only_stands_still(self, ctx, open_world, rng, recovery):
        components = Components(recovery=recovery, model=ConstantValue(0.5))
        trajectory, outcome = run_episode(open_world, EnvParams(), components, 'recovery_only', rng, ctx)

        assert outcome.classification == 'timeout'
        assert outcome.steps == 80
        assert outcome.recovery_fraction == 1.0
        assert outcome.min_ra_value == outcome.max_ra_value == 0.5

    def test_missing_component(self, ctx, open_world, rng):
        with pytest.raises(ContractError, match="recovery policy"):
            run_episode(open_world, EnvParams(), Components(agile=GoalSeekingController()), 'safeguarded', rng, ctx)
        with pytest.raises(ContractError, match="Unknown mode"):
            run_episode(open_world, EnvParams(), Components(agile=GoalSeekingController()), 'turbo', rng, ctx)

    def test_parameter_shift(self, ctx, open_world, rng):
        shift = ParamShift(step=5, params=EnvParams(payload_mass=10.0))
        trajectory, _ = run_episode(open_world, EnvParams(), Components(agile=GoalSeekingController()),
                                    'agile_only', rng, ctx, shift=shift)
        frame = trajectory.to_frame()
        assert frame.loc[4, 'e_payload_mass'] == 0.0
        assert frame.loc[5, 'e_payload_mass'] == 10.0

    def test_estimate_override_clamped(self, ctx, open_world, rng):
        override = lambda t: np.array([100.0, 0.0, 0.0, 0.0, 1.0])  # noqa: E731
        trajectory, _ = run_episode(open_world, EnvParams(), Components(agile=GoalSeekingController()),
                                    'agile_only', rng, ctx, estimate_override=override)
        assert trajectory.rows[0]['e_hat_payload_mass'] == 12.0

    def test_collect_windows(self, ctx, open_world, rng):
        cfg = SafeguardConfig(window_stride=4)
        trajectory, outcome = run_episode(open_world, EnvParams(friction=0.5),
                                          Components(agile=GoalSeekingController()), 'agile_only', rng, ctx,
                                          cfg=cfg, collect_windows=True)
        assert len(trajectory.samples) == outcome.steps // 4
        np.testing.assert_allclose(trajectory.samples.targets[:, 4], 0.5)
