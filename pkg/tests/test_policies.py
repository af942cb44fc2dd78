"""Tests for the agile and recovery policies and their search."""

import numpy as np
import pytest

from mod.dynamics import DEFAULT_DYNAMICS, Action, EnvParams, SensorConfig, State, observe, step_batch
from mod.errors import ConfigError, ContractError
from mod.estimator import EstimatorConfig, EstimatorParams, init_estimator
from mod.policies import (
    AgilePolicy, GenerationResult, GoalSeekingController, PolicyParams, RecoveryPolicy, RolloutContext,
    SearchConfig, agile_act, agile_layer_sizes, condition_sensitivity, cross_entropy_search, recovery_act,
    recovery_layer_sizes, regularize_and_clip, squash_twist, train_agile, train_recovery,
)
from mod.world import margins_batch

SENSOR = SensorConfig(n_rays=4, proprio_noise_std=0.0, ray_noise_std=0.0)
TINY = SearchConfig(generations=1, population=2, episodes_per_candidate=1, hidden_units=4, hidden_layers=1,
                    episode_steps=10, command_segment_steps=3, eval_episodes=2)


@pytest.fixture
def ctx():
    return RolloutContext(sensor=SENSOR, estimator=EstimatorConfig(window_length=2, hidden_units=2), seed=3)


class TestPolicyOutputs:
    """Tests for the action maps."""

    def test_squash_zero_is_zero_twist(self):
        np.testing.assert_allclose(squash_twist(np.zeros(2), DEFAULT_DYNAMICS), [0.0, 0.0])

    def test_squash_stays_in_command_box(self, rng):
        twists = squash_twist(rng.normal(0, 10, size=(100, 2)), DEFAULT_DYNAMICS)
        assert np.all(twists >= DEFAULT_DYNAMICS.action_low)
        assert np.all(twists <= DEFAULT_DYNAMICS.action_high)

    def test_zero_agile_policy_stands_still(self, open_world):
        policy = AgilePolicy(PolicyParams.zeros(agile_layer_sizes(SENSOR, TINY)), sensor=SENSOR)
        obs = observe(State(0.0, 0.0, 0.0), Action.zero(), None, open_world, (10.0, 0.0), sensor=SENSOR)
        action = policy.act(obs, EnvParams().estimated_vector())
        assert action == Action(0.0, 0.0)

    def test_agile_rejects_short_condition(self, open_world):
        policy = AgilePolicy(PolicyParams.zeros(agile_layer_sizes(SENSOR, TINY)), sensor=SENSOR)
        obs = observe(State(0.0, 0.0, 0.0), Action.zero(), None, open_world, (10.0, 0.0), sensor=SENSOR)
        with pytest.raises(ContractError, match="Conditioning vector"):
            policy.act(obs, np.zeros(3))

    def test_zero_recovery_policy_passes_command_through(self, open_world):
        policy = RecoveryPolicy(PolicyParams.zeros(recovery_layer_sizes(SENSOR, TINY)), sensor=SENSOR)
        obs = observe(State(0.0, 0.0, 0.0), Action.zero(), None, open_world, (10.0, 0.0), sensor=SENSOR)
        assert policy.act(obs, Action(1.5, -0.5)) == Action(1.5, -0.5)

    def test_agile_act_matches_bound_policy(self, rng, blocked_world):
        params = PolicyParams.zeros(agile_layer_sizes(SENSOR, TINY))
        params = params.with_weights(rng.normal(0, 0.3, params.weights.size))
        obs = observe(State(2.0, 0.5, 0.1, 1.0, 0.0), Action(1.0, 0.0), None, blocked_world,
                      blocked_world.goal_center, sensor=SENSOR)
        e = EnvParams(payload_mass=5.0).estimated_vector()
        action = agile_act(obs, e, params, sensor=SENSOR)

        assert action == AgilePolicy(params, sensor=SENSOR).act(obs, e)
        assert DEFAULT_DYNAMICS.action_low[0] <= action.v_cmd <= DEFAULT_DYNAMICS.action_high[0]

    def test_agile_act_rejects_mismatched_network(self, open_world):
        params = PolicyParams.zeros(recovery_layer_sizes(SENSOR, TINY))
        obs = observe(State(0.0, 0.0, 0.0), Action.zero(), None, open_world, (10.0, 0.0), sensor=SENSOR)
        with pytest.raises(ContractError, match="Agile policy expects"):
            agile_act(obs, EnvParams().estimated_vector(), params, sensor=SENSOR)

    def test_recovery_act_stays_in_command_box(self, rng, open_world):
        params = PolicyParams.zeros(recovery_layer_sizes(SENSOR, TINY))
        params = params.with_weights(rng.normal(0, 2.0, params.weights.size))
        obs = observe(State(0.0, 0.0, 0.0), Action.zero(), None, open_world, (10.0, 0.0), sensor=SENSOR)
        action = recovery_act(obs, Action(3.5, 2.5), params, sensor=SENSOR).as_array()

        assert np.all(action >= DEFAULT_DYNAMICS.action_low)
        assert np.all(action <= DEFAULT_DYNAMICS.action_high)

    def test_recovery_act_correction_scale_zero_is_identity(self, rng, open_world):
        params = PolicyParams.zeros(recovery_layer_sizes(SENSOR, TINY))
        params = params.with_weights(rng.normal(0, 1.0, params.weights.size))
        obs = observe(State(0.0, 0.0, 0.0), Action.zero(), None, open_world, (10.0, 0.0), sensor=SENSOR)
        assert recovery_act(obs, Action(1.0, -0.5), params, sensor=SENSOR,
                            correction_scale=(0.0, 0.0)) == Action(1.0, -0.5)

    def test_batch_matches_single(self, rng, blocked_world):
        params = PolicyParams.zeros(agile_layer_sizes(SENSOR, TINY))
        policy = AgilePolicy(params.with_weights(rng.normal(0, 0.3, params.weights.size)), sensor=SENSOR)
        states = np.array([[1.0, 0.5, 0.2, 1.0, 0.0], [3.0, -0.5, -0.3, 2.0, 0.1]])
        e = EnvParams(payload_mass=3.0).estimated_vector()
        batch = policy.act_batch(states, e, blocked_world)
        for k in range(2):
            obs = observe(State(*states[k]), Action(states[k, 3], states[k, 4]), None, blocked_world,
                          blocked_world.goal_center, params=EnvParams(payload_mass=3.0), sensor=SENSOR)
            np.testing.assert_allclose(batch[k], policy.act(obs, e).as_array(), atol=1e-12)

    def test_zero_policy_has_no_condition_sensitivity(self, rng, open_world):
        policy = AgilePolicy(PolicyParams.zeros(agile_layer_sizes(SENSOR, TINY)), sensor=SENSOR)
        states = np.zeros((4, 5))
        e = np.tile(EnvParams().estimated_vector(), (4, 1))
        assert condition_sensitivity(policy, states, e, open_world, rng) == 0.0

    def test_regularize_and_clip(self):
        params = PolicyParams(np.array([2.0, -2.0, 0.5, 0.0]), (1, 2), weight_clip=1.0, l2_coeff=0.5)
        np.testing.assert_allclose(regularize_and_clip(params).weights, [1.0, -1.0, 0.25, 0.0])

    def test_policy_weight_shape_checked(self):
        with pytest.raises(ContractError):
            PolicyParams(np.zeros(3), (1, 2))


class TestGoalSeekingController:
    """Tests for the scripted goal-seeking driver."""

    def test_reaches_goal_in_open_world(self, open_world):
        controller = GoalSeekingController()
        states = np.array([[0.0, 0.0, 0.0, 0.0, 0.0]])
        params = EnvParams().as_vector()[None, :]
        reached = False
        for _ in range(DEFAULT_DYNAMICS.horizon_steps):
            states = step_batch(states, controller.act_batch(states, None, open_world), params)
            l_values, _ = margins_batch(states, open_world)
            if l_values[0] <= 0:
                reached = True
                break
        assert reached

    def test_brakes_before_obstacle(self, blocked_world):
        """Forward ray 0.5 m gives a braking speed of 2 * (0.5 - 0.3)."""
        command = GoalSeekingController().act_batch(np.array([[4.0, 0.0, 0.0, 2.0, 0.0]]), None, blocked_world)
        np.testing.assert_allclose(command[0], [0.4, 0.0], atol=1e-9)


class TestCrossEntropySearch:
    """Tests for the search loop on a toy objective."""

    def test_converges_on_quadratic(self):
        target = np.array([0.5, -0.3])
        search = SearchConfig(generations=30, population=20, init_std=0.5, min_std=0.01, l2_coeff=0.0)

        def evaluate(generation, candidates):
            returns = np.array([-float(np.sum((c - target) ** 2)) for c in candidates])
            return GenerationResult(returns, {})

        params, trace = cross_entropy_search(PolicyParams.zeros((1, 1)), search, 0, 'toy', evaluate)

        np.testing.assert_allclose(params.weights, target, atol=0.1)
        assert len(trace) == 30
        assert trace['elite_mean_return'].iloc[-1] >= trace['elite_mean_return'].iloc[0]

    def test_invalid_population(self):
        with pytest.raises(ConfigError):
            SearchConfig(population=1)


class TestTraining:
    """Smoke tests for the training loops on tiny settings."""

    def test_train_agile(self, ctx, rng):
        estimator = init_estimator(rng, ctx.estimator)
        result = train_agile(ctx, TINY, estimator, validation_episodes=2)

        assert len(result.trace) == 1
        assert isinstance(result.estimator, EstimatorParams)
        assert result.policy.layer_sizes == agile_layer_sizes(SENSOR, TINY)
        assert np.isfinite(result.sensitivity)
        assert 'estimator_loss' in result.trace.columns

    def test_train_agile_is_seeded(self, ctx):
        a = train_agile(ctx, TINY, init_estimator(None, ctx.estimator), validation_episodes=1)
        b = train_agile(ctx, TINY, init_estimator(None, ctx.estimator), validation_episodes=1)
        np.testing.assert_array_equal(a.policy.weights, b.policy.weights)

    def test_separate_training_fits_estimator_after_search(self, ctx, rng):
        estimator = init_estimator(rng, ctx.estimator)
        result = train_agile(ctx, TINY, estimator, validation_episodes=2, joint=False)

        assert result.trace['estimator_loss'].isna().all()
        assert (result.trace['buffer_size'] == 0).all()
        assert (result.trace['alpha'] == 1.0).all()
        assert np.isfinite(result.validation_loss)
        assert not np.array_equal(result.estimator.weights, estimator.weights)

    def test_train_recovery(self, ctx):
        result = train_recovery(ctx, TINY)

        assert len(result.trace) == 1
        assert result.tracking_error >= 0.0
        assert np.isfinite(result.baseline_error)
