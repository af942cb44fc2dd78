"""Agile and recovery policies, analytic controllers, and their training loops.

Both learned policies are two-hidden-layer tanh networks over a flat weight
vector (see ``mod.mlp``) trained by a cross-entropy search over that vector:

* the agile policy maps ``(observation, conditioning e)`` to a twist command
  and is trained jointly with the parameter estimator, which is refit on the
  windows collected in every generation;
* the recovery policy adds a bounded residual correction to a commanded twist
  and is trained to track random commands under full randomization.

Fitness is the mean discounted return minus ``l2_coeff * |w|^2``; the search
mean is shrunk and clipped after every generation so ``|w|_inf <= weight_clip``.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from mod.dynamics import (
    DEFAULT_DYNAMICS, DEFAULT_SENSOR, Action, DynamicsConfig, EnvParams, Observation,
    RandomizationRanges, SensorConfig, State, body_frame, observe, observe_batch,
    sample_params, step,
)
from mod.errors import ConfigError, ContractError, TrainingDivergedError
from mod.estimator import (
    EstimatorConfig, EstimatorParams, HistoryWindow, SampleSet, estimate, evaluate_loss,
    fit, fuse, fusion_alpha,
)
from mod.mlp import FeedForward
from mod.pool import parallel_map
from mod.seeding import stream
from mod.world import WorldLayout, WorldSpec, empty_world, failure_margin, ray_distances_batch, sample_world, target_margin

logger = logging.getLogger(__name__)

N_CONDITION = 5


@dataclass(frozen=True)
class RewardConfig:
    """Per-step reward ``progress_gain * (d_prev - d) + bonuses - action_cost * |a|^2``.

    ``action_cost`` is a non-negative cost, subtracted.
    """

    progress_gain: float = 1.0
    reach_bonus: float = 10.0
    collision_penalty: float = -10.0
    action_cost: float = 0.001
    timeout_penalty: float = -2.0
    gamma_rl: float = 0.99

    def __post_init__(self):
        if not self.collision_penalty < 0 < self.reach_bonus:
            raise ConfigError("Reward needs collision_penalty < 0 < reach_bonus")
        if not 0.0 < self.gamma_rl < 1.0:
            raise ConfigError(f"gamma_rl must lie in (0, 1), got {self.gamma_rl}")
        if self.action_cost < 0:
            raise ConfigError("action_cost must be non-negative")


@dataclass(frozen=True)
class SearchConfig:
    """Cross-entropy search and network layout."""

    generations: int = 30
    population: int = 24
    elite_fraction: float = 0.25
    episodes_per_candidate: int = 4
    init_std: float = 0.5
    min_std: float = 0.02
    hidden_units: int = 64
    hidden_layers: int = 2
    weight_clip: float = 1.0
    l2_coeff: float = 1e-4
    episode_steps: int = 0
    start_jitter: Tuple[float, float] = (0.3, 0.3)
    window_stride: int = 4
    eval_episodes: int = 20
    elite_tolerance: float = 0.5
    command_segment_steps: int = 20
    correction_scale: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.generations < 0 or self.population < 2:
            raise ConfigError("Search needs generations >= 0 and population >= 2")
        if not 0.0 < self.elite_fraction <= 1.0:
            raise ConfigError("elite_fraction must lie in (0, 1]")
        if self.episodes_per_candidate < 1 or self.hidden_layers < 1 or self.hidden_units < 1:
            raise ConfigError("episodes_per_candidate, hidden_layers and hidden_units must be positive")
        if self.weight_clip <= 0 or not 0.0 <= self.l2_coeff < 1.0:
            raise ConfigError("weight_clip must be positive and l2_coeff in [0, 1)")
        if self.window_stride < 1 or self.command_segment_steps < 1 or self.eval_episodes < 1:
            raise ConfigError("window_stride, command_segment_steps and eval_episodes must be positive")

    @property
    def n_elite(self) -> int:
        return max(1, int(round(self.population * self.elite_fraction)))


@dataclass(frozen=True)
class RolloutContext:
    """Everything a training or evaluation rollout needs besides the policy."""

    layout: WorldLayout = WorldLayout()
    dynamics: DynamicsConfig = DEFAULT_DYNAMICS
    sensor: SensorConfig = DEFAULT_SENSOR
    ranges: RandomizationRanges = RandomizationRanges()
    reward: RewardConfig = RewardConfig()
    estimator: EstimatorConfig = EstimatorConfig()
    seed: int = 0

    @property
    def goal(self) -> Tuple[float, float]:
        return self.layout.goal_center

    def start_state(self, rng: Optional[np.random.Generator], jitter: Tuple[float, float] = (0.0, 0.0)) -> State:
        x, y, theta = self.layout.start_pose
        if rng is not None and (jitter[0] > 0 or jitter[1] > 0):
            y += float(rng.uniform(-jitter[0], jitter[0]))
            theta += float(rng.uniform(-jitter[1], jitter[1]))
        return State(x, y, theta, 0.0, 0.0)


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Flat weights of a feedforward policy plus its regularization settings."""

    weights: np.ndarray
    layer_sizes: Tuple[int, ...]
    weight_clip: float = 1.0
    l2_coeff: float = 0.0

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        net = FeedForward(tuple(self.layer_sizes))
        if weights.shape != (net.n_weights,):
            raise ContractError(f"Policy expects {net.n_weights} weights, got shape {weights.shape}")
        if not np.all(np.isfinite(weights)):
            raise TrainingDivergedError("Policy weights are not finite")
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'layer_sizes', net.layer_sizes)

    @property
    def net(self) -> FeedForward:
        return FeedForward(self.layer_sizes)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int], weight_clip: float = 1.0, l2_coeff: float = 0.0) -> 'PolicyParams':
        return cls(np.zeros(FeedForward(tuple(layer_sizes)).n_weights), tuple(layer_sizes), weight_clip, l2_coeff)

    def with_weights(self, weights: np.ndarray) -> 'PolicyParams':
        return PolicyParams(weights, self.layer_sizes, self.weight_clip, self.l2_coeff)


def agile_layer_sizes(sensor: SensorConfig, search: SearchConfig) -> Tuple[int, ...]:
    return (sensor.feature_dim + N_CONDITION,) + (search.hidden_units,) * search.hidden_layers + (2,)


def recovery_layer_sizes(sensor: SensorConfig, search: SearchConfig) -> Tuple[int, ...]:
    return (sensor.feature_dim + 2,) + (search.hidden_units,) * search.hidden_layers + (2,)


def regularize_and_clip(params: PolicyParams) -> PolicyParams:
    """Shrink weights by ``(1 - l2_coeff)`` and clamp them to ``+-weight_clip``."""
    weights = np.clip(params.weights * (1.0 - params.l2_coeff), -params.weight_clip, params.weight_clip)
    return params.with_weights(weights)


def squash_twist(z: np.ndarray, dyn: DynamicsConfig) -> np.ndarray:
    """Map raw outputs to the command box; zero maps to the zero twist."""
    z = np.asarray(z, dtype=float)
    v = np.maximum(dyn.v_cmd_max * np.tanh(z[..., 0]), dyn.v_cmd_min)
    omega = dyn.omega_cmd_max * np.tanh(z[..., 1])
    return np.stack([v, omega], axis=-1)


def _condition_features(e_cond: np.ndarray, ranges: RandomizationRanges) -> np.ndarray:
    e_cond = np.asarray(e_cond, dtype=float)
    if e_cond.shape[-1] != N_CONDITION:
        raise ContractError(f"Conditioning vector must have {N_CONDITION} entries, got {e_cond.shape[-1]}")
    return ranges.normalize(e_cond)


def agile_act(obs: Observation, e_cond: np.ndarray, params: PolicyParams,
              ranges: RandomizationRanges = RandomizationRanges(),
              sensor: SensorConfig = DEFAULT_SENSOR, dyn: DynamicsConfig = DEFAULT_DYNAMICS) -> Action:
    """Agile twist command for an observation and a conditioning vector.

    Raises:
        ContractError: If ``e_cond`` or the observation does not match the network input
    """
    x = np.concatenate([obs.features(sensor), _condition_features(e_cond, ranges)])
    if x.shape[0] != params.net.n_inputs:
        raise ContractError(f"Agile policy expects {params.net.n_inputs} inputs, got {x.shape[0]}")
    return Action.from_array(squash_twist(params.net.forward(params.weights, x), dyn))


def recovery_act(obs: Observation, twist_cmd: Action, params: PolicyParams,
                 sensor: SensorConfig = DEFAULT_SENSOR, dyn: DynamicsConfig = DEFAULT_DYNAMICS,
                 correction_scale: Tuple[float, float] = (1.0, 1.0)) -> Action:
    """Residual tracking command ``clip(twist_cmd + c * tanh(net(o, twist_cmd)))``."""
    command = twist_cmd.as_array()
    x = np.concatenate([obs.features(sensor), command / dyn.action_high])
    if x.shape[0] != params.net.n_inputs:
        raise ContractError(f"Recovery policy expects {params.net.n_inputs} inputs, got {x.shape[0]}")
    correction = np.asarray(correction_scale) * np.tanh(params.net.forward(params.weights, x))
    return Action.from_array(dyn.clip_action(command + correction))


@dataclass(frozen=True, eq=False)
class AgilePolicy:
    """Agile policy bound to its sensing and dynamics settings."""

    params: PolicyParams
    ranges: RandomizationRanges = RandomizationRanges()
    sensor: SensorConfig = DEFAULT_SENSOR
    dynamics: DynamicsConfig = DEFAULT_DYNAMICS

    def act(self, obs: Observation, e_cond: np.ndarray) -> Action:
        return agile_act(obs, e_cond, self.params, self.ranges, self.sensor, self.dynamics)

    def act_batch(self, states: np.ndarray, e_matrix: np.ndarray, world: WorldSpec) -> np.ndarray:
        """Noise-free commands for ``(n, 5)`` states under ``(n, 5)`` conditioning."""
        states = np.atleast_2d(states)
        e_matrix = np.broadcast_to(np.atleast_2d(e_matrix), (states.shape[0], N_CONDITION))
        features = observe_batch(states, world, world.goal_center, e_matrix, self.sensor, self.dynamics)
        x = np.concatenate([features, _condition_features(e_matrix, self.ranges)], axis=1)
        return squash_twist(self.params.net.forward(self.params.weights, x), self.dynamics)


@dataclass(frozen=True, eq=False)
class RecoveryPolicy:
    """Recovery tracking policy bound to its sensing and dynamics settings."""

    params: PolicyParams
    sensor: SensorConfig = DEFAULT_SENSOR
    dynamics: DynamicsConfig = DEFAULT_DYNAMICS
    correction_scale: Tuple[float, float] = (1.0, 1.0)

    def act(self, obs: Observation, twist_cmd: Action) -> Action:
        return recovery_act(obs, twist_cmd, self.params, self.sensor, self.dynamics, self.correction_scale)

    def act_batch(self, states: np.ndarray, twist_cmds: np.ndarray, e_matrix: np.ndarray,
                  world: WorldSpec) -> np.ndarray:
        states = np.atleast_2d(states)
        twist_cmds = np.atleast_2d(twist_cmds)
        e_matrix = np.broadcast_to(np.atleast_2d(e_matrix), (states.shape[0], N_CONDITION))
        features = observe_batch(states, world, world.goal_center, e_matrix, self.sensor, self.dynamics)
        x = np.concatenate([features, twist_cmds / self.dynamics.action_high], axis=1)
        correction = np.asarray(self.correction_scale) * np.tanh(self.params.net.forward(self.params.weights, x))
        return self.dynamics.clip_action(twist_cmds + correction)


@dataclass(frozen=True)
class GoalSeekingController:
    """Deterministic goal-seeking twist law with forward-ray braking.

    Turns toward the goal, slows with the heading error, and brakes in
    proportion to the forward ray reading once it drops below
    ``brake_distance``. ``brake_distance = 0`` gives a forward-only driver.
    """

    cruise_speed: float = 2.5
    heading_gain: float = 3.0
    brake_distance: float = 1.5
    stop_margin: float = 0.3
    brake_gain: float = 2.0
    max_range: float = 5.0
    dynamics: DynamicsConfig = DEFAULT_DYNAMICS

    def _command(self, goal_x, goal_y, forward):
        err = np.arctan2(goal_y, goal_x)
        omega = np.clip(self.heading_gain * err, -self.dynamics.omega_cmd_max, self.dynamics.omega_cmd_max)
        v = self.cruise_speed * np.maximum(np.cos(err), 0.0)
        if self.brake_distance > 0:
            braking = self.brake_gain * np.maximum(forward - self.stop_margin, 0.0)
            v = np.where(forward < self.brake_distance, np.minimum(v, braking), v)
        v = np.clip(v, self.dynamics.v_cmd_min, self.dynamics.v_cmd_max)
        return np.stack([v, omega], axis=-1)

    def act(self, obs: Observation, e_cond: Optional[np.ndarray] = None) -> Action:
        forward = float(obs.rays[0]) if obs.rays.size else self.max_range
        return Action.from_array(self._command(obs.goal_relative[0], obs.goal_relative[1], forward))

    def act_batch(self, states: np.ndarray, e_matrix: Optional[np.ndarray], world: WorldSpec) -> np.ndarray:
        states = np.atleast_2d(states)
        gx, gy = body_frame(world.goal_center[0] - states[:, 0], world.goal_center[1] - states[:, 1], states[:, 2])
        forward = ray_distances_batch(states[:, 0], states[:, 1], states[:, 2], world, 1, self.max_range)[:, 0]
        return self._command(gx, gy, forward)


@dataclass(frozen=True)
class ProportionalTwistController:
    """Tracking baseline ``twist_cmd + k * (twist_cmd - achieved twist)``."""

    gain_v: float = 0.5
    gain_omega: float = 0.5
    dynamics: DynamicsConfig = DEFAULT_DYNAMICS

    def act(self, obs: Observation, twist_cmd: Action) -> Action:
        v, omega = float(obs.proprio[0]), float(obs.proprio[1])
        command = np.array([
            twist_cmd.v_cmd + self.gain_v * (twist_cmd.v_cmd - v),
            twist_cmd.omega_cmd + self.gain_omega * (twist_cmd.omega_cmd - omega),
        ])
        return Action.from_array(self.dynamics.clip_action(command))


def condition_sensitivity(policy: AgilePolicy, states: np.ndarray, e_matrix: np.ndarray, world: WorldSpec,
                          rng: np.random.Generator, delta: float = 1e-2) -> float:
    """Largest finite-difference ``|a(e + d) - a(e)| / |d|`` over probe states.

    ``d`` is a random direction of length ``delta`` in normalized parameter units.
    """
    states = np.atleast_2d(states)
    e_matrix = np.broadcast_to(np.atleast_2d(e_matrix), (states.shape[0], N_CONDITION))
    direction = rng.standard_normal(e_matrix.shape)
    direction *= delta / np.linalg.norm(direction, axis=1, keepdims=True)
    widths = policy.ranges.widths()
    base = policy.act_batch(states, e_matrix, world)
    moved = policy.act_batch(states, e_matrix + direction * widths, world)
    return float(np.max(np.linalg.norm(moved - base, axis=1)) / delta)


@dataclass
class EpisodeSummary:
    """Training-rollout statistics of one episode."""

    discounted_return: float
    outcome: str
    steps: int
    v_peak: float
    tracking_error: float = 0.0
    samples: SampleSet = field(default_factory=SampleSet)


def agile_training_episode(policy: AgilePolicy, world: WorldSpec, e_true: EnvParams, start: State,
                           estimator: Optional[EstimatorParams], progress: float, schedule: str,
                           rng: np.random.Generator, ctx: RolloutContext, window_stride: int = 4,
                           collect: bool = True, steps: int = 0) -> EpisodeSummary:
    """Roll one training episode with fused conditioning.

    The estimator sees the same window the deployed loop would build; its
    targets are the true parameters of the episode. ``e_true`` is static.
    """
    reward = ctx.reward
    horizon = steps or ctx.dynamics.horizon_steps
    window = HistoryWindow(ctx.estimator.window_length)
    truth = e_true.estimated_vector()
    windows: List[np.ndarray] = []
    state, prev, a_prev = start, None, Action.zero()
    distance = target_margin(state, world)
    total, discount, v_peak = 0.0, 1.0, abs(state.v)
    outcome = 'timeout'
    t = 0
    for t in range(horizon):
        obs = observe(state, a_prev, rng, world, ctx.goal, prev_state=prev, params=e_true,
                      sensor=ctx.sensor, cfg=ctx.dynamics)
        e_hat = estimate(window, estimator, ctx.ranges) if estimator is not None else truth
        action = policy.act(obs, fuse(truth, e_hat, progress, schedule))
        window.push(obs.proprio, action.as_array())
        if collect and t % window_stride == window_stride - 1:
            windows.append(window.features())

        prev, state = state, step(state, action, e_true, cfg=ctx.dynamics)
        v_peak = max(v_peak, abs(state.v))
        new_distance = target_margin(state, world)
        r = reward.progress_gain * (distance - new_distance) - reward.action_cost * float(action.as_array() @ action.as_array())
        distance = new_distance
        a_prev = action
        if failure_margin(state, world) > 0:
            outcome = 'collision'
            r += reward.collision_penalty
        elif new_distance <= 0:
            outcome = 'reach'
            r += reward.reach_bonus
        total += discount * r
        discount *= reward.gamma_rl
        if outcome != 'timeout':
            break
    else:
        total += discount * reward.timeout_penalty

    if not math.isfinite(total):
        raise TrainingDivergedError(f"Non-finite return {total}")
    samples = SampleSet.from_lists(windows, [truth] * len(windows))
    return EpisodeSummary(total, outcome, t + 1, v_peak, samples=samples)


@dataclass(frozen=True, eq=False)
class AgileJob:
    weights: np.ndarray
    layer_sizes: Tuple[int, ...]
    estimator: Optional[EstimatorParams]
    ctx: RolloutContext
    search: SearchConfig
    progress: float
    schedule: str
    labels: Tuple
    collect: bool = True


def _run_agile_job(job: AgileJob) -> List[EpisodeSummary]:
    policy = AgilePolicy(PolicyParams(job.weights, job.layer_sizes), job.ctx.ranges, job.ctx.sensor, job.ctx.dynamics)
    results = []
    for episode in range(job.search.episodes_per_candidate):
        rng = stream(job.ctx.seed, *job.labels, episode)
        world = sample_world(rng, job.ctx.layout)
        e_true = sample_params(rng, job.ctx.ranges)
        start = job.ctx.start_state(rng, job.search.start_jitter)
        results.append(agile_training_episode(
            policy, world, e_true, start, job.estimator, job.progress, job.schedule, rng, job.ctx,
            window_stride=job.search.window_stride, collect=job.collect, steps=job.search.episode_steps,
        ))
    return results


@dataclass
class GenerationResult:
    fitness_returns: np.ndarray
    stats: Dict[str, float]


def cross_entropy_search(initial: PolicyParams, search: SearchConfig, seed: int, label: str,
                         evaluate: Callable[[int, List[np.ndarray]], GenerationResult]) -> Tuple[PolicyParams, pd.DataFrame]:
    """Cross-entropy search over the flat weight vector.

    ``evaluate(generation, candidates)`` returns mean returns per candidate.
    The current mean is always evaluated as candidate 0. The elite mean is
    tracked and a drop larger than ``elite_tolerance`` is logged as a warning.

    Returns:
        Final (shrunk and clipped) mean weights and the per-generation trace
    """
    params = regularize_and_clip(initial)
    mean = params.weights.copy()
    std = np.full_like(mean, search.init_std)
    rows = []
    previous_elite = None
    for generation in range(search.generations):
        rng = stream(seed, label, 'generation', generation)
        noise = rng.standard_normal((search.population - 1, mean.size))
        candidates = [mean] + [np.clip(mean + std * z, -params.weight_clip, params.weight_clip) for z in noise]
        result = evaluate(generation, candidates)
        returns = np.asarray(result.fitness_returns, dtype=float)
        if not np.all(np.isfinite(returns)):
            raise TrainingDivergedError(f"Non-finite return in generation {generation}")
        penalties = np.array([params.l2_coeff * float(c @ c) for c in candidates])
        fitness = returns - penalties
        order = np.argsort(-fitness, kind='stable')[:search.n_elite]
        elites = np.stack([candidates[i] for i in order])
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), search.min_std)
        params = regularize_and_clip(params.with_weights(mean))
        mean = params.weights

        elite_mean = float(returns[order].mean())
        if previous_elite is not None and elite_mean < previous_elite - search.elite_tolerance * max(abs(previous_elite), 1.0):
            logger.warning("%s generation %d: elite mean return dropped %.3f -> %.3f",
                           label, generation, previous_elite, elite_mean)
        previous_elite = elite_mean
        row = {
            'generation': generation,
            'mean_return': float(returns.mean()),
            'elite_mean_return': elite_mean,
            'best_return': float(returns[order[0]]),
            'std_mean': float(std.mean()),
            'max_abs_weight': float(np.max(np.abs(mean))) if mean.size else 0.0,
        }
        row.update(result.stats)
        rows.append(row)
        logger.info("%s generation %d/%d: mean return %.3f, elite %.3f",
                    label, generation + 1, search.generations, row['mean_return'], elite_mean)
    return params, pd.DataFrame(rows)


@dataclass
class AgileTrainingResult:
    policy: PolicyParams
    estimator: EstimatorParams
    trace: pd.DataFrame
    validation_loss: float
    sensitivity: float


def _progress(generation: int, generations: int) -> float:
    return generation / (generations - 1) if generations > 1 else 1.0


def collect_agile_samples(policy: PolicyParams, estimator: EstimatorParams, ctx: RolloutContext,
                          search: SearchConfig, episodes: int, labels: Tuple, schedule: str = 'estimate_only',
                          workers: int = 1) -> Tuple[SampleSet, List[EpisodeSummary]]:
    """Agile-only rollouts with estimate conditioning; returns their windows."""
    single = dataclasses.replace(search, episodes_per_candidate=1)
    jobs = [AgileJob(policy.weights, policy.layer_sizes, estimator, ctx, single, 1.0, schedule, labels + (k,))
            for k in range(episodes)]
    summaries = [s for batch in parallel_map(_run_agile_job, jobs, workers) for s in batch]
    samples = SampleSet()
    for summary in summaries:
        samples = samples.concat(summary.samples)
    return samples, summaries


def _fit_on_privileged_rollouts(policy: PolicyParams, estimator: EstimatorParams, ctx: RolloutContext,
                                search: SearchConfig, label: str, workers: int) -> EstimatorParams:
    """Fit the estimator on windows from truth-conditioned rollouts of ``policy``."""
    episodes = search.population * search.episodes_per_candidate
    samples, _ = collect_agile_samples(policy, estimator, ctx, search, episodes, (label, 'privileged'),
                                       schedule='truth_only', workers=workers)
    buffer = samples.tail(ctx.estimator.buffer_size)
    if not len(buffer):
        logger.warning("%s: privileged rollouts produced no estimator windows", label)
        return estimator
    loss = float('nan')
    for k in range(search.generations):
        batch = buffer.subsample(stream(ctx.seed, label, 'privileged', k, 'fit'), ctx.estimator.fit_batch_size)
        estimator, loss = fit(batch, estimator, ctx.ranges, ctx.estimator)
    logger.info("%s: estimator fitted on %d privileged windows, loss %.5f", label, len(buffer), loss)
    return estimator


def train_agile(ctx: RolloutContext, search: SearchConfig, estimator: EstimatorParams,
                schedule: Optional[str] = None, workers: int = 1, label: str = 'agile',
                validation_episodes: int = 10, joint: bool = True) -> AgileTrainingResult:
    """Jointly train the agile policy and the estimator.

    Each generation rolls every candidate on the same randomized worlds and
    parameters, conditions the policy on ``fuse(e, e_hat, progress)``, ranks by
    return, refits the sampling distribution, and then refits the estimator
    on the windows collected in that generation.

    With ``joint=False`` the policy is searched on the true parameters alone
    and the estimator is untouched during the search. It is then fitted once,
    with the same number of fit rounds, on windows from rollouts of the final
    privileged policy.

    Args:
        ctx: Rollout context (world layout, dynamics, ranges, reward, seed)
        search: Cross-entropy search settings
        estimator: Initial (possibly untrained) estimator
        schedule: Fusion schedule, defaults to ``ctx.estimator.alpha_schedule``
        workers: Process count for candidate evaluation
        label: Stream label prefix
        validation_episodes: Episodes in the held-out validation set
        joint: Interleave estimator fitting with the search

    Returns:
        AgileTrainingResult with the trace and the held-out estimator loss
    """
    schedule = (schedule or ctx.estimator.alpha_schedule) if joint else 'truth_only'
    fusion_alpha(0.0, schedule)
    initial = PolicyParams.zeros(agile_layer_sizes(ctx.sensor, search), search.weight_clip, search.l2_coeff)
    state = {'estimator': estimator, 'buffer': SampleSet()}

    def evaluate(generation: int, candidates: List[np.ndarray]) -> GenerationResult:
        progress = _progress(generation, search.generations)
        jobs = [AgileJob(w, initial.layer_sizes, state['estimator'] if joint else None, ctx, search, progress,
                         schedule, (label, generation, 'episode'), collect=joint) for w in candidates]
        batches = parallel_map(_run_agile_job, jobs, workers)
        returns = np.array([np.mean([s.discounted_return for s in batch]) for batch in batches])
        flat = [s for batch in batches for s in batch]

        buffer = state['buffer']
        for summary in flat:
            buffer = buffer.concat(summary.samples)
        buffer = buffer.tail(ctx.estimator.buffer_size)
        fit_rng = stream(ctx.seed, label, generation, 'fit')
        batch = buffer.subsample(fit_rng, ctx.estimator.fit_batch_size)
        loss = float('nan')
        if len(batch):
            state['estimator'], loss = fit(batch, state['estimator'], ctx.ranges, ctx.estimator)
        state['buffer'] = buffer
        return GenerationResult(returns, {
            'progress': progress,
            'alpha': fusion_alpha(progress, schedule),
            'collision_rate': float(np.mean([s.outcome == 'collision' for s in flat])),
            'reach_rate': float(np.mean([s.outcome == 'reach' for s in flat])),
            'estimator_loss': loss,
            'buffer_size': len(buffer),
        })

    policy, trace = cross_entropy_search(initial, search, ctx.seed, label, evaluate)
    if not joint:
        state['estimator'] = _fit_on_privileged_rollouts(policy, estimator, ctx, search, label, workers)
    final_estimator = state['estimator']
    validation, _ = collect_agile_samples(policy, final_estimator, ctx, search, validation_episodes,
                                          (label, 'validation'), workers=workers)
    validation_loss = evaluate_loss(validation, final_estimator, ctx.ranges) if len(validation) else float('nan')
    logger.info("Agile training done: estimator validation loss %.5f", validation_loss)

    probe_rng = stream(ctx.seed, label, 'sensitivity')
    world = sample_world(probe_rng, ctx.layout)
    lo = np.array([ctx.layout.arena_bounds[0], ctx.layout.arena_bounds[1], -math.pi, 0.0, -1.0])
    hi = np.array([ctx.layout.arena_bounds[2], ctx.layout.arena_bounds[3], math.pi, ctx.dynamics.v_max, 1.0])
    states = probe_rng.uniform(lo, hi, size=(64, 5))
    e_probe = np.stack([sample_params(probe_rng, ctx.ranges).estimated_vector() for _ in range(64)])
    agile = AgilePolicy(policy, ctx.ranges, ctx.sensor, ctx.dynamics)
    sensitivity = condition_sensitivity(agile, states, e_probe, world, probe_rng)
    return AgileTrainingResult(policy, final_estimator, trace, validation_loss, sensitivity)


def recovery_training_episode(controller, e_true: EnvParams, world: WorldSpec, rng: np.random.Generator,
                              ctx: RolloutContext, search: SearchConfig) -> EpisodeSummary:
    """Track uniformly sampled twist commands; returns ``-tracking_error`` as the return.

    The command is resampled every ``command_segment_steps``. Tracking error
    is the mean of ``|v - v_cmd| / v_max + |omega - omega_cmd| / omega_max``.
    """
    dyn = ctx.dynamics
    steps = search.episode_steps or 3 * search.command_segment_steps
    x, y, theta = ctx.layout.start_pose
    state = State(x, y, theta, float(rng.uniform(0.0, dyn.v_cmd_max)),
                  float(rng.uniform(-dyn.omega_cmd_max, dyn.omega_cmd_max) * 0.5))
    prev, a_prev = None, Action.zero()
    command = Action.zero()
    error = 0.0
    v_peak = abs(state.v)
    for t in range(steps):
        if t % search.command_segment_steps == 0:
            command = Action.from_array(rng.uniform(dyn.action_low, dyn.action_high))
        obs = observe(state, a_prev, rng, world, ctx.goal, prev_state=prev, params=e_true,
                      sensor=ctx.sensor, cfg=dyn)
        action = controller.act(obs, command)
        prev, state = state, step(state, action, e_true, cfg=dyn)
        a_prev = action
        v_peak = max(v_peak, abs(state.v))
        error += abs(state.v - command.v_cmd) / dyn.v_max + abs(state.omega - command.omega_cmd) / dyn.omega_cmd_max
    error /= steps
    if not math.isfinite(error):
        raise TrainingDivergedError(f"Non-finite tracking error {error}")
    return EpisodeSummary(-error, 'timeout', steps, v_peak, tracking_error=error)


@dataclass(frozen=True, eq=False)
class RecoveryJob:
    weights: Optional[np.ndarray]
    layer_sizes: Tuple[int, ...]
    ctx: RolloutContext
    search: SearchConfig
    labels: Tuple
    episodes: int
    baseline: bool = False


def _run_recovery_job(job: RecoveryJob) -> List[EpisodeSummary]:
    if job.baseline:
        controller = ProportionalTwistController(dynamics=job.ctx.dynamics)
    else:
        controller = RecoveryPolicy(PolicyParams(job.weights, job.layer_sizes), job.ctx.sensor,
                                    job.ctx.dynamics, job.search.correction_scale)
    world = empty_world(job.ctx.layout)
    results = []
    for episode in range(job.episodes):
        rng = stream(job.ctx.seed, *job.labels, episode)
        e_true = sample_params(rng, job.ctx.ranges)
        results.append(recovery_training_episode(controller, e_true, world, rng, job.ctx, job.search))
    return results


@dataclass
class RecoveryTrainingResult:
    policy: PolicyParams
    trace: pd.DataFrame
    tracking_error: float
    baseline_error: float


def train_recovery(ctx: RolloutContext, search: SearchConfig, workers: int = 1,
                   label: str = 'recovery') -> RecoveryTrainingResult:
    """Train the residual tracking policy under full randomization.

    Candidates share their episodes within a generation. After training, the
    policy and the proportional baseline are scored on the same held-out
    episodes.
    """
    initial = PolicyParams.zeros(recovery_layer_sizes(ctx.sensor, search), search.weight_clip, search.l2_coeff)

    def evaluate(generation: int, candidates: List[np.ndarray]) -> GenerationResult:
        jobs = [RecoveryJob(w, initial.layer_sizes, ctx, search, (label, generation, 'episode'),
                            search.episodes_per_candidate) for w in candidates]
        batches = parallel_map(_run_recovery_job, jobs, workers)
        returns = np.array([np.mean([s.discounted_return for s in batch]) for batch in batches])
        return GenerationResult(returns, {'tracking_error': float(-returns[0])})

    policy, trace = cross_entropy_search(initial, search, ctx.seed, label, evaluate)
    eval_labels = (label, 'evaluation')
    trained = _run_recovery_job(RecoveryJob(policy.weights, policy.layer_sizes, ctx, search, eval_labels,
                                            search.eval_episodes))
    baseline = _run_recovery_job(RecoveryJob(None, policy.layer_sizes, ctx, search, eval_labels,
                                             search.eval_episodes, baseline=True))
    tracking = float(np.mean([s.tracking_error for s in trained]))
    baseline_error = float(np.mean([s.tracking_error for s in baseline]))
    logger.info("Recovery tracking error %.4f (proportional baseline %.4f)", tracking, baseline_error)
    return RecoveryTrainingResult(policy, trace, tracking, baseline_error)
