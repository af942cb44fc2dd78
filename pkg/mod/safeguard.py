"""Closed-loop runtime: estimate, evaluate the value, switch, and act.

Every control step:

    observe -> estimate from the window -> V(s, e_hat) > threshold ?
        no:  agile command conditioned on e_hat
        yes: recovery policy tracking the candidate twist whose one-step
             nominal successor has the lowest value

Both policies write into the same history window; only an episode reset
clears it. The outcome of an episode is exactly one of collision (failure
margin positive at some step), reach (target margin non-positive before any
collision) or timeout.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from mod.dynamics import PARAM_FIELDS, STATE_FIELDS, Action, EnvParams, State, observe, step, step_batch
from mod.errors import ConfigError, ContractError, InvalidStateError
from mod.estimator import ESTIMATED_FIELDS, EstimatorParams, HistoryWindow, SampleSet, estimate
from mod.policies import AgilePolicy, RecoveryPolicy, RolloutContext
from mod.ravalue import ra_value
from mod.world import WorldSpec, failure_margin, target_margin

logger = logging.getLogger(__name__)

MODES = ('safeguarded', 'agile_only', 'recovery_only')
OUTCOMES = ('collision', 'reach', 'timeout')


@dataclass(frozen=True)
class SafeguardConfig:
    switch_threshold: float = 0.0
    hysteresis: float = 0.0
    v_candidates: int = 9
    omega_candidates: int = 9
    model: str = 'net'
    window_stride: int = 4

    def __post_init__(self):
        if self.v_candidates < 1 or self.omega_candidates < 1:
            raise ConfigError("Candidate counts must be positive")
        if self.hysteresis < 0:
            raise ConfigError("hysteresis must be non-negative")
        if self.model not in ('net', 'table'):
            raise ConfigError(f"Unknown value model '{self.model}'")


def candidate_twists(ctx_dynamics, n_v: int = 9, n_omega: int = 9) -> np.ndarray:
    """Grid of twists over the command box plus a full stop, ``(n_v * n_omega + 1, 2)``."""
    v = np.linspace(ctx_dynamics.v_cmd_min, ctx_dynamics.v_cmd_max, n_v)
    omega = np.linspace(-ctx_dynamics.omega_cmd_max, ctx_dynamics.omega_cmd_max, n_omega)
    grid = np.stack(np.meshgrid(v, omega, indexing='ij'), axis=-1).reshape(-1, 2)
    return np.vstack([grid, np.zeros((1, 2))])


def should_recover(state: State, e_hat: np.ndarray, model, world: Optional[WorldSpec] = None,
                   threshold: float = 0.0, recovering: bool = False, hysteresis: float = 0.0) -> bool:
    """True iff ``V(s, e_hat)`` exceeds the switch threshold.

    With ``hysteresis > 0`` an active recovery continues until the value
    drops to ``threshold - hysteresis``.
    """
    value = ra_value(state, e_hat, model, world)
    if recovering and hysteresis > 0:
        return value > threshold - hysteresis
    return value > threshold


def select_recovery_twist(state: State, e_hat: np.ndarray, model, candidates: np.ndarray,
                          world: Optional[WorldSpec] = None, recovery: Optional[RecoveryPolicy] = None,
                          ctx: RolloutContext = RolloutContext()) -> Tuple[Action, np.ndarray]:
    """Twist whose predicted successor has the lowest value.

    The successor is one step of the nominal dynamics with ``e_hat``
    substituted for the true parameters and no external force. When a
    recovery policy is given, its command for each candidate is simulated.
    Ties go to the smaller twist norm, then to the lexicographically smaller
    ``(v, omega)``.

    Returns:
        Selected twist and the predicted value of every candidate

    Raises:
        ContractError: If ``candidates`` is empty
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.size == 0:
        raise ContractError("Recovery twist selection needs at least one candidate")
    e_hat = np.asarray(e_hat, dtype=float)
    world = world if world is not None else getattr(model, 'world', None)
    states = np.tile(state.as_array(), (candidates.shape[0], 1))
    if recovery is not None:
        commands = recovery.act_batch(states, candidates, e_hat, world)
    else:
        commands = ctx.dynamics.clip_action(candidates)
    successors = step_batch(states, commands, EnvParams.from_vector(e_hat), cfg=ctx.dynamics)
    values, _ = model.value_batch(successors, e_hat, world)
    norms = np.linalg.norm(candidates, axis=1)
    best = int(np.lexsort((candidates[:, 1], candidates[:, 0], norms, values))[0])
    return Action.from_array(candidates[best]), values


@dataclass(frozen=True, eq=False)
class Components:
    """Trained pieces of the closed loop; unused pieces may be None for some modes."""

    agile: Optional[AgilePolicy] = None
    recovery: Optional[RecoveryPolicy] = None
    estimator: Optional[EstimatorParams] = None
    model: Any = None


@dataclass(frozen=True)
class ParamShift:
    """Replace the true parameters from ``step`` on (evaluation only)."""

    step: int
    params: EnvParams


@dataclass
class EpisodeOutcome:
    classification: str
    steps: int
    v_peak: float
    recovery_fraction: float
    min_ra_value: float
    max_ra_value: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'classification': self.classification,
            'steps': self.steps,
            'v_peak': self.v_peak,
            'recovery_fraction': self.recovery_fraction,
            'min_ra_value': None if math.isnan(self.min_ra_value) else self.min_ra_value,
            'max_ra_value': None if math.isnan(self.max_ra_value) else self.max_ra_value,
        }


@dataclass
class Trajectory:
    """Per-step records of one episode plus its switch events."""

    rows: List[Dict[str, float]] = field(default_factory=list)
    switch_events: List[Dict[str, Any]] = field(default_factory=list)
    samples: SampleSet = field(default_factory=SampleSet)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def states(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, 5))
        return np.array([[row[name] for name in STATE_FIELDS] for row in self.rows])


def classify(l_values: np.ndarray, zeta_values: np.ndarray) -> str:
    """Outcome of a margin sequence: collision beats reach, reach beats timeout."""
    for l_value, zeta_value in zip(l_values, zeta_values):
        if zeta_value > 0:
            return 'collision'
        if l_value <= 0:
            return 'reach'
    return 'timeout'


def _row(t: int, state: State, action: Action, e_true: EnvParams, e_hat: np.ndarray,
         acting: str, value: float, l_value: float, zeta_value: float, twist: Optional[Action]) -> Dict[str, float]:
    row = {'t': t}
    row.update(zip(STATE_FIELDS, state.as_array().tolist()))
    row.update({'v_cmd': action.v_cmd, 'omega_cmd': action.omega_cmd})
    row.update({f'e_{name}': float(value_) for name, value_ in zip(PARAM_FIELDS, e_true.as_vector())})
    row.update({f'e_hat_{name}': float(value_) for name, value_ in zip(ESTIMATED_FIELDS, e_hat)})
    row.update({
        'policy': acting,
        'ra_value': value,
        'l': l_value,
        'zeta': zeta_value,
        'twist_v': twist.v_cmd if twist is not None else float('nan'),
        'twist_omega': twist.omega_cmd if twist is not None else float('nan'),
    })
    return row


def run_episode(world: WorldSpec, e_true: EnvParams, components: Components, mode: str,
                rng: np.random.Generator, ctx: RolloutContext = RolloutContext(),
                cfg: SafeguardConfig = SafeguardConfig(), start: Optional[State] = None,
                shift: Optional[ParamShift] = None,
                estimate_override: Optional[Callable[[int], np.ndarray]] = None,
                collect_windows: bool = False) -> Tuple[Trajectory, EpisodeOutcome]:
    """Run one closed-loop episode for at most ``ctx.dynamics.horizon_steps`` steps.

    Args:
        world: Episode world
        e_true: True parameters (replaced by ``shift.params`` from ``shift.step`` on)
        components: Trained policies, estimator and value model
        mode: ``safeguarded``, ``agile_only`` or ``recovery_only``
        rng: Observation-noise stream
        ctx: Dynamics, sensing and ranges
        cfg: Switch threshold and candidate grid
        start: Initial state (defaults to the layout start pose at rest)
        shift: Mid-episode parameter change
        estimate_override: ``t -> e_hat`` replacing the estimator output
        collect_windows: Keep estimator windows every ``cfg.window_stride`` steps

    Returns:
        Trajectory and EpisodeOutcome

    Raises:
        ContractError: If a component needed by ``mode`` is missing, or on a
            component contract violation (re-raised with the step index)
    """
    if mode not in MODES:
        raise ContractError(f"Unknown mode '{mode}', expected one of {MODES}")
    if mode != 'recovery_only' and components.agile is None:
        raise ContractError(f"Mode '{mode}' needs an agile policy")
    if mode != 'agile_only' and (components.recovery is None or components.model is None):
        raise ContractError(f"Mode '{mode}' needs a recovery policy and a value model")

    threshold = math.inf if mode == 'agile_only' else cfg.switch_threshold
    candidates = candidate_twists(ctx.dynamics, cfg.v_candidates, cfg.omega_candidates)
    window = HistoryWindow(ctx.estimator.window_length)
    state = start if start is not None else ctx.start_state(None)
    trajectory = Trajectory()
    windows, targets = [], []
    prev, a_prev = None, Action.zero()
    recovering = False
    values: List[float] = []
    recovery_steps = 0
    v_peak = abs(state.v)
    params = e_true

    l_value, zeta_value = target_margin(state, world), failure_margin(state, world)
    classification = classify([l_value], [zeta_value])
    t = 0
    while classification == 'timeout' and t < ctx.dynamics.horizon_steps:
        try:
            if shift is not None and t == shift.step:
                params = shift.params
            obs = observe(state, a_prev, rng, world, ctx.goal, prev_state=prev, params=params,
                          sensor=ctx.sensor, cfg=ctx.dynamics)
            if estimate_override is not None:
                e_hat = ctx.ranges.clamp(estimate_override(t))
            elif components.estimator is not None:
                e_hat = estimate(window, components.estimator, ctx.ranges)
            else:
                e_hat = ctx.ranges.denormalize(np.zeros(len(ESTIMATED_FIELDS)))

            value = ra_value(state, e_hat, components.model, world) if components.model is not None else float('nan')
            if mode == 'recovery_only':
                use_recovery = True
            elif mode == 'agile_only':
                use_recovery = False
            elif recovering and cfg.hysteresis > 0:
                use_recovery = value > threshold - cfg.hysteresis
            else:
                use_recovery = value > threshold

            twist = None
            if use_recovery:
                twist, _ = select_recovery_twist(state, e_hat, components.model, candidates, world,
                                                 components.recovery, ctx)
                action = components.recovery.act(obs, twist)
            else:
                action = components.agile.act(obs, e_hat)
        except (ContractError, InvalidStateError) as e:
            raise type(e)(f"step {t}: {e}") from e

        if use_recovery != recovering and t > 0:
            trajectory.switch_events.append({
                't': t, 'from': 'recovery' if recovering else 'agile', 'to': 'recovery' if use_recovery else 'agile',
                'ra_value': value,
            })
        recovering = use_recovery
        recovery_steps += int(use_recovery)
        if not math.isnan(value):
            values.append(value)

        window.push(obs.proprio, action.as_array())
        if collect_windows and t % cfg.window_stride == cfg.window_stride - 1:
            windows.append(window.features())
            targets.append(params.estimated_vector())
        trajectory.rows.append(_row(t, state, action, params, e_hat, 'recovery' if use_recovery else 'agile',
                                    value, l_value, zeta_value, twist))

        prev, state = state, step(state, action, params, cfg=ctx.dynamics)
        a_prev = action
        v_peak = max(v_peak, abs(state.v))
        l_value, zeta_value = target_margin(state, world), failure_margin(state, world)
        classification = classify([l_value], [zeta_value])
        t += 1

    trajectory.rows.append(_row(t, state, Action.zero(), params,
                                np.full(len(ESTIMATED_FIELDS), np.nan), 'terminal', float('nan'),
                                l_value, zeta_value, None))
    trajectory.samples = SampleSet.from_lists(windows, targets)
    outcome = EpisodeOutcome(
        classification=classification,
        steps=t,
        v_peak=v_peak,
        recovery_fraction=recovery_steps / t if t else 0.0,
        min_ra_value=min(values) if values else float('nan'),
        max_ra_value=max(values) if values else float('nan'),
    )
    return trajectory, outcome
