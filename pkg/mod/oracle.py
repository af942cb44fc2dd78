"""Exhaustive-rollout ground truth on small deterministic closed loops.

A closed loop maps states to successors and reports ``(l, zeta)``. Rollouts
treat the target as absorbing. For values the failure set is absorbing too,
matching terminal cells in value iteration; membership rollouts keep going
through failure so the backward-reachable set is not cut short.

Membership from one start state:

    reaches      <=> l <= 0 at some step
    safe         <=> zeta <= 0 at every step up to target entry or the horizon
    reach_avoid  <=> reaches and safe
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Hashable, List, Optional, Sequence, Tuple

import numpy as np

from mod.dynamics import DEFAULT_DYNAMICS, DynamicsConfig, EnvParams, step_batch
from mod.errors import BudgetExceededError, ContractError
from mod.ravalue import TabularProblem, drabe_backup, normalize_margin
from mod.world import WorldSpec, margins_batch

logger = logging.getLogger(__name__)

SWEEP_CELL_BUDGET = 100_000


class ClosedLoop(ABC):
    """Deterministic, noise-free closed loop ``s -> f_pi(s, e)``."""

    @abstractmethod
    def step_many(self, states: np.ndarray) -> np.ndarray:
        """Successors of an ``(n, d)`` state matrix."""

    @abstractmethod
    def margins_many(self, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """``(l, zeta)`` of an ``(n, d)`` state matrix."""

    def key(self, state: np.ndarray) -> Hashable:
        """Hashable identity of a state, used to detect revisits."""
        return tuple(np.round(np.asarray(state, dtype=float), 12).tolist())


class RobotClosedLoop(ClosedLoop):
    """Robot dynamics under a batch policy conditioned on the true parameters.

    Margins are scaled and clipped like the value tables so the oracle values
    are comparable with them; the defaults keep raw meters.
    """

    def __init__(self, policy, params: EnvParams, world: WorldSpec,
                 dyn_cfg: DynamicsConfig = DEFAULT_DYNAMICS, dt: Optional[float] = None,
                 margin_scale: float = 1.0, bound: float = math.inf):
        self.policy = policy
        self.params = params
        self.world = world
        self.dyn_cfg = dyn_cfg
        self.dt = dt
        self.margin_scale = margin_scale
        self.bound = bound

    def step_many(self, states: np.ndarray) -> np.ndarray:
        actions = self.policy.act_batch(states, self.params.estimated_vector(), self.world)
        return step_batch(states, actions, self.params, dt=self.dt, cfg=self.dyn_cfg)

    def margins_many(self, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        l_raw, z_raw = margins_batch(states, self.world)
        return (normalize_margin(l_raw, self.margin_scale, self.bound),
                normalize_margin(z_raw, self.margin_scale, self.bound))


class ChainClosedLoop(ClosedLoop):
    """Closed loop on a finite lattice: state ``i`` moves to ``next_index[i]``.

    States are ``(n, 1)`` arrays of lattice indices.
    """

    def __init__(self, next_index: Sequence[int], l: Sequence[float], zeta: Sequence[float]):
        self.next_index = np.asarray(next_index, dtype=np.int64)
        self.l = np.asarray(l, dtype=float)
        self.zeta = np.asarray(zeta, dtype=float)
        n = self.next_index.shape[0]
        if self.l.shape != (n,) or self.zeta.shape != (n,):
            raise ContractError("Chain margins must have one entry per lattice state")
        if np.any(self.next_index < 0) or np.any(self.next_index >= n):
            raise ContractError("Chain successor index out of range")

    @property
    def n_states(self) -> int:
        return int(self.next_index.shape[0])

    def states(self) -> np.ndarray:
        return np.arange(self.n_states, dtype=float)[:, None]

    def step_many(self, states: np.ndarray) -> np.ndarray:
        index = np.asarray(states, dtype=float)[:, 0].astype(np.int64)
        return self.next_index[index].astype(float)[:, None]

    def margins_many(self, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        index = np.asarray(states, dtype=float)[:, 0].astype(np.int64)
        return self.l[index], self.zeta[index]

    def key(self, state: np.ndarray) -> Hashable:
        return int(np.asarray(state).ravel()[0])

    def to_problem(self) -> TabularProblem:
        """The same loop as a value-iteration problem (one successor, weight one)."""
        return TabularProblem(self.l.copy(), self.zeta.copy(), self.next_index[:, None].copy(),
                              np.ones((self.n_states, 1)))


@dataclass(frozen=True)
class StateClass:
    safe: bool
    reaches: bool
    reach_avoid: bool


@dataclass(frozen=True)
class ExactValue:
    """Values of one start state along its deterministic trajectory.

    ``undiscounted``: min over tau of max(l(tau), max_{k<=tau} zeta(k)).
    ``discounted``: min over t of max(gamma^t l(t), max_{k<=t} gamma^k zeta(k)).
    ``drabe``: fixed point of the discounted backup unrolled along the trajectory.
    """

    undiscounted: float
    discounted: float
    drabe: float
    steps: int
    terminal: bool


@dataclass
class SetMembership:
    """Membership rasters of the safe, backward-reachable and reach-avoid sets."""

    safe: np.ndarray
    reaches: np.ndarray
    reach_avoid: np.ndarray
    horizon: int
    params: Optional[np.ndarray] = None

    def counts(self) -> dict:
        return {'safe': int(self.safe.sum()), 'reaches': int(self.reaches.sum()),
                'reach_avoid': int(self.reach_avoid.sum()), 'cells': int(self.safe.size)}

    def algebra_holds(self) -> bool:
        """``RA`` is contained in ``safe`` and in ``reaches``."""
        return bool(np.all(~self.reach_avoid | (self.safe & self.reaches)))


def _membership_rollout(loop: ClosedLoop, states: np.ndarray, horizon: int) -> Tuple[np.ndarray, np.ndarray]:
    states = np.array(states, dtype=float, copy=True)
    n = states.shape[0]
    l, zeta = loop.margins_many(states)
    reaches = l <= 0
    unsafe = (zeta > 0)
    active = ~reaches
    for _ in range(horizon):
        if not active.any():
            break
        states[active] = loop.step_many(states[active])
        l_a, z_a = loop.margins_many(states[active])
        unsafe[active] |= z_a > 0
        reached_now = np.zeros(n, dtype=bool)
        reached_now[active] = l_a <= 0
        reaches |= reached_now
        active &= ~reached_now
    return reaches, ~unsafe


def classify_state(s0: np.ndarray, loop: ClosedLoop, horizon: int) -> StateClass:
    """Membership of one start state in the safe, reachable and reach-avoid sets."""
    if horizon < 0:
        raise ContractError(f"Horizon must be non-negative, got {horizon}")
    reaches, safe = _membership_rollout(loop, np.atleast_2d(np.asarray(s0, dtype=float)), horizon)
    return StateClass(bool(safe[0]), bool(reaches[0]), bool(reaches[0] and safe[0]))


def _trajectory(loop: ClosedLoop, s0: np.ndarray, horizon: int):
    """Margins along the value rollout plus the index a revisit loops back to."""
    state = np.atleast_2d(np.asarray(s0, dtype=float))
    seen = {}
    l_values: List[float] = []
    z_values: List[float] = []
    cycle_start = None
    terminal = False
    for t in range(horizon + 1):
        key = loop.key(state[0])
        if key in seen:
            cycle_start = seen[key]
            break
        seen[key] = t
        l, zeta = loop.margins_many(state)
        l_values.append(float(l[0]))
        z_values.append(float(zeta[0]))
        if l[0] <= 0 or zeta[0] > 0:
            terminal = True
            break
        if t < horizon:
            state = loop.step_many(state)
    return np.array(l_values), np.array(z_values), cycle_start, terminal


def _unrolled_drabe(l: np.ndarray, zeta: np.ndarray, cycle_start: Optional[int], terminal: bool,
                    gamma: float, max_rounds: int = 100_000) -> float:
    last = len(l) - 1
    values = np.maximum(l, zeta)
    if cycle_start is not None and not terminal:
        for _ in range(max_rounds):
            before = values[cycle_start:].copy()
            values[last] = drabe_backup(values[cycle_start], l[last], zeta[last], gamma)
            for i in range(last - 1, cycle_start - 1, -1):
                values[i] = drabe_backup(values[i + 1], l[i], zeta[i], gamma)
            if np.max(np.abs(values[cycle_start:] - before)) <= 1e-15:
                break
        start = cycle_start - 1
    else:
        # terminal or horizon-truncated: the last state keeps its self-loop value
        start = last - 1
    for i in range(start, -1, -1):
        values[i] = drabe_backup(values[i + 1], l[i], zeta[i], gamma)
    return float(values[0])


def exact_value(s0: np.ndarray, loop: ClosedLoop, horizon: int, gamma: float) -> ExactValue:
    """Exact values of one start state by enumeration along its trajectory.

    Args:
        s0: Start state
        loop: Deterministic closed loop
        horizon: Maximum number of steps
        gamma: Discount in [0, 1]

    Returns:
        ExactValue
    """
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma must lie in [0, 1], got {gamma}")
    l, zeta, cycle_start, terminal = _trajectory(loop, s0, horizon)
    running = np.maximum.accumulate(zeta)
    undiscounted = float(np.min(np.maximum(l, running)))
    powers = gamma ** np.arange(len(l), dtype=float)
    discounted = float(np.min(np.maximum(powers * l, np.maximum.accumulate(powers * zeta))))
    drabe = _unrolled_drabe(l, zeta, cycle_start, terminal, gamma) if gamma < 1.0 else undiscounted
    return ExactValue(undiscounted, discounted, drabe, len(l) - 1, terminal)


def sweep_sets(states: np.ndarray, loops: Sequence[ClosedLoop], horizon: int,
               grid_shape: Optional[Tuple[int, ...]] = None,
               budget: int = SWEEP_CELL_BUDGET) -> List[SetMembership]:
    """Classify every grid state under every closed loop (one loop per parameter set).

    Raises:
        BudgetExceededError: If the grid holds more than ``budget`` cells
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    n = states.shape[0]
    total = n * len(loops)
    if n > budget:
        raise BudgetExceededError(
            f"Sweep refused: {n} cells x {len(loops)} parameter sets = {total} rollouts "
            f"exceeds {budget} cells x {len(loops)} parameter sets")
    shape = grid_shape or (n,)
    out = []
    for loop in loops:
        reaches, safe = _membership_rollout(loop, states, horizon)
        reach_avoid = reaches & safe
        params = loop.params.estimated_vector() if isinstance(loop, RobotClosedLoop) else None
        membership = SetMembership(safe.reshape(shape), reaches.reshape(shape), reach_avoid.reshape(shape),
                                   horizon, params)
        logger.info("Sweep: %s", membership.counts())
        out.append(membership)
    return out


def exact_values_many(states: np.ndarray, loop: ClosedLoop, horizon: int, gamma: float) -> np.ndarray:
    """``(n, 3)`` array of (undiscounted, discounted, drabe) values, one row per state."""
    rows = []
    for state in np.atleast_2d(states):
        value = exact_value(state, loop, horizon, gamma)
        rows.append((value.undiscounted, value.discounted, value.drabe))
    return np.array(rows)
