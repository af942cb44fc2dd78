"""Parameter-conditioned discounted reach-avoid value.

The backup applied everywhere is

    B[V](s) = (1 - gamma) * max(l, zeta) + gamma * max(min(V(s'), l), zeta)

with ``l`` and ``zeta`` scaled by ``margin_scale`` and clipped to
``[-bound, bound]``. It is a gamma-contraction in the sup norm and monotone.
Two models carry the value:

* ``RATable``: a grid over a reduced state (a subset of x, y, theta, v with
  fixed values for the rest) crossed with (payload mass, friction) bins,
  solved by Jacobi value iteration with multilinear interpolation at the
  policy-induced successor;
* ``RANet``: a small tanh regressor over world-relative features and the
  estimate, fit to backup targets with a frozen bootstrap copy.

Cells inside the target or the failure set are terminal and keep
``max(l, zeta)``, which is the fixed point of a self-looping state.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from mod.dynamics import (
    DEFAULT_DYNAMICS, Action, DynamicsConfig, EnvParams, RandomizationRanges, State,
    body_frame, observe, sample_params, step, step_batch,
)
from mod.errors import ConfigError, ContractError, NonFiniteValueError, TrainingDivergedError
from mod.estimator import EstimatorParams, HistoryWindow, estimate
from mod.mlp import AdamConfig, AdamState, FeedForward, adam_step
from mod.pool import parallel_map
from mod.seeding import stream
from mod.world import WorldSpec, margins_batch, sample_world

logger = logging.getLogger(__name__)

STATE_INDEX = {'x': 0, 'y': 1, 'theta': 2, 'v': 3, 'omega': 4}


def drabe_backup(v_next, l_t, zeta_t, gamma: float):
    """Discounted reach-avoid backup. Works elementwise on arrays.

    Raises:
        ContractError: If ``gamma`` is outside [0, 1]
    """
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma must lie in [0, 1], got {gamma}")
    return ((1.0 - gamma) * np.maximum(l_t, zeta_t)
            + gamma * np.maximum(np.minimum(v_next, l_t), zeta_t))


def normalize_margin(values, scale: float, bound: float):
    """Scale meters by ``scale`` and clip to ``[-bound, bound]``."""
    return np.clip(np.asarray(values, dtype=float) / scale, -bound, bound)


@dataclass(frozen=True)
class GridAxis:
    """One grid axis. Periodic axes hold ``n`` points on ``[lo, hi)``."""

    name: str
    lo: float
    hi: float
    n: int
    periodic: bool = False

    def __post_init__(self):
        if self.n < 1 or (self.n > 1 and not self.hi > self.lo):
            raise ConfigError(f"Invalid grid axis {self}")

    @property
    def spacing(self) -> float:
        if self.periodic:
            return (self.hi - self.lo) / self.n
        return (self.hi - self.lo) / (self.n - 1) if self.n > 1 else 1.0

    @property
    def points(self) -> np.ndarray:
        if self.periodic:
            return self.lo + self.spacing * np.arange(self.n)
        return np.linspace(self.lo, self.hi, self.n) if self.n > 1 else np.array([self.lo])


def multilinear_weights(axes: Sequence[GridAxis], coords: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corner indices and convex weights of points on a C-ordered grid.

    Args:
        axes: Grid axes
        coords: ``(m, len(axes))`` coordinates

    Returns:
        ``(index, weight, clamped)`` with shapes ``(m, 2^k)``, ``(m, 2^k)``, ``(m,)``;
        ``clamped`` marks points outside a non-periodic axis range
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    m = coords.shape[0]
    index = np.zeros((m, 1), dtype=np.int64)
    weight = np.ones((m, 1))
    clamped = np.zeros(m, dtype=bool)
    for dim, axis in enumerate(axes):
        u = (coords[:, dim] - axis.lo) / axis.spacing
        if axis.periodic:
            u = np.mod(u, axis.n)
            i0 = np.floor(u).astype(np.int64) % axis.n
            frac = u - np.floor(u)
            i1 = (i0 + 1) % axis.n
        elif axis.n == 1:
            clamped |= np.abs(coords[:, dim] - axis.lo) > 1e-9
            i0 = np.zeros(m, dtype=np.int64)
            i1 = i0
            frac = np.zeros(m)
        else:
            clamped |= (u < -1e-9) | (u > axis.n - 1 + 1e-9)
            u = np.clip(u, 0.0, axis.n - 1)
            i0 = np.minimum(np.floor(u).astype(np.int64), axis.n - 2)
            frac = u - i0
            i1 = i0 + 1
        index = np.concatenate([index * axis.n + i0[:, None], index * axis.n + i1[:, None]], axis=1)
        weight = np.concatenate([weight * (1.0 - frac)[:, None], weight * frac[:, None]], axis=1)
    return index, weight, clamped


@dataclass(frozen=True)
class StateGrid:
    """Grid over a subset of the state; other components take ``fixed`` values."""

    axes: Tuple[GridAxis, ...]
    fixed: Tuple[float, float, float, float, float] = (0.0, 0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        names = [axis.name for axis in self.axes]
        if not names or len(set(names)) != len(names) or any(name not in STATE_INDEX for name in names):
            raise ConfigError(f"Grid axes must be distinct names from {tuple(STATE_INDEX)}, got {names}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(axis.n for axis in self.axes)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def dims(self) -> List[int]:
        return [STATE_INDEX[axis.name] for axis in self.axes]

    def states(self) -> np.ndarray:
        """``(n_cells, 5)`` states at the grid points, C order."""
        mesh = np.meshgrid(*[axis.points for axis in self.axes], indexing='ij')
        out = np.tile(np.asarray(self.fixed, dtype=float), (self.n_cells, 1))
        for dim, values in zip(self.dims, mesh):
            out[:, dim] = values.ravel()
        return out

    def locate(self, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        states = np.atleast_2d(states)
        return multilinear_weights(self.axes, states[:, self.dims])


@dataclass(frozen=True)
class RAValueConfig:
    """Value model settings (table and network)."""

    gamma_table: float = 0.999
    gamma_net: float = 0.95
    margin_scale: float = 2.0
    bound: float = 1.0
    tol: float = 1e-5
    max_sweeps: int = 3000
    grid_x: Tuple[float, float, int] = (-1.0, 11.0, 25)
    grid_y: Tuple[float, float, int] = (-3.0, 3.0, 13)
    grid_theta: int = 16
    grid_v: Tuple[float, float, int] = (0.0, 3.5, 8)
    mass_bins: int = 7
    friction_bins: int = 5
    hidden_units: int = 64
    hidden_layers: int = 2
    k_obstacles: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 256
    fit_batches: int = 2000
    target_refresh: int = 200
    record_episodes: int = 200
    condition_on_truth: bool = False
    gap_bound: float = 0.1

    def __post_init__(self):
        for name in ('gamma_table', 'gamma_net'):
            gamma = getattr(self, name)
            if not 0.0 < gamma < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {gamma}")
        if self.margin_scale <= 0 or self.bound <= 0 or self.tol <= 0:
            raise ConfigError("margin_scale, bound and tol must be positive")
        if self.target_refresh < 1 or self.batch_size < 1 or self.mass_bins < 1 or self.friction_bins < 1:
            raise ConfigError("target_refresh, batch_size and bin counts must be positive")

    def grid(self) -> StateGrid:
        return StateGrid(axes=(
            GridAxis('x', *self.grid_x),
            GridAxis('y', *self.grid_y),
            GridAxis('theta', -math.pi, math.pi, self.grid_theta, periodic=True),
            GridAxis('v', *self.grid_v),
        ))


@dataclass(eq=False)
class RATable:
    """Tabular value over ``grid`` cells for every (mass, friction) bin of one world."""

    grid: StateGrid
    world: WorldSpec
    mass_values: np.ndarray
    friction_values: np.ndarray
    values: np.ndarray
    gamma: float
    margin_scale: float = 2.0
    bound: float = 1.0

    def __post_init__(self):
        expected = (len(self.mass_values), len(self.friction_values), self.grid.n_cells)
        if self.values.shape != expected:
            raise ContractError(f"Table values have shape {self.values.shape}, expected {expected}")

    @property
    def e_axes(self) -> Tuple[GridAxis, GridAxis]:
        m, f = self.mass_values, self.friction_values
        return (GridAxis('payload_mass', float(m[0]), float(m[-1]), len(m)),
                GridAxis('friction', float(f[0]), float(f[-1]), len(f)))

    def bin_params(self, mass_index: int, friction_index: int) -> EnvParams:
        """Bin parameters: CoM nominal, no external force."""
        return EnvParams(payload_mass=float(self.mass_values[mass_index]),
                         friction=float(self.friction_values[friction_index]))

    def bins(self) -> List[Tuple[int, int]]:
        return [(i, j) for i in range(len(self.mass_values)) for j in range(len(self.friction_values))]

    def margins(self) -> Tuple[np.ndarray, np.ndarray]:
        """Normalized ``(l, zeta)`` at the grid points."""
        l_raw, z_raw = margins_batch(self.grid.states(), self.world)
        return (normalize_margin(l_raw, self.margin_scale, self.bound),
                normalize_margin(z_raw, self.margin_scale, self.bound))

    def value_batch(self, states: np.ndarray, e_hat: np.ndarray,
                    world: Optional[WorldSpec] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Multilinear interpolation in state and in (mass, friction).

        Returns:
            ``(values, clamped)``; ``clamped`` marks queries outside the grid or bins
        """
        states = np.atleast_2d(states)
        e_hat = np.broadcast_to(np.atleast_2d(e_hat), (states.shape[0], 5))
        s_index, s_weight, s_clamped = self.grid.locate(states)
        e_index, e_weight, e_clamped = multilinear_weights(self.e_axes, e_hat[:, [0, 4]])
        flat = self.values.reshape(-1)
        index = e_index[:, :, None] * self.grid.n_cells + s_index[:, None, :]
        weight = e_weight[:, :, None] * s_weight[:, None, :]
        values = np.sum(flat[index] * weight, axis=(1, 2))
        return values, s_clamped | e_clamped


def initial_table(grid: StateGrid, world: WorldSpec, cfg: RAValueConfig,
                  ranges: RandomizationRanges = RandomizationRanges(),
                  gamma: Optional[float] = None) -> RATable:
    """Table over ``cfg`` bins initialized to ``V0 = max(l, zeta)``."""
    mass_values = np.linspace(*ranges.payload_mass, cfg.mass_bins) if cfg.mass_bins > 1 else np.array([0.0])
    friction_values = np.linspace(*ranges.friction, cfg.friction_bins) if cfg.friction_bins > 1 else np.array([1.0])
    table = RATable(grid, world, mass_values, friction_values,
                    np.zeros((len(mass_values), len(friction_values), grid.n_cells)),
                    cfg.gamma_table if gamma is None else gamma, cfg.margin_scale, cfg.bound)
    l_n, z_n = table.margins()
    table.values[:] = np.maximum(l_n, z_n)
    return table


@dataclass(eq=False)
class TabularProblem:
    """Deterministic closed loop on cells: margins, terminal flags, successor weights."""

    l: np.ndarray
    zeta: np.ndarray
    succ_index: np.ndarray
    succ_weight: np.ndarray
    terminal: np.ndarray = field(default=None)
    clamped: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.l.shape[0]
        if self.terminal is None:
            self.terminal = (self.l <= 0) | (self.zeta > 0)
        if self.clamped is None:
            self.clamped = np.zeros(n, dtype=bool)
        if self.succ_index.shape != self.succ_weight.shape or self.succ_index.shape[0] != n:
            raise ContractError("Successor index and weight arrays must match the cell count")


def bellman_sweep(values: np.ndarray, problem: TabularProblem, gamma: float) -> np.ndarray:
    """One Jacobi application of the backup; terminal cells keep ``max(l, zeta)``."""
    v_next = np.sum(values[problem.succ_index] * problem.succ_weight, axis=1)
    updated = drabe_backup(v_next, problem.l, problem.zeta, gamma)
    return np.where(problem.terminal, np.maximum(problem.l, problem.zeta), updated)


def solve_tabular(problem: TabularProblem, gamma: float, tol: float, max_sweeps: int,
                  initial: Optional[np.ndarray] = None) -> Tuple[np.ndarray, List[float]]:
    """Iterate Jacobi sweeps until the sup-norm residual drops below ``tol``.

    Raises:
        NonFiniteValueError: With the first non-finite cell index
    """
    if not 0.0 <= gamma < 1.0:
        raise ContractError(f"Value iteration needs gamma in [0, 1), got {gamma}")
    values = np.maximum(problem.l, problem.zeta) if initial is None else np.array(initial, dtype=float)
    residuals: List[float] = []
    for sweep in range(max_sweeps):
        updated = bellman_sweep(values, problem, gamma)
        bad = np.flatnonzero(~np.isfinite(updated))
        if bad.size:
            raise NonFiniteValueError(f"Non-finite value at cell {int(bad[0])} in sweep {sweep}",
                                      cell_index=int(bad[0]))
        residual = float(np.max(np.abs(updated - values))) if values.size else 0.0
        residuals.append(residual)
        values = updated
        logger.debug("Sweep %d residual %.3e", sweep, residual)
        if residual < tol:
            break
    else:
        logger.warning("Value iteration stopped at %d sweeps with residual %.3e (tol %.1e)",
                       max_sweeps, residuals[-1] if residuals else float('nan'), tol)
    return values, residuals


def build_transitions(table: RATable, policy, mass_index: int, friction_index: int,
                      dyn_cfg: DynamicsConfig = DEFAULT_DYNAMICS) -> TabularProblem:
    """One dynamics step per cell under the bin's parameters.

    ``policy.act_batch(states, e_matrix, world)`` supplies the commands; the
    policy is conditioned on the bin parameters.
    """
    states = table.grid.states()
    params = table.bin_params(mass_index, friction_index)
    actions = policy.act_batch(states, params.estimated_vector(), table.world)
    successors = step_batch(states, actions, params, cfg=dyn_cfg)
    index, weight, clamped = table.grid.locate(successors)
    l_n, z_n = table.margins()
    return TabularProblem(l_n, z_n, index, weight, clamped=clamped)


def value_iteration(table: RATable, policy, dyn_cfg: DynamicsConfig = DEFAULT_DYNAMICS,
                    tol: float = 1e-5, max_sweeps: int = 3000) -> Tuple[RATable, pd.DataFrame]:
    """Solve every parameter bin of ``table``.

    Returns:
        Converged table and a residual trace with columns ``bin, mass, friction, sweep, residual``
    """
    rows = []
    values = table.values.copy()
    for i, j in table.bins():
        problem = build_transitions(table, policy, i, j, dyn_cfg)
        try:
            values[i, j], residuals = solve_tabular(problem, table.gamma, tol, max_sweeps, initial=values[i, j])
        except NonFiniteValueError as e:
            raise NonFiniteValueError(f"bin ({i}, {j}): {e}", cell_index=e.cell_index) from e
        bin_id = i * len(table.friction_values) + j
        rows.extend({'bin': bin_id, 'mass': float(table.mass_values[i]), 'friction': float(table.friction_values[j]),
                     'sweep': k, 'residual': r} for k, r in enumerate(residuals))
        logger.info("Bin (m=%.2f, mu=%.2f) converged in %d sweeps, residual %.2e, %d clamped successors",
                    table.mass_values[i], table.friction_values[j], len(residuals),
                    residuals[-1] if residuals else 0.0, int(problem.clamped.sum()))
    solved = RATable(table.grid, table.world, table.mass_values, table.friction_values, values,
                     table.gamma, table.margin_scale, table.bound)
    return solved, pd.DataFrame(rows, columns=['bin', 'mass', 'friction', 'sweep', 'residual'])


def value_features(states: np.ndarray, e_hat: np.ndarray, world: WorldSpec, ranges: RandomizationRanges,
                   k_obstacles: int = 3, margin_scale: float = 2.0, bound: float = 1.0,
                   reach: float = 5.0, dyn: DynamicsConfig = DEFAULT_DYNAMICS) -> np.ndarray:
    """Reduced-state features for the value network.

    Goal offset in the body frame, normalized margins, heading, wall
    clearances, the ``k_obstacles`` nearest obstacles (body-frame offset,
    radius, presence flag), speed, yaw rate and the normalized estimate.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    n = states.shape[0]
    e_hat = np.broadcast_to(np.atleast_2d(e_hat), (n, 5))
    x, y, theta = states[:, 0], states[:, 1], states[:, 2]
    gx, gy = body_frame(world.goal_center[0] - x, world.goal_center[1] - y, theta)
    l_raw, z_raw = margins_batch(states, world)
    x_min, y_min, x_max, y_max = world.arena_bounds
    walls = np.stack([x - x_min, x_max - x, y - y_min, y_max - y], axis=1) / reach

    obstacles = np.tile(np.array([1.5, 0.0, 0.0, 0.0]), (n, k_obstacles, 1))
    if world.obstacles and k_obstacles:
        centers, radii = world.obstacle_centers, world.obstacle_radii
        dx = centers[None, :, 0] - x[:, None]
        dy = centers[None, :, 1] - y[:, None]
        gap = np.hypot(dx, dy) - radii[None, :]
        count = min(k_obstacles, len(radii))
        order = np.argsort(gap, axis=1, kind='stable')[:, :count]
        rows = np.arange(n)[:, None]
        bx, by = body_frame(dx[rows, order], dy[rows, order], theta[:, None])
        obstacles[:, :count, 0] = np.clip(bx / reach, -1.5, 1.5)
        obstacles[:, :count, 1] = np.clip(by / reach, -1.5, 1.5)
        obstacles[:, :count, 2] = radii[order]
        obstacles[:, :count, 3] = 1.0

    return np.concatenate([
        np.clip(np.stack([gx, gy], axis=1) / 10.0, -1.5, 1.5),
        normalize_margin(l_raw, margin_scale, bound)[:, None],
        normalize_margin(z_raw, margin_scale, bound)[:, None],
        np.stack([np.cos(theta), np.sin(theta)], axis=1),
        np.clip(walls, -1.0, 1.5),
        obstacles.reshape(n, -1),
        (states[:, 3] / dyn.v_max)[:, None],
        (states[:, 4] / dyn.omega_cmd_max)[:, None],
        ranges.normalize(e_hat),
    ], axis=1)


def value_feature_dim(k_obstacles: int) -> int:
    return 2 + 2 + 2 + 4 + 4 * k_obstacles + 2 + 5


@dataclass(frozen=True, eq=False)
class RANet:
    """Value regressor ``bound * tanh(net(features))``.

    Outputs are projected onto ``[zeta, max(l, zeta)]``, the interval every
    fixed point of the backup lies in.
    """

    weights: np.ndarray
    layer_sizes: Tuple[int, ...]
    gamma: float
    ranges: RandomizationRanges = RandomizationRanges()
    k_obstacles: int = 3
    margin_scale: float = 2.0
    bound: float = 1.0

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        if weights.shape != (FeedForward(self.layer_sizes).n_weights,):
            raise ContractError(f"RANet weight vector has shape {weights.shape}")
        if not np.all(np.isfinite(weights)):
            raise TrainingDivergedError("RANet weights are not finite")
        object.__setattr__(self, 'weights', weights)

    @property
    def net(self) -> FeedForward:
        return FeedForward(self.layer_sizes)

    def with_weights(self, weights: np.ndarray) -> 'RANet':
        return RANet(weights, self.layer_sizes, self.gamma, self.ranges, self.k_obstacles,
                     self.margin_scale, self.bound)

    def features(self, states: np.ndarray, e_hat: np.ndarray, world: WorldSpec) -> np.ndarray:
        return value_features(states, e_hat, world, self.ranges, self.k_obstacles, self.margin_scale, self.bound)

    def raw_values(self, features: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
        z = self.net.forward(self.weights if weights is None else weights, features)
        return self.bound * np.tanh(z[..., 0])

    def value_batch(self, states: np.ndarray, e_hat: np.ndarray, world: WorldSpec) -> Tuple[np.ndarray, np.ndarray]:
        features = self.features(states, e_hat, world)
        values = self.raw_values(features)
        l_n, z_n = features[:, 2], features[:, 3]
        values = np.clip(values, z_n, np.maximum(l_n, z_n))
        return values, np.zeros(values.shape[0], dtype=bool)


def init_ra_net(rng: np.random.Generator, cfg: RAValueConfig,
                ranges: RandomizationRanges = RandomizationRanges()) -> RANet:
    sizes = (value_feature_dim(cfg.k_obstacles),) + (cfg.hidden_units,) * cfg.hidden_layers + (1,)
    weights = FeedForward(sizes).init_weights(rng, scale=1.0)
    return RANet(weights, sizes, cfg.gamma_net, ranges, cfg.k_obstacles, cfg.margin_scale, cfg.bound)


def ra_value_flagged(state: State, e_hat: np.ndarray, model, world: Optional[WorldSpec] = None) -> Tuple[float, bool]:
    """Value of one state and whether the query was clamped into the table."""
    world = world if world is not None else getattr(model, 'world', None)
    values, clamped = model.value_batch(state.as_array()[None, :], np.asarray(e_hat, dtype=float), world)
    return float(values[0]), bool(clamped[0])


def ra_value(state: State, e_hat: np.ndarray, model, world: Optional[WorldSpec] = None) -> float:
    """Reach-avoid value ``V(s, e_hat)`` from a table or a network."""
    value, clamped = ra_value_flagged(state, e_hat, model, world)
    if clamped:
        logger.debug("Value query at %s clamped into the table", state)
    return value


@dataclass(eq=False)
class TransitionBatch:
    """``(s_t, s_{t+1}, e, l_t, zeta_t)`` records with features precomputed.

    Margins are normalized. ``done`` marks successors in the target or failure
    set, which bootstrap from ``max(l', zeta')``.
    """

    features: np.ndarray
    next_features: np.ndarray
    l: np.ndarray
    zeta: np.ndarray
    next_l: np.ndarray
    next_zeta: np.ndarray
    done: np.ndarray
    e: np.ndarray

    def __len__(self) -> int:
        return int(self.l.shape[0])

    @classmethod
    def concat(cls, batches: Sequence['TransitionBatch']) -> 'TransitionBatch':
        batches = [b for b in batches if len(b)]
        if not batches:
            raise ContractError("No transition records")
        return cls(*(np.concatenate([getattr(b, name) for b in batches])
                     for name in ('features', 'next_features', 'l', 'zeta', 'next_l', 'next_zeta', 'done', 'e')))

    def take(self, index: np.ndarray) -> 'TransitionBatch':
        return TransitionBatch(self.features[index], self.next_features[index], self.l[index], self.zeta[index],
                               self.next_l[index], self.next_zeta[index], self.done[index], self.e[index])


def records_from_states(net: RANet, states: np.ndarray, next_states: np.ndarray, e: np.ndarray,
                        world: WorldSpec) -> TransitionBatch:
    """Build records from aligned state/successor arrays in one world."""
    f_t = net.features(states, e, world)
    f_next = net.features(next_states, e, world)
    next_l, next_zeta = f_next[:, 2], f_next[:, 3]
    return TransitionBatch(f_t, f_next, f_t[:, 2], f_t[:, 3], next_l, next_zeta,
                           (next_l <= 0) | (next_zeta > 0), np.broadcast_to(np.atleast_2d(e), (len(states), 5)).copy())


def bootstrap_targets(records: TransitionBatch, net: RANet, frozen: np.ndarray) -> np.ndarray:
    """Backup targets with ``frozen`` weights for the successor value."""
    v_next = net.raw_values(records.next_features, frozen)
    v_next = np.clip(v_next, records.next_zeta, np.maximum(records.next_l, records.next_zeta))
    v_next = np.where(records.done, np.maximum(records.next_l, records.next_zeta), v_next)
    return drabe_backup(v_next, records.l, records.zeta, net.gamma)


def ra_loss(records: TransitionBatch, net: RANet) -> float:
    """``mean((V(s_t) - B[V](s_t))^2)`` with the current weights as bootstrap."""
    targets = bootstrap_targets(records, net, net.weights)
    return float(np.mean((net.raw_values(records.features) - targets) ** 2))


def fit_ra_network(records: TransitionBatch, net: RANet, cfg: RAValueConfig,
                   rng: np.random.Generator) -> Tuple[RANet, float, pd.DataFrame]:
    """Regress ``V(s_t, e)`` toward backup targets.

    Bootstrap targets use a frozen weight copy refreshed every
    ``cfg.target_refresh`` batches.

    Returns:
        Updated net, final full-batch loss and a per-refresh loss trace

    Raises:
        ContractError: On an empty batch
        TrainingDivergedError: If the loss becomes non-finite
    """
    if not len(records):
        raise ContractError("fit_ra_network needs a non-empty batch")
    state = AdamState.zeros(net.weights.size)
    adam = AdamConfig(learning_rate=cfg.learning_rate)
    weights = net.weights.copy()
    frozen = weights.copy()
    rows = []
    running = 0.0
    for batch in range(cfg.fit_batches):
        if batch % cfg.target_refresh == 0:
            frozen = weights.copy()
        index = rng.integers(0, len(records), size=min(cfg.batch_size, len(records)))
        sample = records.take(index)
        targets = bootstrap_targets(sample, net, frozen)
        z, activations = net.net.forward_cached(weights, sample.features)
        values = net.bound * np.tanh(z[:, 0])
        residual = values - targets
        loss = float(np.mean(residual ** 2))
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"Value loss became non-finite at batch {batch}")
        grad_out = (2.0 * residual / residual.size * net.bound * (1.0 - np.tanh(z[:, 0]) ** 2))[:, None]
        weights = adam_step(weights, net.net.backward(weights, activations, grad_out), state, adam)
        running += loss
        if (batch + 1) % cfg.target_refresh == 0 or batch + 1 == cfg.fit_batches:
            count = (batch % cfg.target_refresh) + 1
            rows.append({'batch': batch + 1, 'loss': running / count})
            logger.info("Value fit batch %d/%d: loss %.6f", batch + 1, cfg.fit_batches, running / count)
            running = 0.0
    fitted = net.with_weights(weights)
    final = ra_loss(records, fitted)
    return fitted, final, pd.DataFrame(rows, columns=['batch', 'loss'])


def table_records(table: RATable, policy, net: RANet, dyn_cfg: DynamicsConfig = DEFAULT_DYNAMICS) -> TransitionBatch:
    """Grid-point transitions of the table's closed loop, for fitting a net against the table."""
    states = table.grid.states()
    batches = []
    for i, j in table.bins():
        params = table.bin_params(i, j)
        e = params.estimated_vector()
        actions = policy.act_batch(states, e, table.world)
        successors = step_batch(states, actions, params, cfg=dyn_cfg)
        batches.append(records_from_states(net, states, successors, e, table.world))
    return TransitionBatch.concat(batches)


def net_table_gap(table: RATable, net: RANet, exclude_terminal: bool = True) -> float:
    """Sup-norm gap between net and table values on grid points and bins."""
    states = table.grid.states()
    l_n, z_n = table.margins()
    keep = ~((l_n <= 0) | (z_n > 0)) if exclude_terminal else np.ones(len(states), dtype=bool)
    gap = 0.0
    for i, j in table.bins():
        e = table.bin_params(i, j).estimated_vector()
        values, _ = net.value_batch(states[keep], e, table.world)
        gap = max(gap, float(np.max(np.abs(values - table.values[i, j][keep]))) if keep.any() else 0.0)
    return gap


@dataclass(frozen=True, eq=False)
class RecordJob:
    policy: object
    estimator: Optional[EstimatorParams]
    net: RANet
    ctx: object
    labels: Tuple
    condition_on_truth: bool


def _run_record_job(job: RecordJob) -> TransitionBatch:
    """One agile-only episode under estimate conditioning, recorded as transitions."""
    ctx = job.ctx
    rng = stream(ctx.seed, *job.labels)
    world = sample_world(rng, ctx.layout)
    e_true = sample_params(rng, ctx.ranges)
    state = ctx.start_state(rng, (0.3, 0.3))
    window = HistoryWindow(ctx.estimator.window_length)
    truth = e_true.estimated_vector()
    prev, a_prev = None, Action.zero()
    states, successors, conditions = [], [], []
    for _ in range(ctx.dynamics.horizon_steps):
        obs = observe(state, a_prev, rng, world, ctx.goal, prev_state=prev, params=e_true,
                      sensor=ctx.sensor, cfg=ctx.dynamics)
        e_hat = estimate(window, job.estimator, ctx.ranges) if job.estimator is not None else truth
        action = job.policy.act(obs, e_hat)
        window.push(obs.proprio, action.as_array())
        nxt = step(state, action, e_true, cfg=ctx.dynamics)
        states.append(state.as_array())
        successors.append(nxt.as_array())
        conditions.append(truth if job.condition_on_truth else e_hat)
        prev, state, a_prev = state, nxt, action
        l_raw, z_raw = margins_batch(nxt.as_array()[None, :], world)
        if l_raw[0] <= 0 or z_raw[0] > 0:
            break
    e = np.array(conditions)
    f_t = job.net.features(np.array(states), e, world)
    f_next = job.net.features(np.array(successors), e, world)
    return TransitionBatch(f_t, f_next, f_t[:, 2], f_t[:, 3], f_next[:, 2], f_next[:, 3],
                           (f_next[:, 2] <= 0) | (f_next[:, 3] > 0), e)


def collect_transitions(policy, estimator: Optional[EstimatorParams], net: RANet, ctx, episodes: int,
                        label: str = 'records', condition_on_truth: bool = False,
                        workers: int = 1) -> TransitionBatch:
    """Agile-policy rollouts on randomized worlds recorded as value-fit transitions.

    Args:
        policy: Object with ``act(obs, e_cond)``, usually an AgilePolicy
        estimator: Estimator used for conditioning (and for ``e`` unless ``condition_on_truth``)
        net: Network whose feature layout the records use
        ctx: RolloutContext
        episodes: Episode count
        label: Stream label
        condition_on_truth: Record true parameters instead of estimates
        workers: Process count
    """
    jobs = [RecordJob(policy, estimator, net, ctx, (label, k), condition_on_truth) for k in range(episodes)]
    return TransitionBatch.concat(parallel_map(_run_record_job, jobs, workers))
