"""Numerical checks of the value-function Lipschitz bound, heatmaps and metrics.

Lipschitz quantities are measured in normalized units: state components are
divided by the width of their sampling box and parameter components by the
width of their randomization interval.

The parameter-Lipschitz bound of the discounted value is

    L_V <= max(L_l, L_zeta) * sup_t gamma^t ((1 + L_f)^t - 1)

which is finite iff ``gamma * (1 + L_f) < 1``; the supremum over real ``t``
sits at ``t* = log(log gamma / log(gamma (1 + L_f))) / log(1 + L_f)``.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from mod.dynamics import DEFAULT_DYNAMICS, DynamicsConfig, EnvParams, RandomizationRanges, State, step_batch, wrap_angle
from mod.errors import ContractError, LipschitzConditionError
from mod.estimator import SampleSet, evaluate_loss
from mod.safeguard import OUTCOMES, EpisodeOutcome
from mod.world import Obstacle, WorldSpec, margins_batch

logger = logging.getLogger(__name__)

PAIR_SEPARATION = 0.05
VALUE_SEPARATIONS = (0.01, 0.05, 0.1)
HEATMAP_MASSES = (0.0, 4.0, 8.0, 12.0)
METRIC_COLUMNS = ('collision', 'reach', 'timeout', 'v_peak')

Transition = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LipschitzEstimate:
    value: float
    pairs: int
    skipped: int


def closed_loop_transition(policy, world: WorldSpec, dyn_cfg: DynamicsConfig = DEFAULT_DYNAMICS) -> Transition:
    """``f_pi(s, e)``: one noise-free step under the policy conditioned on ``e``.

    ``e`` holds the estimated subset; the external force is zero.
    """
    def transition(states: np.ndarray, e_matrix: np.ndarray) -> np.ndarray:
        actions = policy.act_batch(states, e_matrix, world)
        params = np.hstack([e_matrix, np.zeros((e_matrix.shape[0], 2))])
        return step_batch(states, actions, params, cfg=dyn_cfg)
    return transition


def estimate_dynamics_lipschitz(transition: Transition, state_low: Sequence[float], state_high: Sequence[float],
                                ranges: RandomizationRanges, budget: int, rng: np.random.Generator,
                                separation: float = PAIR_SEPARATION,
                                periodic_dims: Tuple[int, ...] = (2,)) -> LipschitzEstimate:
    """Supremum of ``|f(s1, e1) - f(s2, e2)| / (|s1 - s2| + |e1 - e2|)`` over sampled pairs.

    Pairs are drawn from a single uniform block, so a larger budget with the
    same stream extends the pair set and never lowers the estimate. Pair ``k``
    perturbs the state only, the parameters only, or both, cycling in that
    order; its separation is at most ``separation`` in normalized units.

    Args:
        transition: ``f(states, e_matrix) -> next_states``
        state_low: Lower corner of the state sampling box
        state_high: Upper corner of the state sampling box
        ranges: Parameter ranges (sampling box and normalization)
        budget: Number of pairs
        rng: Stream for the pair draws
        separation: Largest pair separation in normalized units
        periodic_dims: State components compared modulo 2 pi

    Returns:
        LipschitzEstimate with the supremum, the pair count and skipped pairs
    """
    if budget < 1:
        raise ContractError(f"Sample budget must be positive, got {budget}")
    s_lo, s_hi = np.asarray(state_low, dtype=float), np.asarray(state_high, dtype=float)
    s_scale = np.where(s_hi > s_lo, s_hi - s_lo, 1.0)
    e_lo, e_hi = ranges.bounds()
    e_scale = ranges.widths()
    ds, de = s_lo.size, e_lo.size

    block = rng.random((budget, 2 * (ds + de) + 1))
    s1 = s_lo + block[:, :ds] * (s_hi - s_lo)
    e1 = e_lo + block[:, ds:ds + de] * (e_hi - e_lo)
    direction = 2.0 * block[:, ds + de:2 * (ds + de)] - 1.0
    mode = np.arange(budget) % 3
    direction[mode == 1, :ds] = 0.0
    direction[mode == 0, ds:] = 0.0
    norms = np.linalg.norm(direction, axis=1)
    radius = separation * block[:, -1]
    ok = (norms > 1e-12) & (radius > 1e-12)
    unit = np.where(ok[:, None], direction / np.where(norms > 0, norms, 1.0)[:, None], 0.0)
    step_n = unit * radius[:, None]
    s2 = s1 + step_n[:, :ds] * s_scale
    e2 = e1 + step_n[:, ds:] * e_scale

    def normalized_gap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        diff = a - b
        for dim in periodic_dims:
            diff[:, dim] = wrap_angle(diff[:, dim])
        return np.linalg.norm(diff / s_scale, axis=1)

    f1 = transition(s1, e1)
    f2 = transition(s2, e2)
    numerator = normalized_gap(f1, f2)
    denominator = normalized_gap(s1, s2) + np.linalg.norm((e1 - e2) / e_scale, axis=1)
    ok &= denominator > 1e-12
    skipped = int(np.count_nonzero(~ok))
    ratios = numerator[ok] / denominator[ok]
    value = float(np.max(ratios)) if ratios.size else 0.0
    logger.info("Dynamics Lipschitz estimate %.4f from %d pairs (%d skipped)", value, int(ok.sum()), skipped)
    return LipschitzEstimate(value, int(ok.sum()), skipped)


def estimate_margin_lipschitz(world: WorldSpec, rng: np.random.Generator, pairs: int = 10_000,
                              separation: float = 0.5) -> Tuple[float, float]:
    """Largest observed ``|dl| / |dp|`` and ``|dzeta| / |dp|`` over random position pairs (meters)."""
    x_min, y_min, x_max, y_max = world.arena_bounds
    margin = 1.0
    p1 = rng.uniform([x_min - margin, y_min - margin], [x_max + margin, y_max + margin], size=(pairs, 2))
    p2 = p1 + rng.uniform(-separation, separation, size=(pairs, 2))
    s1 = np.hstack([p1, np.zeros((pairs, 3))])
    s2 = np.hstack([p2, np.zeros((pairs, 3))])
    l1, z1 = margins_batch(s1, world)
    l2, z2 = margins_batch(s2, world)
    dist = np.linalg.norm(p1 - p2, axis=1)
    keep = dist > 1e-12
    return (float(np.max(np.abs(l1 - l2)[keep] / dist[keep])),
            float(np.max(np.abs(z1 - z2)[keep] / dist[keep])))


@dataclass(frozen=True)
class LipschitzBound:
    t_star: float
    ub: float
    ub_literal: float
    lv_disc: float
    t_disc: int


def lipschitz_bound(gamma: float, L_f_pi: float, L_l: float = 1.0, L_zeta: float = 1.0,
                    horizon: int = 1000) -> LipschitzBound:
    """Parameter-Lipschitz bound of the discounted reach-avoid value.

    ``ub`` is the continuous maximum ``M * (gamma(1+L))^t* - gamma^t*)`` with
    ``M = max(L_l, L_zeta)``; it dominates the discrete maximum ``lv_disc``
    over ``t = 0..horizon``. ``ub_literal`` is
    ``M * L * gamma^t* * log(1+L) / -log(gamma(1+L))``.

    Raises:
        ContractError: If gamma is outside (0, 1) or a constant is negative
        LipschitzConditionError: If ``gamma * (1 + L_f_pi) >= 1``
    """
    if not 0.0 < gamma < 1.0:
        raise ContractError(f"gamma must lie in (0, 1), got {gamma}")
    if min(L_f_pi, L_l, L_zeta) < 0:
        raise ContractError("Lipschitz constants must be non-negative")
    a = gamma * (1.0 + L_f_pi)
    if a >= 1.0:
        raise LipschitzConditionError(
            f"gamma * (1 + L_f_pi) = {a:.6f} >= 1; the value is not guaranteed Lipschitz in e")
    scale = max(L_l, L_zeta)
    t = np.arange(horizon + 1, dtype=float)
    curve = a ** t - gamma ** t
    t_disc = int(np.argmax(curve))
    lv_disc = scale * float(curve[t_disc])
    if L_f_pi == 0.0:
        return LipschitzBound(0.0, 0.0, 0.0, lv_disc, t_disc)
    t_star = math.log(math.log(gamma) / math.log(a)) / math.log1p(L_f_pi)
    ub = scale * (a ** t_star - gamma ** t_star)
    ub_literal = scale * L_f_pi * gamma ** t_star * math.log1p(L_f_pi) / -math.log(a)
    return LipschitzBound(t_star, ub, ub_literal, lv_disc, t_disc)


def make_e_pairs(rng: np.random.Generator, ranges: RandomizationRanges, count: int,
                 separations: Sequence[float] = VALUE_SEPARATIONS,
                 base: Optional[np.ndarray] = None) -> np.ndarray:
    """``(count * len(separations), 2, 5)`` parameter pairs at the given normalized separations.

    Partners are clamped into the ranges, so some pairs end up closer.
    """
    lo, hi = ranges.bounds()
    widths = ranges.widths()
    pairs = []
    for sep in separations:
        e1 = rng.uniform(lo, hi, size=(count, lo.size)) if base is None else np.broadcast_to(base, (count, lo.size))
        direction = rng.standard_normal((count, lo.size))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        e2 = np.clip(e1 + sep * direction * widths, lo, hi)
        pairs.append(np.stack([e1, e2], axis=1))
    return np.concatenate(pairs, axis=0)


def empirical_value_lipschitz(model, probe_states: np.ndarray, e_pairs: np.ndarray,
                              ranges: RandomizationRanges, world: Optional[WorldSpec] = None) -> float:
    """Largest ``|V(s, e1) - V(s, e2)| / |e1 - e2|`` over probes and parameter pairs (normalized)."""
    probe_states = np.atleast_2d(probe_states)
    e_pairs = np.asarray(e_pairs, dtype=float)
    world = world if world is not None else getattr(model, 'world', None)
    widths = ranges.widths()
    n = probe_states.shape[0]
    best = 0.0
    for e1, e2 in e_pairs:
        distance = float(np.linalg.norm((e1 - e2) / widths))
        if distance <= 1e-12:
            continue
        v1, _ = model.value_batch(probe_states, np.tile(e1, (n, 1)), world)
        v2, _ = model.value_batch(probe_states, np.tile(e2, (n, 1)), world)
        best = max(best, float(np.max(np.abs(v1 - v2))) / distance)
    return best


@dataclass
class LipschitzReport:
    L_l: float
    L_zeta: float
    L_f_pi: float
    gamma: float
    condition_ok: bool
    t_star: Optional[float]
    ub_LV: Optional[float]
    ub_literal: Optional[float]
    LV_disc: Optional[float]
    empirical_LV: float
    slack: float = 1.25
    bound_holds: Optional[bool] = None
    pairs: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)


def lipschitz_report(L_l: float, L_zeta: float, L_f_pi: float, gamma: float, empirical_LV: float,
                     slack: float = 1.25, pairs: int = 0) -> LipschitzReport:
    """Assemble the report; the bound is only checked when the condition holds."""
    try:
        bound = lipschitz_bound(gamma, L_f_pi, L_l, L_zeta)
    except LipschitzConditionError as e:
        logger.warning("%s", e)
        return LipschitzReport(L_l, L_zeta, L_f_pi, gamma, False, None, None, None, None,
                               empirical_LV, slack, None, pairs)
    holds = empirical_LV <= slack * bound.lv_disc
    return LipschitzReport(L_l, L_zeta, L_f_pi, gamma, True, bound.t_star, bound.ub, bound.ub_literal,
                           bound.lv_disc, empirical_LV, slack, holds, pairs)


@dataclass
class Heatmap:
    """Value rasters over obstacle offsets (robot frame), one per payload mass.

    Rasters are indexed ``[iy, ix]`` with ``ys`` and ``xs`` ascending.
    """

    xs: np.ndarray
    ys: np.ndarray
    masses: Tuple[float, ...]
    rasters: Dict[float, np.ndarray]
    clamped: np.ndarray = field(default=None)

    def forward_means(self) -> Dict[float, float]:
        """Mean value over offsets ahead of the robot."""
        forward = self.xs > 0
        return {m: float(np.mean(self.rasters[m][:, forward])) for m in self.masses}

    def mass_monotone(self, tol: float = 1e-9) -> bool:
        means = [self.forward_means()[m] for m in sorted(self.masses)]
        return all(b >= a - tol for a, b in zip(means, means[1:]))

    def to_frame(self) -> pd.DataFrame:
        gx, gy = np.meshgrid(self.xs, self.ys)
        frame = pd.DataFrame({'offset_x': gx.ravel(), 'offset_y': gy.ravel()})
        for m in self.masses:
            frame[f'mass_{m:g}'] = self.rasters[m].ravel()
        return frame


def heatmap(model, probe_state: State, xs: np.ndarray, ys: np.ndarray,
            masses: Sequence[float] = HEATMAP_MASSES, world: Optional[WorldSpec] = None,
            obstacle_radius: float = 0.4, friction: float = 1.0) -> Heatmap:
    """Value with a single obstacle at each offset from the robot.

    For models tied to one world (tables), the first obstacle of that world
    stays put and the robot moves to ``center - R(theta) offset`` instead;
    ``world`` is ignored. Otherwise each offset gets a one-obstacle copy of
    ``world``.
    """
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    gx, gy = np.meshgrid(xs, ys)
    ox, oy = gx.ravel(), gy.ravel()
    c, s = math.cos(probe_state.theta), math.sin(probe_state.theta)
    wx, wy = c * ox - s * oy, s * ox + c * oy
    base = probe_state.as_array()
    table_world = getattr(model, 'world', None)
    rasters = {}
    clamped = np.zeros(gx.shape, dtype=bool)

    if table_world is not None:
        if not table_world.obstacles:
            raise ContractError("Table heatmaps need a world with at least one obstacle")
        center = table_world.obstacles[0].center
        states = np.tile(base, (ox.size, 1))
        states[:, 0] = center[0] - wx
        states[:, 1] = center[1] - wy
        for m in masses:
            e = EnvParams(payload_mass=m, friction=friction).estimated_vector()
            values, flags = model.value_batch(states, e, table_world)
            rasters[m] = values.reshape(gx.shape)
            clamped |= flags.reshape(gx.shape)
    else:
        if world is None:
            raise ContractError("Network heatmaps need a world")
        for m in masses:
            e = EnvParams(payload_mass=m, friction=friction).estimated_vector()
            values = np.empty(ox.size)
            for k in range(ox.size):
                obstacle = Obstacle((probe_state.x + wx[k], probe_state.y + wy[k]), obstacle_radius)
                v, _ = model.value_batch(base[None, :], e, world.with_obstacles([obstacle]))
                values[k] = v[0]
            rasters[m] = values.reshape(gx.shape)
    return Heatmap(xs, ys, tuple(masses), rasters, clamped)


def aggregate_metrics(outcomes: Iterable[EpisodeOutcome]) -> Dict[str, float]:
    """Outcome percentages and mean peak speed over reach episodes.

    Raises:
        ContractError: On an empty batch
    """
    outcomes = list(outcomes)
    if not outcomes:
        raise ContractError("aggregate_metrics needs at least one episode")
    n = len(outcomes)
    counts = {name: sum(o.classification == name for o in outcomes) for name in OUTCOMES}
    peaks = [o.v_peak for o in outcomes if o.classification == 'reach']
    result = {name: 100.0 * counts[name] / n for name in OUTCOMES}
    result['v_peak'] = float(np.mean(peaks)) if peaks else float('nan')
    result['episodes'] = n
    return result


def metrics_frame(rows: Dict[str, Dict[str, float]]) -> pd.DataFrame:
    """One row per label, columns in the collision/reach/timeout/v_peak order."""
    frame = pd.DataFrame([{'label': label, **metrics} for label, metrics in rows.items()])
    return frame[['label', *METRIC_COLUMNS, 'episodes']]


@dataclass(frozen=True)
class SignTest:
    wins: int
    losses: int
    ties: int
    p_value: float


def paired_sign_test(before: Sequence[float], after: Sequence[float]) -> SignTest:
    """One-sided sign test that ``after`` is smaller than ``before``; ties are dropped."""
    before, after = np.asarray(before, dtype=float), np.asarray(after, dtype=float)
    if before.shape != after.shape:
        raise ContractError("Paired samples must have the same length")
    wins = int(np.sum(after < before))
    losses = int(np.sum(after > before))
    ties = int(before.size - wins - losses)
    if wins + losses == 0:
        return SignTest(wins, losses, ties, 1.0)
    p_value = float(stats.binomtest(wins, wins + losses, 0.5, alternative='greater').pvalue)
    return SignTest(wins, losses, ties, p_value)


@dataclass(frozen=True)
class AdaptationResult:
    moved_toward: bool
    slope: float
    p_value: float
    error_start: float
    error_end: float


def shift_adaptation(estimates: Sequence[float], truth_after: float, shift_step: int,
                     window: int = 50) -> AdaptationResult:
    """Trend of the estimation error over the ``window`` steps after a parameter change.

    The estimate moves toward the new truth when the fitted slope of
    ``|estimate - truth_after|`` is negative and the error at the end of the
    window is below the error at the change.
    """
    estimates = np.asarray(estimates, dtype=float)
    segment = estimates[shift_step:shift_step + window]
    segment = segment[np.isfinite(segment)]
    if segment.size < 3:
        return AdaptationResult(False, float('nan'), float('nan'), float('nan'), float('nan'))
    error = np.abs(segment - truth_after)
    if np.ptp(error) == 0:
        return AdaptationResult(False, 0.0, 1.0, float(error[0]), float(error[-1]))
    fit = stats.linregress(np.arange(segment.size, dtype=float), error)
    moved = bool(fit.slope < 0 and error[-1] < error[0])
    return AdaptationResult(moved, float(fit.slope), float(fit.pvalue), float(error[0]), float(error[-1]))


def contraction_ratios(residuals: pd.DataFrame) -> pd.DataFrame:
    """Per-bin largest ratio of consecutive value-iteration residuals."""
    rows = []
    for bin_id, group in residuals.groupby('bin', sort=True):
        r = group.sort_values('sweep')['residual'].to_numpy()
        prev, nxt = r[:-1], r[1:]
        ratio = nxt[prev > 0] / prev[prev > 0]
        rows.append({'bin': int(bin_id), 'sweeps': int(r.size),
                     'final_residual': float(r[-1]) if r.size else float('nan'),
                     'max_ratio': float(ratio.max()) if ratio.size else 0.0})
    return pd.DataFrame(rows, columns=['bin', 'sweeps', 'final_residual', 'max_ratio'])


def membership_agreement(values: np.ndarray, reach_avoid: np.ndarray, boundary: Optional[np.ndarray] = None) -> Dict[str, float]:
    """Agreement of ``V <= 0`` with oracle reach-avoid membership.

    Returns the agreement fraction outside ``boundary`` and the number of
    cells with ``V < 0`` outside the reach-avoid set.
    """
    values = np.asarray(values, dtype=float).ravel()
    reach_avoid = np.asarray(reach_avoid, dtype=bool).ravel()
    keep = np.ones_like(reach_avoid) if boundary is None else ~np.asarray(boundary, dtype=bool).ravel()
    agree = (values <= 0) == reach_avoid
    return {
        'agreement': float(np.mean(agree[keep])) if keep.any() else 1.0,
        'negative_outside_ra': int(np.sum((values < 0) & ~reach_avoid)),
        'cells': int(keep.sum()),
    }


def boundary_band(mask: np.ndarray) -> np.ndarray:
    """Cells of a boolean raster with a 4-neighbor of the other label."""
    mask = np.asarray(mask, dtype=bool)
    band = np.zeros_like(mask)
    for axis in range(mask.ndim):
        diff = np.diff(mask.astype(np.int8), axis=axis) != 0
        lead = [slice(None)] * mask.ndim
        trail = [slice(None)] * mask.ndim
        lead[axis] = slice(1, None)
        trail[axis] = slice(None, -1)
        band[tuple(lead)] |= diff
        band[tuple(trail)] |= diff
    return band


def episode_losses(sample_sets: List[SampleSet], params, ranges: RandomizationRanges) -> np.ndarray:
    """Per-episode estimation loss; episodes without samples give NaN."""
    return np.array([evaluate_loss(s, params, ranges) if len(s) else float('nan') for s in sample_sets])
