"""Arena geometry, target and failure margins, and ray sensing.

The target set is the goal disc and the failure set is the union of the disc
obstacles and everything outside the arena rectangle. Both are encoded by
signed distances in meters:

    l(s)    = |p - goal_center| - goal_radius          (l <= 0  <=> target)
    zeta(s) = max(max_i r_i - |p - c_i|, arena depth)  (zeta > 0 <=> failure)

Each term is 1-Lipschitz in position and so is every max of them.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np
import yaml

from mod.errors import ConfigError, ContractError, InvalidStateError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Obstacle:
    """Static disc obstacle."""

    center: Tuple[float, float]
    radius: float


@dataclass(frozen=True)
class WorldSpec:
    """Arena, goal and obstacles. All lengths in meters.

    ``arena_bounds`` is ``(x_min, y_min, x_max, y_max)``.
    """

    arena_bounds: Tuple[float, float, float, float]
    goal_center: Tuple[float, float]
    goal_radius: float
    obstacles: Tuple[Obstacle, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'arena_bounds', tuple(float(v) for v in self.arena_bounds))
        object.__setattr__(self, 'goal_center', tuple(float(v) for v in self.goal_center))
        object.__setattr__(self, 'goal_radius', float(self.goal_radius))
        object.__setattr__(self, 'obstacles', tuple(
            Obstacle(center=tuple(float(v) for v in o.center), radius=float(o.radius))
            for o in self.obstacles
        ))
        self._validate()

    def _validate(self) -> None:
        if len(self.arena_bounds) != 4 or len(self.goal_center) != 2:
            raise ConfigError("arena_bounds needs 4 values and goal_center 2")
        x_min, y_min, x_max, y_max = self.arena_bounds
        if not (x_min < x_max and y_min < y_max):
            raise ConfigError(f"Degenerate arena bounds: {self.arena_bounds}")
        if not self.goal_radius > 0:
            raise ConfigError(f"goal_radius must be positive, got {self.goal_radius}")
        gx, gy = self.goal_center
        if not (x_min <= gx <= x_max and y_min <= gy <= y_max):
            raise ConfigError(f"Goal center {self.goal_center} lies outside the arena")
        for index, obstacle in enumerate(self.obstacles):
            if len(obstacle.center) != 2:
                raise ConfigError(f"Obstacle {index} center needs 2 values")
            if not obstacle.radius > 0:
                raise ConfigError(f"Obstacle {index} radius must be positive")
            gap = math.hypot(gx - obstacle.center[0], gy - obstacle.center[1])
            if gap <= self.goal_radius + obstacle.radius:
                raise ConfigError(f"Obstacle {index} intersects the goal region")

    @property
    def obstacle_centers(self) -> np.ndarray:
        """Obstacle centers as a ``(k, 2)`` array."""
        if not self.obstacles:
            return np.zeros((0, 2))
        return np.array([o.center for o in self.obstacles], dtype=float)

    @property
    def obstacle_radii(self) -> np.ndarray:
        """Obstacle radii as a ``(k,)`` array."""
        return np.array([o.radius for o in self.obstacles], dtype=float)

    def with_obstacles(self, obstacles: Sequence[Obstacle]) -> 'WorldSpec':
        """Return a copy of this world with a different obstacle list."""
        return WorldSpec(self.arena_bounds, self.goal_center, self.goal_radius, tuple(obstacles))

    def to_dict(self) -> Dict[str, Any]:
        """Convert to the YAML/JSON schema."""
        return {
            'arena_bounds': list(self.arena_bounds),
            'goal_center': list(self.goal_center),
            'goal_radius': self.goal_radius,
            'obstacles': [
                {'center': list(o.center), 'radius': o.radius} for o in self.obstacles
            ],
        }


@dataclass(frozen=True)
class Margins:
    """Target margin ``l`` and failure margin ``zeta`` of one state (meters)."""

    l_value: float
    zeta_value: float

    @property
    def in_target(self) -> bool:
        return self.l_value <= 0.0

    @property
    def in_failure(self) -> bool:
        return self.zeta_value > 0.0


@dataclass(frozen=True)
class WorldLayout:
    """Fixed arena/goal/start plus the obstacle randomization used in training."""

    arena_bounds: Tuple[float, float, float, float] = (-1.0, -3.0, 11.0, 3.0)
    goal_center: Tuple[float, float] = (10.0, 0.0)
    goal_radius: float = 0.5
    start_pose: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    n_obstacles: Tuple[int, int] = (0, 6)
    obstacle_radius: Tuple[float, float] = (0.25, 0.6)
    placement_x: Tuple[float, float] = (1.5, 8.5)
    placement_y: Tuple[float, float] = (-2.5, 2.5)
    start_clearance: float = 1.0
    goal_clearance: float = 0.3
    max_attempts: int = 200


def world_from_dict(data: Dict[str, Any]) -> WorldSpec:
    """Build a WorldSpec from its dictionary schema.

    Args:
        data: Mapping with ``arena_bounds``, ``goal_center``, ``goal_radius``
            and an optional ``obstacles`` list of ``{center, radius}``

    Returns:
        Validated WorldSpec

    Raises:
        ConfigError: If keys are missing or the geometry is invalid
    """
    if 'world' in data and isinstance(data['world'], dict):
        data = data['world']
    missing = {'arena_bounds', 'goal_center', 'goal_radius'} - set(data)
    if missing:
        raise ConfigError(f"World spec is missing keys: {sorted(missing)}")
    unknown = set(data) - {'arena_bounds', 'goal_center', 'goal_radius', 'obstacles'}
    if unknown:
        raise ConfigError(f"Unknown world keys: {sorted(unknown)}")
    try:
        obstacles = tuple(
            Obstacle(center=tuple(item['center']), radius=float(item['radius']))
            for item in (data.get('obstacles') or [])
        )
        return WorldSpec(
            arena_bounds=tuple(data['arena_bounds']),
            goal_center=tuple(data['goal_center']),
            goal_radius=float(data['goal_radius']),
            obstacles=obstacles,
        )
    except (KeyError, TypeError) as e:
        raise ConfigError(f"Malformed world spec: {e}") from e


def load_world(path: Union[str, Path]) -> WorldSpec:
    """Load a world spec from a YAML file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"World file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        data = yaml.safe_load(f) or {}
    return world_from_dict(data)


def sample_world(rng: np.random.Generator, layout: WorldLayout) -> WorldSpec:
    """Draw a randomized obstacle field on a fixed arena.

    Obstacles are rejection-sampled so none touches the goal disc (plus
    ``goal_clearance``) or the start position (plus ``start_clearance``).

    Args:
        rng: Episode random stream
        layout: Arena/goal/start and randomization ranges

    Returns:
        WorldSpec for one episode
    """
    lo, hi = layout.n_obstacles
    count = int(rng.integers(lo, hi + 1)) if hi > lo else int(lo)
    gx, gy = layout.goal_center
    sx, sy = layout.start_pose[0], layout.start_pose[1]
    obstacles = []
    for _ in range(count):
        for _attempt in range(layout.max_attempts):
            cx = rng.uniform(*layout.placement_x)
            cy = rng.uniform(*layout.placement_y)
            radius = rng.uniform(*layout.obstacle_radius)
            if math.hypot(cx - gx, cy - gy) <= layout.goal_radius + radius + layout.goal_clearance:
                continue
            if math.hypot(cx - sx, cy - sy) <= radius + layout.start_clearance:
                continue
            obstacles.append(Obstacle(center=(cx, cy), radius=radius))
            break
        else:
            logger.warning("Could not place obstacle after %d attempts", layout.max_attempts)
    return WorldSpec(layout.arena_bounds, layout.goal_center, layout.goal_radius, tuple(obstacles))


def empty_world(layout: WorldLayout) -> WorldSpec:
    """World with the layout's arena and goal and no obstacles."""
    return WorldSpec(layout.arena_bounds, layout.goal_center, layout.goal_radius, ())


def _position(state) -> Tuple[float, float]:
    x, y = float(state.x), float(state.y)
    if not (math.isfinite(x) and math.isfinite(y)):
        raise InvalidStateError(f"Non-finite position ({x}, {y})")
    return x, y


def target_margin_xy(xs: np.ndarray, ys: np.ndarray, world: WorldSpec) -> np.ndarray:
    """Vectorized target margin over position arrays."""
    gx, gy = world.goal_center
    return np.hypot(np.asarray(xs, dtype=float) - gx, np.asarray(ys, dtype=float) - gy) - world.goal_radius


def failure_margin_xy(xs: np.ndarray, ys: np.ndarray, world: WorldSpec) -> np.ndarray:
    """Vectorized failure margin over position arrays."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    x_min, y_min, x_max, y_max = world.arena_bounds
    margin = np.maximum(np.maximum(x_min - xs, xs - x_max), np.maximum(y_min - ys, ys - y_max))
    if world.obstacles:
        centers = world.obstacle_centers
        gaps = np.hypot(xs[..., None] - centers[:, 0], ys[..., None] - centers[:, 1])
        margin = np.maximum(margin, np.max(world.obstacle_radii - gaps, axis=-1))
    return margin


def target_margin(state, world: WorldSpec) -> float:
    """Signed distance from the goal disc boundary (negative inside).

    Raises:
        InvalidStateError: If the position is not finite
    """
    x, y = _position(state)
    gx, gy = world.goal_center
    return math.hypot(x - gx, y - gy) - world.goal_radius


def failure_margin(state, world: WorldSpec) -> float:
    """Penetration depth into the failure set (negative clearance outside it).

    Raises:
        InvalidStateError: If the position is not finite
    """
    x, y = _position(state)
    return float(failure_margin_xy(np.array(x), np.array(y), world))


def margins(state, world: WorldSpec) -> Margins:
    """Both margins of a state."""
    return Margins(l_value=target_margin(state, world), zeta_value=failure_margin(state, world))


def margins_batch(states: np.ndarray, world: WorldSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Margins of an ``(n, >=2)`` state matrix; returns ``(l, zeta)`` arrays."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if not np.all(np.isfinite(states[:, :2])):
        raise InvalidStateError("Non-finite position in batch")
    return (target_margin_xy(states[:, 0], states[:, 1], world),
            failure_margin_xy(states[:, 0], states[:, 1], world))


def ray_distances_batch(xs: np.ndarray, ys: np.ndarray, thetas: np.ndarray,
                        world: WorldSpec, n_rays: int, max_range: float) -> np.ndarray:
    """Ray distances for a batch of poses.

    Ray ``k`` points at heading ``theta + 2*pi*k/n_rays`` (ray 0 is straight
    ahead). Each distance is the first intersection with an obstacle or the
    arena boundary, clipped to ``max_range``; poses inside the failure set
    read zero.

    Returns:
        Array of shape ``(n, n_rays)``
    """
    if n_rays < 1:
        raise ContractError(f"n_rays must be >= 1, got {n_rays}")
    if not max_range > 0:
        raise ContractError(f"max_range must be positive, got {max_range}")
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys)) and np.all(np.isfinite(thetas))):
        raise InvalidStateError("Non-finite pose passed to ray sensing")

    angles = thetas[:, None] + 2.0 * np.pi * np.arange(n_rays)[None, :] / n_rays
    dx, dy = np.cos(angles), np.sin(angles)
    px, py = xs[:, None], ys[:, None]
    x_min, y_min, x_max, y_max = world.arena_bounds

    with np.errstate(divide='ignore', invalid='ignore'):
        tx = np.where(dx > 0, (x_max - px) / dx, np.where(dx < 0, (x_min - px) / dx, np.inf))
        ty = np.where(dy > 0, (y_max - py) / dy, np.where(dy < 0, (y_min - py) / dy, np.inf))
    inside = (xs >= x_min) & (xs <= x_max) & (ys >= y_min) & (ys <= y_max)
    dist = np.where(inside[:, None], np.minimum(tx, ty), 0.0)

    if world.obstacles:
        centers = world.obstacle_centers
        rel_x = px[..., None] - centers[:, 0]
        rel_y = py[..., None] - centers[:, 1]
        b = dx[..., None] * rel_x + dy[..., None] * rel_y
        c = rel_x ** 2 + rel_y ** 2 - world.obstacle_radii ** 2
        disc = b * b - c
        t_near = -b - np.sqrt(np.maximum(disc, 0.0))
        hit = (disc >= 0.0) & (t_near >= 0.0)
        t_obstacle = np.where(c <= 0.0, 0.0, np.where(hit, t_near, np.inf))
        dist = np.minimum(dist, t_obstacle.min(axis=-1))

    return np.clip(dist, 0.0, max_range)


def ray_distances(state, world: WorldSpec, n_rays: int, max_range: float) -> np.ndarray:
    """Ray distances in the robot frame for a single state."""
    x, y = _position(state)
    theta = float(state.theta)
    if not math.isfinite(theta):
        raise InvalidStateError(f"Non-finite heading {theta}")
    return ray_distances_batch(np.array([x]), np.array([y]), np.array([theta]),
                               world, n_rays, max_range)[0]

