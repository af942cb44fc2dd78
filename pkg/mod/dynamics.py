"""Planar twist-tracking robot with hidden physical parameters.

The robot state is ``(x, y, theta, v, omega)``. Commanded twists are tracked
through first-order lags whose acceleration limits depend on the physical
parameters ``e``:

    a_lim     = min(a_motor * m0 / (m0 + payload), friction * g * k_grip)
    alpha_lim = yaw_accel_max / (1 + c_com_z * com_z)

The lateral CoM shift biases the achieved yaw rate by ``c_com_y * com_y`` and
the external force pushes the base as a world-frame drift. The force acts as
an acceleration ``F / (m0 + payload)`` that ground contact relaxes within
``drift_time``, so each step adds a displacement of
``F / (m0 + payload) * drift_time * dt``.

The arithmetic in ``_advance`` is written with numpy ufuncs so the scalar
``step`` and the batched ``step_batch`` share one implementation.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from mod.errors import ConfigError, ContractError, InvalidStateError
from mod.world import WorldSpec, ray_distances, ray_distances_batch

logger = logging.getLogger(__name__)

ESTIMATED_FIELDS = ('payload_mass', 'com_x', 'com_y', 'com_z', 'friction')
PARAM_FIELDS = ESTIMATED_FIELDS + ('ext_force_x', 'ext_force_y')
STATE_FIELDS = ('x', 'y', 'theta', 'v', 'omega')
PROPRIO_FIELDS = ('v', 'omega', 'v_cmd_prev', 'omega_cmd_prev',
                  'accel_long', 'accel_yaw', 'pitch', 'roll')
PROPRIO_SCALE = np.array([3.5, 2.5, 3.5, 2.5, 10.0, 20.0, 0.2, 0.2])


def wrap_angle(angle):
    """Wrap angles to (-pi, pi]. Works on floats and arrays."""
    return np.pi - np.mod(np.pi - angle, 2.0 * np.pi)


@dataclass(frozen=True)
class State:
    """Planar base state: position (m), heading (rad), speed (m/s), yaw rate (rad/s)."""

    x: float
    y: float
    theta: float
    v: float = 0.0
    omega: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v, self.omega], dtype=float)

    @classmethod
    def from_array(cls, values: np.ndarray) -> 'State':
        x, y, theta, v, omega = (float(value) for value in values)
        return cls(x, y, theta, v, omega)

    def is_finite(self) -> bool:
        return all(math.isfinite(value) for value in (self.x, self.y, self.theta, self.v, self.omega))


@dataclass(frozen=True)
class Action:
    """Commanded twist: forward speed (m/s) and yaw rate (rad/s)."""

    v_cmd: float
    omega_cmd: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v_cmd, self.omega_cmd], dtype=float)

    @classmethod
    def from_array(cls, values: np.ndarray) -> 'Action':
        return cls(float(values[0]), float(values[1]))

    @classmethod
    def zero(cls) -> 'Action':
        return cls(0.0, 0.0)


@dataclass(frozen=True)
class EnvParams:
    """Hidden physical parameters of one episode.

    Only ``(payload_mass, com_shift, friction)`` are estimated; the external
    force is randomized but never estimated.
    """

    payload_mass: float = 0.0
    friction: float = 1.0
    com_shift: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    ext_force: Tuple[float, float] = (0.0, 0.0)

    def estimated_vector(self) -> np.ndarray:
        """``(payload_mass, com_x, com_y, com_z, friction)``."""
        cx, cy, cz = self.com_shift
        return np.array([self.payload_mass, cx, cy, cz, self.friction], dtype=float)

    def as_vector(self) -> np.ndarray:
        """All seven parameters in ``PARAM_FIELDS`` order."""
        return np.concatenate([self.estimated_vector(), np.asarray(self.ext_force, dtype=float)])

    @classmethod
    def from_vector(cls, values: np.ndarray) -> 'EnvParams':
        """Build from an estimated 5-vector or a full 7-vector."""
        values = np.asarray(values, dtype=float)
        force = (float(values[5]), float(values[6])) if values.shape[0] >= 7 else (0.0, 0.0)
        return cls(
            payload_mass=float(values[0]),
            friction=float(values[4]),
            com_shift=(float(values[1]), float(values[2]), float(values[3])),
            ext_force=force,
        )

    def replace(self, **changes) -> 'EnvParams':
        data = {
            'payload_mass': self.payload_mass,
            'friction': self.friction,
            'com_shift': self.com_shift,
            'ext_force': self.ext_force,
        }
        data.update(changes)
        return EnvParams(**data)

    def to_dict(self) -> dict:
        return {
            'payload_mass': self.payload_mass,
            'friction': self.friction,
            'com_shift': list(self.com_shift),
            'ext_force': list(self.ext_force),
        }


@dataclass(frozen=True)
class RandomizationRanges:
    """Per-field sampling intervals (domain randomization)."""

    payload_mass: Tuple[float, float] = (-2.0, 12.0)
    friction: Tuple[float, float] = (0.25, 1.5)
    com_x: Tuple[float, float] = (-0.05, 0.05)
    com_y: Tuple[float, float] = (-0.05, 0.05)
    com_z: Tuple[float, float] = (-0.05, 0.15)
    ext_force_x: Tuple[float, float] = (-15.0, 15.0)
    ext_force_y: Tuple[float, float] = (-15.0, 15.0)

    def __post_init__(self):
        for name in PARAM_FIELDS:
            interval = getattr(self, name)
            if len(interval) != 2:
                raise ConfigError(f"Range '{name}' needs two values, got {interval}")
            lo, hi = float(interval[0]), float(interval[1])
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ConfigError(f"Empty or invalid range for '{name}': [{lo}, {hi}]")
            object.__setattr__(self, name, (lo, hi))

    def bounds(self, fields: Tuple[str, ...] = ESTIMATED_FIELDS) -> Tuple[np.ndarray, np.ndarray]:
        """Lower and upper bounds for the given fields."""
        lo = np.array([getattr(self, name)[0] for name in fields], dtype=float)
        hi = np.array([getattr(self, name)[1] for name in fields], dtype=float)
        return lo, hi

    def widths(self, fields: Tuple[str, ...] = ESTIMATED_FIELDS) -> np.ndarray:
        """Interval widths; zero-width intervals count as width one."""
        lo, hi = self.bounds(fields)
        width = hi - lo
        return np.where(width > 0, width, 1.0)

    def normalize(self, estimated: np.ndarray) -> np.ndarray:
        """Map estimated-subset values to [-1, 1] (range midpoint -> 0)."""
        lo, hi = self.bounds()
        half = np.where(hi > lo, (hi - lo) / 2.0, 1.0)
        return (np.asarray(estimated, dtype=float) - (lo + hi) / 2.0) / half

    def denormalize(self, unit: np.ndarray) -> np.ndarray:
        """Inverse of ``normalize``."""
        lo, hi = self.bounds()
        half = np.where(hi > lo, (hi - lo) / 2.0, 1.0)
        return np.asarray(unit, dtype=float) * half + (lo + hi) / 2.0

    def clamp(self, estimated: np.ndarray) -> np.ndarray:
        """Clamp estimated-subset values into the ranges."""
        lo, hi = self.bounds()
        return np.clip(np.asarray(estimated, dtype=float), lo, hi)


@dataclass(frozen=True)
class DynamicsConfig:
    """Dynamics constants. Defaults describe a 12 kg base at desk scale."""

    dt: float = 0.05
    horizon_steps: int = 160
    v_max: float = 3.5
    v_cmd_min: float = -1.0
    v_cmd_max: float = 3.5
    omega_cmd_max: float = 2.5
    base_mass: float = 12.0
    a_motor: float = 8.0
    k_grip: float = 0.8
    gravity: float = 9.81
    yaw_accel_max: float = 12.0
    c_com_z: float = 4.0
    c_com_y: float = 5.0
    tau_v: float = 0.2
    tau_omega: float = 0.1
    drift_time: float = 0.1
    body_height: float = 0.3

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if not (self.v_cmd_min < self.v_cmd_max and self.omega_cmd_max > 0):
            raise ConfigError("Command limits are empty")
        if self.dt > self.tau_v or self.dt > self.tau_omega:
            raise ConfigError("dt must not exceed the lag time constants")

    @property
    def action_low(self) -> np.ndarray:
        return np.array([self.v_cmd_min, -self.omega_cmd_max])

    @property
    def action_high(self) -> np.ndarray:
        return np.array([self.v_cmd_max, self.omega_cmd_max])

    def clip_action(self, values: np.ndarray) -> np.ndarray:
        return np.clip(values, self.action_low, self.action_high)

    def accel_limit(self, payload_mass, friction):
        """Forward acceleration limit for the given parameters."""
        total = self.base_mass + payload_mass
        return np.minimum(self.a_motor * self.base_mass / total, friction * self.gravity * self.k_grip)


@dataclass(frozen=True)
class SensorConfig:
    """Observation model: ray layout and noise magnitudes."""

    n_rays: int = 16
    max_range: float = 5.0
    goal_scale: float = 10.0
    proprio_noise_std: float = 0.02
    ray_noise_std: float = 0.02
    goal_noise_std: float = 0.0

    @property
    def feature_dim(self) -> int:
        return len(PROPRIO_FIELDS) + 2 + self.n_rays


@dataclass(frozen=True)
class Observation:
    """Sensor reading ``o = h(s)``; carries no parameter entries."""

    proprio: np.ndarray
    goal_relative: np.ndarray
    rays: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def features(self, sensor: SensorConfig) -> np.ndarray:
        return observation_features(self.proprio, self.goal_relative, self.rays, sensor)


DEFAULT_DYNAMICS = DynamicsConfig()
DEFAULT_SENSOR = SensorConfig()


def sample_params(rng: np.random.Generator, ranges: RandomizationRanges) -> EnvParams:
    """Draw independent uniform parameters for one episode.

    Args:
        rng: Episode random stream
        ranges: Per-field intervals; degenerate intervals return their point

    Returns:
        EnvParams, static for the episode
    """
    values = {}
    for name in PARAM_FIELDS:
        lo, hi = getattr(ranges, name)
        if hi < lo:
            raise ConfigError(f"Empty range for '{name}'")
        values[name] = float(rng.uniform(lo, hi)) if hi > lo else lo
    return EnvParams(
        payload_mass=values['payload_mass'],
        friction=values['friction'],
        com_shift=(values['com_x'], values['com_y'], values['com_z']),
        ext_force=(values['ext_force_x'], values['ext_force_y']),
    )


def _advance(x, y, theta, v, omega, v_cmd, omega_cmd,
             payload, friction, com_y, com_z, force_x, force_y, dt, cfg: DynamicsConfig):
    total_mass = cfg.base_mass + payload
    a_lim = cfg.accel_limit(payload, friction)
    alpha_lim = cfg.yaw_accel_max / (1.0 + cfg.c_com_z * com_z)

    dv = np.clip((v_cmd - v) / cfg.tau_v, -a_lim, a_lim)
    v_new = np.clip(v + dv * dt, -cfg.v_max, cfg.v_max)
    omega_target = omega_cmd + cfg.c_com_y * com_y
    domega = np.clip((omega_target - omega) / cfg.tau_omega, -alpha_lim, alpha_lim)
    omega_new = omega + domega * dt
    theta_new = wrap_angle(theta + omega_new * dt)

    drift = cfg.drift_time * dt / total_mass
    x_new = x + v_new * np.cos(theta_new) * dt + force_x * drift
    y_new = y + v_new * np.sin(theta_new) * dt + force_y * drift
    return x_new, y_new, theta_new, v_new, omega_new


def _check_action(values: np.ndarray, cfg: DynamicsConfig) -> np.ndarray:
    low, high = cfg.action_low, cfg.action_high
    if np.any(values < low - 1e-9) or np.any(values > high + 1e-9):
        raise ContractError(f"Action {values} outside command limits [{low}, {high}]")
    return np.clip(values, low, high)


def step(state: State, action: Action, params: EnvParams, dt: Optional[float] = None,
         cfg: DynamicsConfig = DEFAULT_DYNAMICS) -> State:
    """Advance one control step, ``s_{t+1} = s_t + f(s_t, a_t, e)``.

    Args:
        state: Current state
        action: Commanded twist within the command limits
        params: Physical parameters
        dt: Step length in seconds (defaults to ``cfg.dt``)
        cfg: Dynamics constants

    Returns:
        Next state

    Raises:
        InvalidStateError: On non-finite inputs
        ContractError: On a non-positive ``dt`` or an out-of-range action
    """
    dt = cfg.dt if dt is None else float(dt)
    if not dt > 0:
        raise ContractError(f"dt must be positive, got {dt}")
    raw = np.concatenate([state.as_array(), action.as_array(), params.as_vector()])
    if not np.all(np.isfinite(raw)):
        raise InvalidStateError(f"Non-finite input to step: {raw}")
    if cfg.base_mass + params.payload_mass <= 0:
        raise ContractError(f"Total mass must be positive, payload {params.payload_mass}")
    v_cmd, omega_cmd = _check_action(action.as_array(), cfg)
    cx, cy, cz = params.com_shift
    fx, fy = params.ext_force
    out = _advance(state.x, state.y, state.theta, state.v, state.omega, v_cmd, omega_cmd,
                   params.payload_mass, params.friction, cy, cz, fx, fy, dt, cfg)
    return State(*(float(value) for value in out))


def step_batch(states: np.ndarray, actions: np.ndarray, params: Union[EnvParams, np.ndarray],
               dt: Optional[float] = None, cfg: DynamicsConfig = DEFAULT_DYNAMICS) -> np.ndarray:
    """Vectorized ``step`` over ``(n, 5)`` states and ``(n, 2)`` actions.

    ``params`` is a single EnvParams or an ``(n, 7)`` matrix in
    ``PARAM_FIELDS`` order (an ``(n, 5)`` estimated matrix means zero force).
    """
    dt = cfg.dt if dt is None else float(dt)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    if isinstance(params, EnvParams):
        matrix = np.broadcast_to(params.as_vector(), (states.shape[0], len(PARAM_FIELDS)))
    else:
        matrix = np.atleast_2d(np.asarray(params, dtype=float))
        if matrix.shape[1] == len(ESTIMATED_FIELDS):
            matrix = np.concatenate([matrix, np.zeros((matrix.shape[0], 2))], axis=1)
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions)) and np.all(np.isfinite(matrix))):
        raise InvalidStateError("Non-finite input to step_batch")
    actions = _check_action(actions, cfg)
    out = _advance(states[:, 0], states[:, 1], states[:, 2], states[:, 3], states[:, 4],
                   actions[:, 0], actions[:, 1],
                   matrix[:, 0], matrix[:, 4], matrix[:, 2], matrix[:, 3], matrix[:, 5], matrix[:, 6],
                   dt, cfg)
    return np.stack(out, axis=1)


def body_tilt(params_matrix: np.ndarray, accel_long, v, omega, cfg: DynamicsConfig):
    """Gravity-projection pitch/roll proxy of the base.

    A shifted CoM leans the body; longitudinal and centripetal accelerations
    add to the measured tilt.
    """
    com_x = params_matrix[..., 1]
    com_y = params_matrix[..., 2]
    pitch = np.arctan2(com_x, cfg.body_height) - accel_long / cfg.gravity
    roll = np.arctan2(com_y, cfg.body_height) + v * omega / cfg.gravity
    return pitch, roll


def body_frame(dx, dy, theta):
    """Rotate world-frame offsets into the body frame."""
    c, s = np.cos(theta), np.sin(theta)
    return c * dx + s * dy, -s * dx + c * dy


def observation_features(proprio: np.ndarray, goal_relative: np.ndarray, rays: np.ndarray,
                         sensor: SensorConfig) -> np.ndarray:
    """Normalized policy input. Works on single observations and batches."""
    return np.concatenate([
        np.asarray(proprio, dtype=float) / PROPRIO_SCALE,
        np.clip(np.asarray(goal_relative, dtype=float) / sensor.goal_scale, -1.5, 1.5),
        np.asarray(rays, dtype=float) / sensor.max_range,
    ], axis=-1)


def observe(state: State, a_prev: Action, rng: Optional[np.random.Generator], world: WorldSpec,
            goal: Tuple[float, float], prev_state: Optional[State] = None,
            params: Optional[EnvParams] = None, sensor: SensorConfig = DEFAULT_SENSOR,
            cfg: DynamicsConfig = DEFAULT_DYNAMICS) -> Observation:
    """Sensor mapping ``o = h(s)``.

    Proprioception is ``(v, omega, last command, finite-difference
    accelerations, tilt proxy)`` with additive Gaussian noise. Accelerations
    are zero when ``prev_state`` is not given. ``params`` only shapes the body
    posture behind the tilt reading; no parameter value is copied into the
    observation.

    Args:
        state: True state
        a_prev: Previous command
        rng: Noise stream (may be None when all noise magnitudes are zero)
        world: World for ray sensing
        goal: Goal position (world frame)
        prev_state: State one step earlier
        params: Physical parameters of the body
        sensor: Ray layout and noise magnitudes
        cfg: Dynamics constants (dt, gravity, body height)

    Returns:
        Observation
    """
    if not state.is_finite():
        raise InvalidStateError(f"Non-finite state {state}")
    if prev_state is not None:
        accel_long = (state.v - prev_state.v) / cfg.dt
        accel_yaw = (state.omega - prev_state.omega) / cfg.dt
    else:
        accel_long = accel_yaw = 0.0
    params = params or EnvParams()
    pitch, roll = body_tilt(params.as_vector(), accel_long, state.v, state.omega, cfg)
    proprio = np.array([state.v, state.omega, a_prev.v_cmd, a_prev.omega_cmd,
                        accel_long, accel_yaw, float(pitch), float(roll)], dtype=float)
    gx, gy = body_frame(goal[0] - state.x, goal[1] - state.y, state.theta)
    goal_relative = np.array([gx, gy], dtype=float)
    rays = ray_distances(state, world, sensor.n_rays, sensor.max_range)

    if rng is not None:
        if sensor.proprio_noise_std > 0:
            proprio = proprio + rng.normal(0.0, sensor.proprio_noise_std, size=proprio.shape)
        if sensor.goal_noise_std > 0:
            goal_relative = goal_relative + rng.normal(0.0, sensor.goal_noise_std, size=2)
        if sensor.ray_noise_std > 0:
            rays = np.clip(rays + rng.normal(0.0, sensor.ray_noise_std, size=rays.shape),
                           0.0, sensor.max_range)
    elif sensor.proprio_noise_std > 0 or sensor.ray_noise_std > 0 or sensor.goal_noise_std > 0:
        raise ContractError("A noise stream is required when sensor noise is enabled")
    return Observation(proprio=proprio, goal_relative=goal_relative, rays=rays)


def observe_batch(states: np.ndarray, world: WorldSpec, goal: Tuple[float, float],
                  params_matrix: np.ndarray, sensor: SensorConfig = DEFAULT_SENSOR,
                  cfg: DynamicsConfig = DEFAULT_DYNAMICS) -> np.ndarray:
    """Noise-free normalized features for a batch of quasi-steady states.

    The previous command is taken equal to the current twist and the
    accelerations are zero, which is the steady reading of a state on a grid.

    Returns:
        Feature matrix of shape ``(n, sensor.feature_dim)``
    """
    states = np.atleast_2d(states)
    params_matrix = np.broadcast_to(np.atleast_2d(params_matrix), (states.shape[0], params_matrix.shape[-1]))
    v, omega = states[:, 3], states[:, 4]
    zeros = np.zeros_like(v)
    pitch, roll = body_tilt(params_matrix, zeros, v, omega, cfg)
    proprio = np.stack([v, omega, v, omega, zeros, zeros, pitch, roll], axis=1)
    gx, gy = body_frame(goal[0] - states[:, 0], goal[1] - states[:, 1], states[:, 2])
    rays = ray_distances_batch(states[:, 0], states[:, 1], states[:, 2], world,
                               sensor.n_rays, sensor.max_range)
    return observation_features(proprio, np.stack([gx, gy], axis=1), rays, sensor)
