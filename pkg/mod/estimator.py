"""Physical-parameter estimator over a proprioception/action history.

The estimator maps the last 50 ``(proprio, action)`` pairs to the estimated
parameter subset ``(payload_mass, com_x, com_y, com_z, friction)``. It is a
linear map of the flattened window plus one tanh hidden layer. Outputs live in
normalized units (each range mapped to [-1, 1]) so zero weights predict the
range midpoint and every emitted estimate is clamped to the ranges.

Also here: the fusion interpolation used to condition the agile policy while
the estimator is still being trained, and the on-policy fine-tuning step.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Optional, Tuple, Union

import numpy as np

from mod.dynamics import ESTIMATED_FIELDS, PROPRIO_FIELDS, PROPRIO_SCALE, EnvParams, RandomizationRanges
from mod.errors import ConfigError, ContractError, TrainingDivergedError
from mod.mlp import AdamConfig, AdamState, adam_step

logger = logging.getLogger(__name__)

WINDOW_LENGTH = 50
ACTION_SCALE = np.array([3.5, 2.5])
ENTRY_DIM = len(PROPRIO_FIELDS) + 2
N_ESTIMATED = len(ESTIMATED_FIELDS)
ALPHA_SCHEDULES = ('annealed', 'literal', 'estimate_only', 'truth_only')


@dataclass(frozen=True)
class EstimatorConfig:
    window_length: int = WINDOW_LENGTH
    hidden_units: int = 64
    l2_coeff: float = 1e-4
    learning_rate: float = 1e-3
    fit_steps: int = 50
    fit_batch_size: int = 512
    buffer_size: int = 20000
    method: str = 'adam'
    alpha_schedule: str = 'annealed'
    finetune_iterations: int = 4
    finetune_episodes: int = 40
    heldout_episodes: int = 20

    def __post_init__(self):
        if self.window_length < 1:
            raise ConfigError("window_length must be at least 1")
        if self.hidden_units < 0:
            raise ConfigError("hidden_units must be non-negative")
        if self.method not in ('adam', 'lstsq'):
            raise ConfigError(f"Unknown estimator fit method '{self.method}'")
        if self.alpha_schedule not in ALPHA_SCHEDULES:
            raise ConfigError(f"Unknown alpha schedule '{self.alpha_schedule}', expected one of {ALPHA_SCHEDULES}")

    @property
    def input_dim(self) -> int:
        return self.window_length * ENTRY_DIM


class HistoryWindow:
    """Ring buffer of the most recent ``(proprio, action)`` pairs, newest last.

    Reset zero-fills the buffer; a policy switch never resets it.
    """

    def __init__(self, length: int = WINDOW_LENGTH):
        if length < 1:
            raise ContractError(f"Window length must be at least 1, got {length}")
        self.length = length
        self._entries: Deque[np.ndarray] = deque(maxlen=length)
        self.reset()

    def reset(self) -> None:
        self._entries.clear()
        for _ in range(self.length):
            self._entries.append(np.zeros(ENTRY_DIM))

    def push(self, proprio: np.ndarray, action: np.ndarray) -> None:
        proprio = np.asarray(proprio, dtype=float)
        action = np.asarray(action, dtype=float)
        if proprio.shape != (len(PROPRIO_FIELDS),) or action.shape != (2,):
            raise ContractError(f"Window entry has shapes {proprio.shape}, {action.shape}")
        self._entries.append(np.concatenate([proprio / PROPRIO_SCALE, action / ACTION_SCALE]))

    def __len__(self) -> int:
        return self.length

    def as_array(self) -> np.ndarray:
        """``(length, ENTRY_DIM)`` normalized entries, oldest first."""
        return np.array(self._entries)

    def features(self) -> np.ndarray:
        """Flattened normalized window; the estimator input."""
        return self.as_array().ravel()


@dataclass(frozen=True, eq=False)
class EstimatorParams:
    """Flat weights ``[W_lin, b, W_hidden, b_hidden, W_out]`` and their L2 weight."""

    weights: np.ndarray
    input_dim: int
    hidden_units: int = 64
    l2_coeff: float = 1e-4

    @staticmethod
    def size(input_dim: int, hidden_units: int) -> int:
        linear = input_dim * N_ESTIMATED + N_ESTIMATED
        hidden = input_dim * hidden_units + hidden_units + hidden_units * N_ESTIMATED if hidden_units else 0
        return linear + hidden

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        if weights.shape != (self.size(self.input_dim, self.hidden_units),):
            raise ContractError(f"Estimator weight vector has shape {weights.shape}")
        if not np.all(np.isfinite(weights)):
            raise TrainingDivergedError("Estimator weights are not finite")
        object.__setattr__(self, 'weights', weights)

    def unpack(self):
        d, h, k = self.input_dim, self.hidden_units, N_ESTIMATED
        w = self.weights
        offset = 0

        def take(count, shape):
            nonlocal offset
            part = w[offset:offset + count].reshape(shape)
            offset += count
            return part

        w_lin = take(d * k, (d, k))
        b = take(k, (k,))
        if h:
            w1 = take(d * h, (d, h))
            b1 = take(h, (h,))
            w2 = take(h * k, (h, k))
        else:
            w1, b1, w2 = np.zeros((d, 0)), np.zeros(0), np.zeros((0, k))
        return w_lin, b, w1, b1, w2

    def penalty_mask(self) -> np.ndarray:
        """1 on matrix weights, 0 on biases."""
        d, h, k = self.input_dim, self.hidden_units, N_ESTIMATED
        parts = [np.ones(d * k), np.zeros(k)]
        if h:
            parts += [np.ones(d * h), np.zeros(h), np.ones(h * k)]
        return np.concatenate(parts)

    def with_weights(self, weights: np.ndarray) -> 'EstimatorParams':
        return EstimatorParams(weights, self.input_dim, self.hidden_units, self.l2_coeff)


def init_estimator(rng: Optional[np.random.Generator], cfg: EstimatorConfig = EstimatorConfig(),
                   hidden_scale: float = 0.1) -> EstimatorParams:
    """Zero output weights; small random hidden weights when ``rng`` is given.

    The initial estimator therefore predicts the range midpoint everywhere.
    """
    d, h = cfg.input_dim, cfg.hidden_units
    weights = np.zeros(EstimatorParams.size(d, h))
    if h and rng is not None:
        start = d * N_ESTIMATED + N_ESTIMATED
        weights[start:start + d * h] = rng.normal(0.0, hidden_scale / np.sqrt(d), size=d * h)
    return EstimatorParams(weights, d, h, cfg.l2_coeff)


@dataclass(eq=False)
class SampleSet:
    """Supervised estimator samples: flattened windows and true estimated-subset targets."""

    windows: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    targets: np.ndarray = field(default_factory=lambda: np.zeros((0, N_ESTIMATED)))

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    @classmethod
    def from_lists(cls, windows, targets) -> 'SampleSet':
        if not len(windows):
            return cls()
        return cls(np.asarray(windows, dtype=float), np.asarray(targets, dtype=float))

    def concat(self, other: 'SampleSet') -> 'SampleSet':
        if not len(self):
            return other
        if not len(other):
            return self
        return SampleSet(np.concatenate([self.windows, other.windows]),
                         np.concatenate([self.targets, other.targets]))

    def subsample(self, rng: np.random.Generator, count: int) -> 'SampleSet':
        if count >= len(self):
            return self
        index = np.sort(rng.choice(len(self), size=count, replace=False))
        return SampleSet(self.windows[index], self.targets[index])

    def tail(self, count: int) -> 'SampleSet':
        if count >= len(self):
            return self
        return SampleSet(self.windows[-count:], self.targets[-count:])


def _forward(params: EstimatorParams, x: np.ndarray):
    w_lin, b, w1, b1, w2 = params.unpack()
    hidden = np.tanh(x @ w1 + b1)
    return x @ w_lin + b + hidden @ w2, hidden


def predict_normalized(windows: np.ndarray, params: EstimatorParams) -> np.ndarray:
    """Unclamped normalized predictions for a batch of flattened windows."""
    x = np.atleast_2d(np.asarray(windows, dtype=float))
    if x.shape[1] != params.input_dim:
        raise ContractError(f"Estimator expects {params.input_dim} inputs, got {x.shape[1]}")
    return _forward(params, x)[0]


def estimate_batch(windows: np.ndarray, params: EstimatorParams,
                   ranges: RandomizationRanges) -> np.ndarray:
    """Clamped estimates ``(n, 5)`` in physical units."""
    out = np.clip(predict_normalized(windows, params), -1.0, 1.0)
    return ranges.clamp(ranges.denormalize(out))


def estimate(window: HistoryWindow, params: EstimatorParams, ranges: RandomizationRanges) -> np.ndarray:
    """Estimated ``(payload_mass, com_x, com_y, com_z, friction)`` for one window."""
    return estimate_batch(window.features()[None, :], params, ranges)[0]


def fusion_alpha(progress: float, schedule: str = 'annealed') -> float:
    """Weight on the true parameters at a given training progress."""
    if not 0.0 <= progress <= 1.0:
        raise ContractError(f"Training progress must lie in [0, 1], got {progress}")
    if schedule == 'annealed':
        return min(2.0 * (1.0 - progress), 1.0)
    if schedule == 'literal':
        return min(2.0 * progress, 1.0)
    if schedule == 'estimate_only':
        return 0.0
    if schedule == 'truth_only':
        return 1.0
    raise ConfigError(f"Unknown alpha schedule '{schedule}'")


def fuse(e_true: Union[EnvParams, np.ndarray], e_hat: np.ndarray, progress: float,
         schedule: str = 'annealed') -> np.ndarray:
    """Conditioning vector ``alpha * e + (1 - alpha) * e_hat`` on the estimated subset.

    Args:
        e_true: True parameters (EnvParams or estimated-subset vector)
        e_hat: Estimated-subset vector
        progress: Elapsed training fraction in [0, 1]
        schedule: One of ``ALPHA_SCHEDULES``

    Returns:
        Estimated-subset conditioning vector
    """
    truth = e_true.estimated_vector() if isinstance(e_true, EnvParams) else np.asarray(e_true, dtype=float)
    e_hat = np.asarray(e_hat, dtype=float)
    if truth.shape != (N_ESTIMATED,) or e_hat.shape != (N_ESTIMATED,):
        raise ContractError(f"Fusion expects {N_ESTIMATED}-vectors, got {truth.shape} and {e_hat.shape}")
    alpha = fusion_alpha(progress, schedule)
    if alpha == 1.0:
        return truth.copy()
    if alpha == 0.0:
        return e_hat.copy()
    return alpha * truth + (1.0 - alpha) * e_hat


def evaluate_loss(samples: SampleSet, params: EstimatorParams, ranges: RandomizationRanges) -> float:
    """Mean squared error in normalized units (no regularization term)."""
    if not len(samples):
        raise ContractError("Cannot evaluate estimator loss on an empty sample set")
    residual = predict_normalized(samples.windows, params) - ranges.normalize(samples.targets)
    return float(np.mean(residual ** 2))


def _loss_and_grad(params: EstimatorParams, x: np.ndarray, t: np.ndarray) -> Tuple[float, np.ndarray]:
    w2 = params.unpack()[4]
    out, hidden = _forward(params, x)
    residual = out - t
    mask = params.penalty_mask()
    loss = float(np.mean(residual ** 2)) + params.l2_coeff * float(np.sum((params.weights * mask) ** 2))

    g = 2.0 * residual / residual.size
    parts = [(x.T @ g).ravel(), g.sum(axis=0)]
    if params.hidden_units:
        dh = (g @ w2.T) * (1.0 - hidden ** 2)
        parts += [(x.T @ dh).ravel(), dh.sum(axis=0), (hidden.T @ g).ravel()]
    grad = np.concatenate(parts) + 2.0 * params.l2_coeff * params.weights * mask
    return loss, grad


def _solve_linear_head(params: EstimatorParams, x: np.ndarray, t: np.ndarray) -> EstimatorParams:
    """Ridge solve of the linear head with the hidden path held fixed."""
    _, _, w1, b1, w2 = params.unpack()
    residual_target = t - np.tanh(x @ w1 + b1) @ w2
    n, d = x.shape
    design = np.hstack([x, np.ones((n, 1))])
    if params.l2_coeff > 0:
        ridge = np.sqrt(residual_target.size * params.l2_coeff) * np.hstack([np.eye(d), np.zeros((d, 1))])
        design = np.vstack([design, ridge])
        residual_target = np.vstack([residual_target, np.zeros((d, N_ESTIMATED))])
    solution, *_ = np.linalg.lstsq(design, residual_target, rcond=None)
    weights = params.weights.copy()
    weights[:d * N_ESTIMATED] = solution[:d].ravel()
    weights[d * N_ESTIMATED:d * N_ESTIMATED + N_ESTIMATED] = solution[d]
    return params.with_weights(weights)


def fit(samples: SampleSet, params: EstimatorParams, ranges: RandomizationRanges,
        cfg: EstimatorConfig = EstimatorConfig()) -> Tuple[EstimatorParams, float]:
    """Regress estimates toward the true parameters.

    Minimizes the normalized-unit MSE plus ``l2_coeff * |W|^2`` with full-batch
    Adam steps (``method='adam'``) or a closed-form ridge solve of the linear
    head (``method='lstsq'``).

    Returns:
        Updated params and the post-update regularized loss

    Raises:
        ContractError: On an empty batch or a dimension mismatch
        TrainingDivergedError: If the loss becomes non-finite
    """
    if not len(samples):
        raise ContractError("Estimator fit needs a non-empty batch")
    x = np.asarray(samples.windows, dtype=float)
    if x.shape[1] != params.input_dim:
        raise ContractError(f"Estimator expects {params.input_dim} inputs, got {x.shape[1]}")
    t = ranges.normalize(samples.targets)

    if cfg.method == 'lstsq':
        params = _solve_linear_head(params, x, t)
    else:
        state = AdamState.zeros(params.weights.size)
        adam = AdamConfig(learning_rate=cfg.learning_rate)
        weights = params.weights
        for _ in range(cfg.fit_steps):
            loss, grad = _loss_and_grad(params, x, t)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"Estimator loss became non-finite ({loss})")
            weights = adam_step(weights, grad, state, adam)
            params = params.with_weights(weights)

    loss, _ = _loss_and_grad(params, x, t)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"Estimator loss became non-finite ({loss})")
    logger.debug("Estimator fit on %d samples, loss %.6f", len(samples), loss)
    return params, loss


def finetune_on_policy(train: SampleSet, heldout: SampleSet, params: EstimatorParams,
                       ranges: RandomizationRanges, cfg: EstimatorConfig = EstimatorConfig(),
                       rng: Optional[np.random.Generator] = None) -> Tuple[EstimatorParams, float, float]:
    """Fine-tune on windows collected by the switched closed loop.

    Both policies write into the same per-episode window while the samples are
    gathered, so the windows carry the history distribution the estimator sees
    at deployment. Targets are the true parameters of each episode.

    Args:
        train: Samples from safeguarded training episodes
        heldout: Samples from separate safeguarded episodes
        params: Estimator after joint training
        ranges: Parameter ranges used for normalization
        cfg: ``finetune_iterations`` rounds of ``fit``
        rng: Stream for minibatch subsampling

    Returns:
        ``(params, loss_before, loss_after)`` measured on ``heldout``
    """
    before = evaluate_loss(heldout, params, ranges)
    for iteration in range(cfg.finetune_iterations):
        batch = train.subsample(rng, cfg.fit_batch_size) if rng is not None else train
        params, loss = fit(batch, params, ranges, cfg)
        logger.info("Fine-tune round %d/%d: train loss %.5f", iteration + 1, cfg.finetune_iterations, loss)
    after = evaluate_loss(heldout, params, ranges)
    logger.info("Held-out estimation loss %.5f -> %.5f", before, after)
    return params, before, after
