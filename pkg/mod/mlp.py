"""Small feedforward maps over flat weight vectors.

Weights live in one flat float64 vector so the cross-entropy search can sample
them directly and checkpoints are a single array. Hidden layers use tanh, the
output layer is linear. Gradients are written out by hand (no autodiff).
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from mod.errors import ContractError, TrainingDivergedError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeedForward:
    """Layer layout of a tanh network, e.g. ``(n_in, 64, 64, n_out)``."""

    layer_sizes: Tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ContractError(f"Invalid layer sizes {self.layer_sizes}")
        object.__setattr__(self, 'layer_sizes', sizes)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_weights(self) -> int:
        return sum((n_in + 1) * n_out for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def unflatten(self, flat: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Split a flat vector into ``(W, b)`` views, ``W`` shaped ``(n_in, n_out)``."""
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_weights,):
            raise ContractError(f"Expected {self.n_weights} weights, got shape {flat.shape}")
        layers = []
        offset = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = flat[offset:offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            b = flat[offset:offset + n_out]
            offset += n_out
            layers.append((w, b))
        return layers

    def init_weights(self, rng: np.random.Generator, scale: float = 1.0,
                     zero_output: bool = False) -> np.ndarray:
        """Scaled-normal initialization with zero biases."""
        parts = []
        n_layers = len(self.layer_sizes) - 1
        for index, (n_in, n_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            if zero_output and index == n_layers - 1:
                w = np.zeros((n_in, n_out))
            else:
                w = rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out))
            parts.extend([w.ravel(), np.zeros(n_out)])
        return np.concatenate(parts)

    def _check_inputs(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_inputs:
            raise ContractError(f"Expected {self.n_inputs} inputs, got {x.shape[-1]}")
        return x

    def forward(self, flat: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Evaluate on one input vector or a batch ``(n, n_in)``."""
        a = self._check_inputs(x)
        layers = self.unflatten(flat)
        for index, (w, b) in enumerate(layers):
            a = a @ w + b
            if index < len(layers) - 1:
                a = np.tanh(a)
        return a

    def forward_cached(self, flat: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        """Forward pass on a batch, keeping layer activations for ``backward``."""
        a = np.atleast_2d(self._check_inputs(x))
        layers = self.unflatten(flat)
        activations = [a]
        for index, (w, b) in enumerate(layers):
            a = a @ w + b
            if index < len(layers) - 1:
                a = np.tanh(a)
            activations.append(a)
        return a, activations

    def backward(self, flat: np.ndarray, activations: Sequence[np.ndarray],
                 grad_out: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(grad_out * output)`` with respect to the flat weights."""
        layers = self.unflatten(flat)
        delta = np.atleast_2d(grad_out)
        grads: List[np.ndarray] = []
        for index in range(len(layers) - 1, -1, -1):
            w, _ = layers[index]
            a_in = activations[index]
            grads.append(delta.sum(axis=0))
            grads.append((a_in.T @ delta).ravel())
            if index > 0:
                delta = (delta @ w.T) * (1.0 - a_in ** 2)
        return np.concatenate(grads[::-1])


@dataclass
class AdamState:
    """First/second moment buffers of an Adam optimizer."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> 'AdamState':
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = field(default=10.0)


def adam_step(flat: np.ndarray, grad: np.ndarray, state: AdamState,
              cfg: AdamConfig = AdamConfig()) -> np.ndarray:
    """One Adam update; mutates ``state`` and returns new weights.

    Raises:
        TrainingDivergedError: If the gradient is not finite
    """
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergedError("Non-finite gradient")
    norm = float(np.linalg.norm(grad))
    if cfg.grad_clip > 0 and norm > cfg.grad_clip:
        grad = grad * (cfg.grad_clip / norm)
    state.t += 1
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad ** 2
    m_hat = state.m / (1.0 - cfg.beta1 ** state.t)
    v_hat = state.v / (1.0 - cfg.beta2 ** state.t)
    return flat - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
