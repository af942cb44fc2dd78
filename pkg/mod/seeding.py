"""Deterministic random streams derived from one root seed.

All randomness in the pipeline flows from ``ExperimentConfig.seed``. A stream
is identified by a tuple of labels (phase name, generation, candidate,
episode, ...) which become the ``spawn_key`` of a ``numpy.random.SeedSequence``.
Two streams with different label tuples are statistically independent, and a
stream never depends on how many workers evaluate the batch it belongs to.
"""

import hashlib
from typing import Union

import numpy as np

Label = Union[int, str]


def _label_to_int(label: Label) -> int:
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
        if label < 0:
            raise ValueError(f"Stream labels must be non-negative: {label}")
        return int(label)
    digest = hashlib.sha256(str(label).encode('utf-8')).digest()
    return int.from_bytes(digest[:4], 'little')


def seed_sequence(root_seed: int, *labels: Label) -> np.random.SeedSequence:
    """Build the SeedSequence for a labelled stream.

    Args:
        root_seed: Experiment root seed
        *labels: Stream path, e.g. ``('phase1', 'generation', 3)``

    Returns:
        SeedSequence keyed by the root seed and the label path
    """
    return np.random.SeedSequence(
        entropy=int(root_seed),
        spawn_key=tuple(_label_to_int(label) for label in labels),
    )


def stream(root_seed: int, *labels: Label) -> np.random.Generator:
    """Return an independent generator for a labelled stream."""
    return np.random.Generator(np.random.PCG64(seed_sequence(root_seed, *labels)))


def child_seed(root_seed: int, *labels: Label) -> int:
    """Derive a 63-bit integer seed for a labelled stream (for records and replay)."""
    state = seed_sequence(root_seed, *labels).generate_state(1, dtype=np.uint64)[0]
    return int(state) >> 1
