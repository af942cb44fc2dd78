"""Shared fixtures."""

import numpy as np
import pytest

from mod.world import Obstacle, WorldLayout, WorldSpec, empty_world


@pytest.fixture
def layout():
    return WorldLayout()


@pytest.fixture
def open_world(layout):
    """Default arena and goal, no obstacles."""
    return empty_world(layout)


@pytest.fixture
def blocked_world(layout):
    """One obstacle on the straight line from start to goal."""
    return WorldSpec(layout.arena_bounds, layout.goal_center, layout.goal_radius,
                     (Obstacle(center=(5.0, 0.0), radius=0.5),))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
