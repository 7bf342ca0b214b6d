"""Shared builders for randomized test instances."""

import numpy as np
import pytest

from signgaze.gaze_core import DurationModel, GazeField, TransitionKernel


def random_instance(rng, n=None, n_fixations=None, feature_dim=3):
    """A random (field, kernel, n_fixations) triple with strictly positive
    affinities, sized for exact enumeration."""
    if n is None:
        n = int(rng.integers(1, 7))
    if n_fixations is None:
        n_fixations = int(rng.integers(1, n + 1))
    affinity = rng.uniform(0.05, 1.0, size=(n, n))
    pi = rng.uniform(0.05, 1.0, size=n)
    pi = pi / pi.sum()
    features = rng.normal(size=(n, feature_dim))
    gaze_field = GazeField(1, n, features)
    kernel = TransitionKernel(affinity, pi)
    return gaze_field, kernel, n_fixations


def random_durations(rng, feature_dim=3):
    """A linear duration model with random coefficients."""
    coef = rng.normal(size=feature_dim)
    intercept = float(rng.normal())
    return DurationModel(
        mu0=lambda gist, ctx: float(intercept),
        mu=lambda f: float(coef @ f),
    )


def uniform_instance(n, n_fixations, feature_dim=3):
    """Uniform initial distribution and affinities."""
    gaze_field = GazeField(1, n, np.zeros((n, feature_dim)))
    kernel = TransitionKernel(np.ones((n, n)), np.full(n, 1.0 / n))
    return gaze_field, kernel, n_fixations


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
