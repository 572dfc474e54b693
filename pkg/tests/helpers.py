"""Shared toy distributions and a replay generator for the test suite."""

import numpy as np

from data import ConditionLabel, Dataset

MIXTURE_MEANS = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
MIXTURE_WEIGHTS = np.array([0.5, 0.3, 0.2])


def mixture_samples(n, seed=0):
    rng = np.random.default_rng(seed)
    comps = rng.choice(3, size=n, p=MIXTURE_WEIGHTS)
    return MIXTURE_MEANS[comps] + rng.standard_normal((n, 2))


def three_mode_toy(n, seed=0):
    """Three well-separated 2-D Gaussian blobs."""
    rng = np.random.default_rng(seed)
    centers = np.array([[-3.0, 0.0], [3.0, 0.0], [0.0, 3.0]])
    return centers[rng.integers(3, size=n)] + 0.5 * rng.standard_normal((n, 2))


def eight_gaussians(n, seed=0, radius=4.0, std=0.4):
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * rng.integers(8, size=n) / 8
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return centers + std * rng.standard_normal((n, 2))


class ReplayModel:
    """Generator stand-in that replays real profiles for the requested label."""

    kind = "replay"

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.speed_bins = dataset.speed_bins
        self.directions = dataset.directions
        self.altitudes = dataset.altitudes
        self.calls = []

    def sample(self, condition: ConditionLabel, n, seed):
        self.calls.append((condition, n, seed))
        x = self.dataset.to_array()
        keep = np.array([condition.matches(lbl) for lbl in self.dataset.labels()], dtype=bool)
        pool = x[keep]
        if len(pool) == n:
            return pool.copy()
        rng = np.random.default_rng(seed)
        return pool[rng.integers(len(pool), size=n)]
