import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_force_radius(positions, i, r):
    """Oracle: linear-scan radius query excluding the query point."""
    d = np.linalg.norm(positions - positions[i], axis=1)
    idx = np.where(d <= r)[0]
    return np.array([j for j in idx if j != i])


def brute_force_knn(positions, i, k):
    """Oracle: linear-scan k nearest neighbors excluding the query point."""
    d = np.linalg.norm(positions - positions[i], axis=1)
    order = np.argsort(d, kind="stable")
    return np.array([j for j in order if j != i][:k])


def brute_force_average_gap(positions):
    """Oracle: O(n^2) mean of all six nearest-neighbor distances."""
    n = len(positions)
    total = 0.0
    for i in range(n):
        d = np.linalg.norm(positions - positions[i], axis=1)
        d = np.sort(d)
        total += d[1:7].sum()
    return total / (6 * n)
