from __future__ import annotations

import numpy as np
import pytest

from panel_selinf.kmeans import init_centroids, kmeans_from_init


def random_instance(rng: np.random.Generator, N: int, K: int, p: int, spread: float = 2.0):
    """Clustered betas with random SPD grams."""
    centers = rng.normal(0, spread, (K, p))
    lab = rng.integers(0, K, N)
    betas = centers[lab] + rng.normal(0, 1, (N, p))
    A = rng.normal(size=(N, p, p))
    grams = A @ A.transpose(0, 2, 1) + 0.5 * np.eye(p)
    return betas, grams


def random_run(rng: np.random.Generator, N: int, K: int, p: int, seed: int, spread: float = 2.0):
    """k-means run on a random instance; None when the final partition has an empty group."""
    betas, grams = random_instance(rng, N, K, p, spread)
    run = kmeans_from_init(betas, grams, init_centroids(N, K, seed))
    if np.bincount(run.labels, minlength=K).min() == 0:
        return None
    return run


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.report_lines():
        terminalreporter.write_line(line)
