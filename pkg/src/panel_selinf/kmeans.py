"""Matrix-weighted k-means over unit-level coefficient vectors, with a full trace."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError, KTooLarge, NumericalError
from .panel import (
    GroupEstimates,
    GroupPartition,
    IndividualFit,
    group_estimate,
    group_weights,
    stack_fits,
)

__all__ = [
    "ClusterRun",
    "ReseedEvent",
    "init_centroids",
    "assign",
    "weighted_distances",
    "update_centroids",
    "weighted_means",
    "run_kmeans",
    "kmeans_from_init",
    "objective",
    "S_MAX_DEFAULT",
]

S_MAX_DEFAULT = 100


@dataclass(frozen=True)
class ReseedEvent:
    """Centroid ``group`` of step ``step`` had no members and was moved onto ``unit``.

    ``candidates`` are the units that were eligible (not already used by an
    earlier reseed in the same step).
    """

    step: int
    group: int
    unit: int
    candidates: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class ClusterRun:
    """Everything needed to replay a k-means trajectory.

    ``trace[s]`` holds the labels g^(s) and ``centroids_trace[s]`` the
    centroids they were assigned to. Labels are 0-based.
    """

    seed: int | None
    init_indices: np.ndarray
    trace: list[np.ndarray]
    centroids_trace: list[np.ndarray]
    betas: np.ndarray
    grams: np.ndarray
    K: int
    s_max: int
    converged: bool
    objective: list[float]
    reseeds: list[ReseedEvent] = field(default_factory=list)
    estimates: GroupEstimates | None = None
    method: str = "ls"

    @property
    def N(self) -> int:
        return self.betas.shape[0]

    @property
    def p(self) -> int:
        return self.betas.shape[1]

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1

    @property
    def labels(self) -> np.ndarray:
        return self.trace[-1]

    @property
    def final(self) -> GroupPartition:
        return GroupPartition(self.trace[-1], self.K)

    def to_json(self) -> dict:
        """JSON-ready audit record; group labels are reported 1-based."""
        out = {
            "seed": self.seed,
            "K": self.K,
            "method": self.method,
            "init_indices": [int(i) for i in self.init_indices],
            "iterations": self.iterations,
            "converged": self.converged,
            "trace": [(t + 1).tolist() for t in self.trace],
            "labels": (self.trace[-1] + 1).tolist(),
            "objective": list(self.objective),
            "reseeds": [
                {"step": e.step, "group": e.group + 1, "unit": e.unit} for e in self.reseeds
            ],
        }
        if self.estimates is not None:
            out["alpha"] = self.estimates.alpha.tolist()
        return out


def init_centroids(fits_or_n, K: int, seed: int | None) -> np.ndarray:
    """K distinct unit indices drawn without replacement from ``default_rng(seed)``."""
    N = fits_or_n if isinstance(fits_or_n, (int, np.integer)) else len(fits_or_n)
    if K < 1:
        raise InputError("K must be at least 1")
    if K > N:
        raise KTooLarge(f"K exceeds N ({K} > {N})")
    rng = np.random.default_rng(seed)
    return rng.choice(N, size=K, replace=False)


def weighted_distances(betas: np.ndarray, grams: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(N, K) matrix of ``(b_i - m_k)' Q_i (b_i - m_k)``."""
    D = betas[:, None, :] - centroids[None, :, :]
    return np.einsum("nkp,npq,nkq->nk", D, grams, D)


def assign(fits_or_betas, centroids, grams: np.ndarray | None = None) -> np.ndarray:
    """Nearest centroid in each unit's own metric; ties go to the smallest index."""
    if grams is None:
        betas, grams = stack_fits(fits_or_betas)
    else:
        betas = np.asarray(fits_or_betas, dtype=float)
    centroids = np.atleast_2d(np.asarray(centroids, dtype=float))
    if not np.all(np.isfinite(centroids)):
        raise InputError("centroids must be finite")
    return np.argmin(weighted_distances(betas, grams, centroids), axis=1)


def weighted_means(vectors: np.ndarray, grams: np.ndarray, labels: np.ndarray, K: int) -> np.ndarray:
    """``(sum_{G_k} Q_i)^-1 sum_{G_k} Q_i v_i`` per group; rows of empty groups are zero.

    Linear in ``vectors``, which is what lets the perturbation path reuse it.
    """
    weights, _ = group_weights(grams, labels, K)
    wv = np.einsum("nij,nj->ni", weights, vectors)
    out = np.zeros((K, vectors.shape[1]))
    np.add.at(out, labels, wv)
    return out


def update_centroids(betas: np.ndarray, grams: np.ndarray, labels: np.ndarray, K: int,
                     step: int = 0) -> tuple[np.ndarray, list[ReseedEvent]]:
    """Group-weighted centroids, reseeding empty groups.

    An empty group takes the coefficient vector of the unit farthest (in its own
    metric) from its group's new centroid; several empty groups are served in
    index order without reusing a unit.
    """
    cent = weighted_means(betas, grams, labels, K)
    sizes = np.bincount(labels, minlength=K)
    events: list[ReseedEvent] = []
    if np.all(sizes > 0):
        return cent, events
    own = cent[labels]
    diff = betas - own
    dist = np.einsum("np,npq,nq->n", diff, grams, diff)
    used: set[int] = set()
    for k in np.flatnonzero(sizes == 0):
        candidates = tuple(i for i in range(len(labels)) if i not in used)
        cand = np.array(candidates)
        j = int(cand[np.argmax(dist[cand])])
        cent[k] = betas[j]
        used.add(j)
        events.append(ReseedEvent(step=step, group=int(k), unit=j, candidates=candidates))
    return cent, events


def objective(betas: np.ndarray, grams: np.ndarray, labels: np.ndarray, K: int) -> float:
    """Pooled weighted SSE around the group estimates implied by ``labels``."""
    cent = weighted_means(betas, grams, labels, K)
    d = betas - cent[labels]
    return float(np.einsum("np,npq,nq->", d, grams, d))


def kmeans_from_init(betas: np.ndarray, grams: np.ndarray, init_indices: Sequence[int],
                     s_max: int = S_MAX_DEFAULT, seed: int | None = None,
                     method: str = "ls") -> ClusterRun:
    """Run the alternating updates from fixed initial units (no estimates attached)."""
    betas = np.asarray(betas, dtype=float)
    grams = np.asarray(grams, dtype=float)
    init = np.asarray(init_indices, dtype=int)
    K = init.size
    if s_max < 1:
        raise InputError("s_max must be at least 1")
    if len(set(init.tolist())) != K:
        raise InputError("initial indices must be distinct")
    cent = betas[init].copy()
    labels = assign(betas, cent, grams)
    trace = [labels]
    ctrace = [cent]
    objs = [objective(betas, grams, labels, K)]
    reseeds: list[ReseedEvent] = []
    converged = False
    for s in range(1, s_max + 1):
        cent, events = update_centroids(betas, grams, labels, K, step=s)
        new = assign(betas, cent, grams)
        trace.append(new)
        ctrace.append(cent)
        reseeds.extend(events)
        objs.append(objective(betas, grams, new, K))
        if np.array_equal(new, labels):
            converged = True
            break
        labels = new
    return ClusterRun(seed=seed, init_indices=init, trace=trace, centroids_trace=ctrace,
                      betas=betas, grams=grams, K=K, s_max=s_max, converged=converged,
                      objective=objs, reseeds=reseeds, method=method)


def run_kmeans(fits: Sequence[IndividualFit], K: int, seed: int | None,
               s_max: int = S_MAX_DEFAULT, cov_type: str | None = "unit") -> ClusterRun:
    """Seeded k-means over unit fits, with group estimates for the final partition."""
    init = init_centroids(fits, K, seed)
    betas, grams = stack_fits(fits)
    method = fits[0].method if fits else "ls"
    run = kmeans_from_init(betas, grams, init, s_max=s_max, seed=seed, method=method)
    final = run.trace[-1]
    if np.bincount(final, minlength=K).min() == 0:
        raise NumericalError(
            f"k-means stopped after {run.iterations} iterations with an empty group"
        )
    est = group_estimate(fits, GroupPartition(final, K), cov_type=cov_type)
    return ClusterRun(seed=run.seed, init_indices=run.init_indices, trace=run.trace,
                      centroids_trace=run.centroids_trace, betas=betas, grams=grams, K=K,
                      s_max=s_max, converged=run.converged, objective=run.objective,
                      reseeds=run.reseeds, estimates=est, method=method)
