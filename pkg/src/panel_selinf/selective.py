"""Selective tests for the difference between two k-means groups.

The stacked coefficient vector B (N blocks of length p) is moved along a single
direction so that the test statistic takes the value ``phi`` while everything
orthogonal to the contrast stays fixed. Every distance that k-means compared is
a quadratic in ``phi``, so the set of ``phi`` that reproduces the observed
trajectory is an intersection of quadratic sublevel sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .distributions import (
    FoldedNormal,
    TruncatedLaw,
    WeightedChiSq,
    truncated_survival,
)
from .errors import (
    DegenerateDirection,
    InputError,
    InvalidPair,
    ObservedStatExcluded,
    SingularCovariance,
)
from .intervals import (
    BOUNDARY_SLACK,
    IntervalUnion,
    clip_nonnegative,
    contains,
    solve_quadratic_leq,
    solve_quadratic_system_leq,
)
from .kmeans import ClusterRun, kmeans_from_init, weighted_means
from .panel import COND_LIMIT, GroupEstimates, group_weights

__all__ = [
    "Contrast",
    "PerturbationPath",
    "SelectiveTestResult",
    "build_contrast",
    "perturbation_path",
    "perturb",
    "lemma1_coeffs",
    "lemma2_coeffs",
    "quadratic_coeffs",
    "truncation_set",
    "recluster_matches",
    "selective_test",
    "selective_test_covariate",
    "selective_test_gmm",
    "naive_wald",
    "reference_lambdas",
    "DEGENERATE_PHI",
    "EIG_CUTOFF",
]

DEGENERATE_PHI = 1e-12
EIG_CUTOFF = 1e-12


@dataclass(frozen=True, eq=False)
class Contrast:
    """Contrast between groups ``k`` and ``k2`` (0-based).

    ``blocks[i]`` is the p x p slice of theta belonging to unit i, equal to
    ``v_i * w_i'`` so that ``theta' B = sum_i v_i w_i beta_i``.
    """

    pair: tuple[int, int]
    v: np.ndarray
    blocks: np.ndarray
    R: np.ndarray
    gram_theta: np.ndarray
    diff: np.ndarray

    @property
    def theta(self) -> np.ndarray:
        N, p, _ = self.blocks.shape
        return self.blocks.reshape(N * p, p)

    def apply(self, B: np.ndarray) -> np.ndarray:
        """``theta' B`` for stacked (N*p,) or blocked (N, p) input."""
        B = np.asarray(B, dtype=float).reshape(self.blocks.shape[0], -1)
        return np.einsum("nij,ni->j", self.blocks, B)


@dataclass(frozen=True, eq=False)
class PerturbationPath:
    """``B(phi) = B_hat + direction * (phi - observed)``."""

    direction: np.ndarray
    observed: float
    target: str = "all"
    covariate: Optional[int] = None

    def at(self, betas: np.ndarray, phi: float) -> np.ndarray:
        return betas + self.direction * (phi - self.observed)


@dataclass(frozen=True, eq=False)
class SelectiveTestResult:
    statistic: float
    truncation: IntervalUnion
    p_selective: float
    p_naive: float
    wald_stat: float
    pair: tuple[int, int]
    method: str = "ls"
    target: str = "all"
    covariate: Optional[int] = None
    lambdas: Optional[tuple[float, ...]] = None
    variance: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "statistic": self.statistic,
            "lambdas": None if self.lambdas is None else list(self.lambdas),
            "variance": self.variance,
            "truncation": self.truncation.to_json(),
            "p_selective": self.p_selective,
            "p_naive": self.p_naive,
            "wald_stat": self.wald_stat,
            "metadata": {
                "method": self.method,
                "target": "all" if self.target == "all" else f"covariate {self.covariate + 1}",
                "pair": [self.pair[0] + 1, self.pair[1] + 1],
                **self.metadata,
            },
        }


# -- contrast and path -------------------------------------------------------


def _weights_of(run: ClusterRun) -> np.ndarray:
    if run.estimates is not None:
        return run.estimates.weights
    return group_weights(run.grams, run.labels, run.K)[0]


def _alpha_of(run: ClusterRun) -> np.ndarray:
    if run.estimates is not None:
        return run.estimates.alpha
    return weighted_means(run.betas, run.grams, run.labels, run.K)


def build_contrast(run: ClusterRun, k: int, k2: int) -> Contrast:
    K = run.K
    if not (0 <= k < K and 0 <= k2 < K) or k == k2:
        raise InvalidPair(f"invalid group pair ({k + 1}, {k2 + 1}) for K={K}")
    labels = run.labels
    sizes = np.bincount(labels, minlength=K)
    if sizes[k] == 0 or sizes[k2] == 0:
        raise InvalidPair("both groups of the pair must be non-empty")
    N, p = run.betas.shape
    v = (labels == k).astype(float) - (labels == k2).astype(float)
    w = _weights_of(run)
    blocks = v[:, None, None] * np.transpose(w, (0, 2, 1))
    gram_theta = np.einsum("nij,nik->jk", blocks, blocks)
    gram_theta = 0.5 * (gram_theta + gram_theta.T)
    R = np.zeros((p, K * p))
    R[:, k * p:(k + 1) * p] = np.eye(p)
    R[:, k2 * p:(k2 + 1) * p] = -np.eye(p)
    alpha = _alpha_of(run)
    diff = alpha[k] - alpha[k2]
    tb = np.einsum("nij,ni->j", blocks, run.betas)
    if np.max(np.abs(tb - diff)) > 1e-8 * max(1.0, float(np.max(np.abs(alpha)))):
        raise InvalidPair("contrast does not reproduce the group difference")
    return Contrast(pair=(k, k2), v=v, blocks=blocks, R=R, gram_theta=gram_theta, diff=tb)


def perturbation_path(contrast: Contrast, covariate: int | None = None) -> PerturbationPath:
    """Direction and observed statistic for the joint test or a single covariate (0-based)."""
    blocks = contrast.blocks
    G = contrast.gram_theta
    d = contrast.diff
    if covariate is None:
        if np.linalg.cond(G) > COND_LIMIT:
            raise DegenerateDirection("theta'theta is singular")
        sol = np.linalg.solve(G, d)
        phi = math.sqrt(max(float(d @ sol), 0.0))
        if phi < DEGENERATE_PHI:
            raise DegenerateDirection(f"observed statistic {phi:.3g} is numerically zero")
        direction = np.einsum("nij,j->ni", blocks, sol) / phi
        return PerturbationPath(direction=direction, observed=phi, target="all")
    j = int(covariate)
    p = d.shape[0]
    if not 0 <= j < p:
        raise InputError(f"covariate index {j + 1} out of range 1..{p}")
    phi = abs(float(d[j]))
    if phi < DEGENERATE_PHI:
        raise DegenerateDirection(f"observed statistic {phi:.3g} is numerically zero")
    col = blocks[:, :, j]
    direction = math.copysign(1.0, float(d[j])) * col / G[j, j]
    return PerturbationPath(direction=direction, observed=phi, target="covariate", covariate=j)


def perturb(bhat: np.ndarray, contrast: Contrast, phi: float, covariate: int | None = None) -> np.ndarray:
    """Stacked ``B(phi)``; blocks of units outside the pair are returned unchanged."""
    bhat = np.asarray(bhat, dtype=float)
    N = contrast.blocks.shape[0]
    B = bhat.reshape(N, -1)
    if phi < 0:
        raise InputError("phi must be non-negative")
    path = perturbation_path(contrast, covariate)
    return path.at(B, float(phi)).reshape(bhat.shape)


# -- quadratic coefficients --------------------------------------------------


def quadratic_coeffs(Q: np.ndarray, e: np.ndarray, d: np.ndarray, phi_obs: float):
    """Coefficients of ``|| e + d (phi - phi_obs) ||^2_Q`` as a polynomial in phi.

    Works on stacked inputs: ``Q`` (..., p, p), ``e`` and ``d`` (..., p).
    """
    c = e - d * phi_obs
    Qd = np.einsum("...ij,...j->...i", Q, d)
    a = np.einsum("...i,...i->...", d, Qd)
    b = 2.0 * np.einsum("...i,...i->...", c, Qd)
    g = np.einsum("...i,...ij,...j->...", c, Q, c)
    return a, b, g


def _centroid_directions(run: ClusterRun, u: np.ndarray) -> list[np.ndarray]:
    """How each step's centroids move along the path (same linear rules as k-means)."""
    out = [u[run.init_indices].copy()]
    reseed_by_step: dict[int, list] = {}
    for ev in run.reseeds:
        reseed_by_step.setdefault(ev.step, []).append(ev)
    for s in range(1, len(run.trace)):
        du = weighted_means(u, run.grams, run.trace[s - 1], run.K)
        for ev in reseed_by_step.get(s, []):
            du[ev.group] = u[ev.unit]
        out.append(du)
    return out


def lemma1_coeffs(i: int, i2: int, contrast: Contrast, run: ClusterRun,
                  covariate: int | None = None, path: PerturbationPath | None = None):
    """``||beta_i(phi) - beta_i2(phi)||^2_{Q_i} = a phi^2 + b phi + g``."""
    path = path or perturbation_path(contrast, covariate)
    u = path.direction
    e = run.betas[i] - run.betas[i2]
    d = u[i] - u[i2]
    a, b, g = quadratic_coeffs(run.grams[i], e, d, path.observed)
    return float(a), float(b), float(g)


def lemma2_coeffs(i: int, k: int, s: int, contrast: Contrast, run: ClusterRun,
                  covariate: int | None = None, path: PerturbationPath | None = None):
    """Distance from unit i to the step-``s`` centroid of group k along the path (s >= 1)."""
    if not 1 <= s <= run.iterations:
        raise InputError(f"step {s} outside 1..{run.iterations}")
    path = path or perturbation_path(contrast, covariate)
    du = _centroid_directions(run, path.direction)[s]
    e = run.betas[i] - run.centroids_trace[s][k]
    d = path.direction[i] - du[k]
    a, b, g = quadratic_coeffs(run.grams[i], e, d, path.observed)
    return float(a), float(b), float(g)


def _constraints(run: ClusterRun, path: PerturbationPath):
    """All winner-minus-candidate quadratics, with (s, i, k) labels."""
    u = path.direction
    phi = path.observed
    betas, grams = run.betas, run.grams
    dirs = _centroid_directions(run, u)
    K = run.K
    A, B, C, tags = [], [], [], []
    rows = np.arange(run.N)
    for s, (labels, cent) in enumerate(zip(run.trace, run.centroids_trace)):
        E = betas[:, None, :] - cent[None, :, :]
        D = u[:, None, :] - dirs[s][None, :, :]
        a, b, g = quadratic_coeffs(grams[:, None, :, :], E, D, phi)
        for k in range(K):
            mask = labels != k
            idx = rows[mask]
            w = labels[mask]
            A.append(a[idx, w] - a[idx, k])
            B.append(b[idx, w] - b[idx, k])
            C.append(g[idx, w] - g[idx, k])
            tags.extend((s, int(i), k) for i in idx)
    for ev in run.reseeds:
        s = ev.step
        prev = run.trace[s - 1]
        cand = np.array([i for i in ev.candidates if i != ev.unit], dtype=int)
        if cand.size == 0:
            continue
        E = betas - run.centroids_trace[s][prev]
        D = u - dirs[s][prev]
        a, b, g = quadratic_coeffs(grams, E, D, phi)
        j = ev.unit
        A.append(a[cand] - a[j])
        B.append(b[cand] - b[j])
        C.append(g[cand] - g[j])
        tags.extend(("reseed", s, int(i), ev.group) for i in cand)
    if not A:
        z = np.zeros(0)
        return z, z, z, tags
    return np.concatenate(A), np.concatenate(B), np.concatenate(C), tags


def truncation_set(run: ClusterRun, contrast: Contrast, covariate: int | None = None,
                   path: PerturbationPath | None = None) -> IntervalUnion:
    """Values phi >= 0 for which re-running k-means on B(phi) from the same initial
    units reproduces every assignment of the observed trace."""
    path = path or perturbation_path(contrast, covariate)
    a, b, c = _constraints(run, path)[:3]
    S = clip_nonnegative(solve_quadratic_system_leq(a, b, c))
    if not contains(S, path.observed, BOUNDARY_SLACK):
        _, _, _, tags = _constraints(run, path)
        for n in range(a.size):
            if not contains(solve_quadratic_leq(a[n], b[n], c[n]), path.observed, BOUNDARY_SLACK):
                raise ObservedStatExcluded(
                    f"observed statistic {path.observed!r} violates constraint {tags[n]}",
                    triple=tags[n],
                )
        raise ObservedStatExcluded(f"observed statistic {path.observed!r} not in {S!r}")
    return S


def recluster_matches(run: ClusterRun, contrast: Contrast, phi: float,
                      covariate: int | None = None) -> bool:
    """Brute force: does k-means on B(phi) from the same initial units reproduce the trace?"""
    path = perturbation_path(contrast, covariate)
    Bphi = path.at(run.betas, phi)
    rerun = kmeans_from_init(Bphi, run.grams, run.init_indices, s_max=run.s_max)
    if len(rerun.trace) != len(run.trace):
        return False
    return all(np.array_equal(x, y) for x, y in zip(rerun.trace, run.trace))


# -- tests -------------------------------------------------------------------


def _pair_cov(sigma: np.ndarray, contrast: Contrast) -> np.ndarray:
    V = contrast.R @ sigma @ contrast.R.T
    return 0.5 * (V + V.T)


def _sigma_of(run: ClusterRun, sigma) -> np.ndarray:
    if sigma is not None:
        return np.asarray(sigma, dtype=float)
    if run.estimates is None or run.estimates.sigma is None:
        raise InputError("no covariance available: pass sigma or fit with a cov_type")
    return run.estimates.sigma


def reference_lambdas(pair_cov: np.ndarray, gram_theta: np.ndarray) -> np.ndarray:
    """Eigenvalues of ``V^{1/2} (theta'theta)^{-1} V^{1/2}`` with tiny ones dropped."""
    ev, evec = np.linalg.eigh(pair_cov)
    ev = np.clip(ev, 0.0, None)
    root = (evec * np.sqrt(ev)) @ evec.T
    M = root @ np.linalg.solve(gram_theta, root)
    lam = np.linalg.eigvalsh(0.5 * (M + M.T))
    top = lam.max(initial=0.0)
    if top <= 0:
        raise SingularCovariance("reference law is degenerate (all eigenvalues zero)")
    return lam[lam >= EIG_CUTOFF * top]


def naive_wald(estimates: GroupEstimates, k: int, k2: int, sigma: np.ndarray | None = None,
               covariate: int | None = None) -> tuple[float, float]:
    """Classical Wald statistic for alpha_k = alpha_k2 and its chi-square p-value."""
    sigma = estimates.sigma if sigma is None else np.asarray(sigma, dtype=float)
    if sigma is None:
        raise InputError("no covariance available")
    p = estimates.p
    d = estimates.alpha[k] - estimates.alpha[k2]
    V = sigma[k * p:(k + 1) * p, k * p:(k + 1) * p] + sigma[k2 * p:(k2 + 1) * p, k2 * p:(k2 + 1) * p]
    if k == k2:
        raise InvalidPair("pair must consist of two different groups")
    if covariate is not None:
        var = float(V[covariate, covariate])
        if not var > 0:
            raise SingularCovariance("variance of the covariate difference is zero")
        W = float(d[covariate] ** 2 / var)
        return W, float(stats.chi2.sf(W, 1))
    if not np.all(np.isfinite(V)) or np.linalg.cond(V) > COND_LIMIT:
        raise SingularCovariance("R Sigma R' is singular")
    if not np.any(d):
        return 0.0, 1.0
    W = float(d @ np.linalg.solve(V, d))
    return W, float(stats.chi2.sf(W, p))


def selective_test(run: ClusterRun, k: int, k2: int, sigma: np.ndarray | None = None) -> SelectiveTestResult:
    """Joint test of equal slopes between two selected groups (labels 0-based)."""
    sigma = _sigma_of(run, sigma)
    contrast = build_contrast(run, k, k2)
    path = perturbation_path(contrast)
    S = truncation_set(run, contrast, path=path)
    V = _pair_cov(sigma, contrast)
    lam = reference_lambdas(V, contrast.gram_theta)
    law = TruncatedLaw(WeightedChiSq(tuple(lam)), S)
    p_sel = truncated_survival(path.observed, law)
    W, p_naive = naive_wald(_estimates_with(run, sigma), k, k2)
    return SelectiveTestResult(
        statistic=path.observed, truncation=S, p_selective=p_sel, p_naive=p_naive,
        wald_stat=W, pair=(k, k2), method=run.method, target="all",
        lambdas=tuple(float(x) for x in lam),
        metadata={"iterations": run.iterations, "converged": run.converged, "seed": run.seed},
    )


def selective_test_covariate(run: ClusterRun, k: int, k2: int, j: int,
                             sigma: np.ndarray | None = None) -> SelectiveTestResult:
    """Test of equal slope on covariate ``j`` (0-based) between two selected groups."""
    sigma = _sigma_of(run, sigma)
    contrast = build_contrast(run, k, k2)
    path = perturbation_path(contrast, covariate=j)
    S = truncation_set(run, contrast, path=path)
    V = _pair_cov(sigma, contrast)
    var = float(V[j, j])
    if not var > 0:
        raise SingularCovariance("variance of the covariate difference is zero")
    law = TruncatedLaw(FoldedNormal(var), S)
    p_sel = truncated_survival(path.observed, law)
    W, p_naive = naive_wald(_estimates_with(run, sigma), k, k2, covariate=j)
    return SelectiveTestResult(
        statistic=path.observed, truncation=S, p_selective=p_sel, p_naive=p_naive,
        wald_stat=W, pair=(k, k2), method=run.method, target="covariate", covariate=j,
        variance=var,
        metadata={"iterations": run.iterations, "converged": run.converged, "seed": run.seed},
    )


def selective_test_gmm(run_gmm: ClusterRun, k: int, k2: int, sigma_gmm: np.ndarray | None = None,
                       covariate: int | None = None) -> SelectiveTestResult:
    """Same pipeline for a run built from GMM fits (their Gram matrices define the metric)."""
    if run_gmm.method != "gmm":
        raise InputError("run was not built from GMM fits")
    if covariate is not None:
        return selective_test_covariate(run_gmm, k, k2, covariate, sigma_gmm)
    return selective_test(run_gmm, k, k2, sigma_gmm)


def _estimates_with(run: ClusterRun, sigma: np.ndarray) -> GroupEstimates:
    return GroupEstimates(alpha=_alpha_of(run), weights=_weights_of(run), sigma=sigma)
