"""Synthetic panels with three latent groups and Monte Carlo experiment runners."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import DegenerateDirection, InvalidSpec
from .kmeans import S_MAX_DEFAULT, run_kmeans
from .panel import GroupPartition, PanelDataset, fit_individuals, group_estimate
from .selective import naive_wald, selective_test, selective_test_covariate

__all__ = [
    "DgpSpec",
    "Replication",
    "ExperimentReport",
    "true_alpha",
    "dgp_generate",
    "run_replication",
    "run_size_experiment",
    "run_power_experiment",
    "run_fixed_partition_experiment",
    "ks_uniform",
    "ks_critical",
    "qq_data",
]

_DEFAULT_P = {1: 2, 2: 2, 3: 2, 4: 3, 5: 4, 6: 6}


@dataclass(frozen=True)
class DgpSpec:
    id: int
    N: int = 60
    T: int = 15
    delta: float = 0.0
    kappa: float = 0.0
    p: Optional[int] = None
    seed: int = 0
    noiseless: bool = False

    def __post_init__(self):
        if self.id not in _DEFAULT_P:
            raise InvalidSpec(f"unknown DGP {self.id!r}; expected 1..6")
        p = self.p if self.p is not None else _DEFAULT_P[self.id]
        if self.id in (5, 6):
            if p < 2 or p % 2:
                raise InvalidSpec("DGP 5/6 need an even number of regressors")
        elif p != _DEFAULT_P[self.id]:
            raise InvalidSpec(f"DGP {self.id} has exactly {_DEFAULT_P[self.id]} regressors")
        object.__setattr__(self, "p", p)
        if self.N < 3 or self.N % 3:
            raise InvalidSpec("N must be a positive multiple of 3")
        if self.T < p + 2:
            raise InvalidSpec(f"T must be at least p + 2 = {p + 2}")
        if self.delta < 0 or self.kappa < 0:
            raise InvalidSpec("delta and kappa must be non-negative")
        if self.id == 4 and self.kappa >= 0.4:
            raise InvalidSpec("kappa must stay below 0.4 to keep the AR coefficient inside (-1, 1)")
        if self.id != 4 and self.kappa:
            raise InvalidSpec("kappa only applies to DGP 4")

    @property
    def true_labels(self) -> np.ndarray:
        return np.repeat(np.arange(3), self.N // 3)


def true_alpha(spec: DgpSpec) -> np.ndarray:
    d, r3 = spec.delta, math.sqrt(3.0)
    if spec.id in (1, 2, 3):
        return np.array([[1 - d, 1.0], [1.0, 1 + r3 * d], [1 + d, 1.0]])
    if spec.id == 4:
        k = spec.kappa
        return np.array([[0.6 - k, 1 - d, 1.0], [0.6, 1.0, 1 + r3 * d], [0.6 + k, 1 + d, 1.0]])
    h = spec.p // 2
    one = np.ones(h)
    return np.array([
        np.r_[(1 - d) * one, one],
        np.r_[one, (1 + d) * one],
        np.r_[(1 + d) * one, one],
    ])


def _errors(spec: DgpSpec, rng: np.random.Generator, shape) -> np.ndarray:
    if spec.noiseless:
        return np.zeros(shape)
    if spec.id == 2:
        return rng.standard_t(3, size=shape) / math.sqrt(3.0)
    if spec.id == 3:
        return (rng.chisquare(3, size=shape) - 3.0) / math.sqrt(6.0)
    return rng.standard_normal(shape)


def dgp_generate(spec: DgpSpec) -> PanelDataset:
    """Draw one panel; true group labels are stored in ``meta['true_labels']``."""
    rng = np.random.default_rng(spec.seed)
    N, T, p = spec.N, spec.T, spec.p
    labels = spec.true_labels
    beta = true_alpha(spec)[labels]
    eta = rng.standard_normal(N)
    units = tuple(str(i + 1) for i in range(N))
    meta = {"true_labels": labels, "dgp": spec.id, "true_beta": beta}
    if spec.id != 4:
        e = rng.standard_normal((N, T, p))
        X = 0.2 * eta[:, None, None] + e
        u = _errors(spec, rng, (N, T))
        y = np.einsum("ntp,np->nt", X, beta) + eta[:, None] + u
        return PanelDataset(units=units, times=np.arange(1, T + 1), y=y, X=X, meta=meta)

    # dynamic panel: simulate from t = -2 so that rows t = 0..T carry the
    # lagged regressor and, from t = 1 on, both instrument lags
    H = T + 3
    x = rng.standard_normal((N, H, 2))
    u = _errors(spec, rng, (N, H))
    b1, b2, b3 = beta[:, 0], beta[:, 1], beta[:, 2]
    ys = np.empty((N, H))
    ys[:, 0] = b2 * x[:, 0, 0] + b3 * x[:, 0, 1] + eta + u[:, 0]
    for t in range(1, H):
        ys[:, t] = (b1 * ys[:, t - 1] + b2 * x[:, t, 0] + b3 * x[:, t, 1]
                    + eta * (1 - b1) + u[:, t])
    rows = np.arange(2, H)  # t = 0..T
    y = ys[:, rows]
    X = np.stack([ys[:, rows - 1], x[:, rows, 0], x[:, rows, 1]], axis=2)
    lag3 = np.where(rows - 3 >= 0, ys[:, np.maximum(rows - 3, 0)], 0.0)
    dx = x[:, rows, :] - x[:, rows - 1, :]
    Z = np.stack([ys[:, rows - 2], lag3, dx[:, :, 0], dx[:, :, 1]], axis=2)
    return PanelDataset(units=units, times=np.arange(0, T + 1), y=y, X=X, Z=Z, meta=meta)


# -- experiments -------------------------------------------------------------


@dataclass
class Replication:
    index: int
    seed: int
    pair: tuple[int, int]
    covariate: Optional[int]
    recovered: bool
    p_selective: Optional[float]
    p_naive: Optional[float]
    wald_stat: Optional[float] = None
    statistic: Optional[float] = None
    converged: bool = True
    iterations: int = 0
    error: Optional[str] = None


@dataclass
class ExperimentReport:
    pvalues: list[float]
    naive_pvalues: list[float]
    ks_stat: float
    conditional_power: Optional[float]
    recovery_probability: float
    rejections: int
    M: int
    alpha: float = 0.05
    excluded: int = 0
    not_converged: int = 0
    replications: list[Replication] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    @property
    def recovered(self) -> int:
        return sum(r.recovered for r in self.replications)

    def summary(self) -> dict:
        naive = np.asarray(self.naive_pvalues, dtype=float)
        return {
            **self.settings,
            "M": self.M,
            "alpha": self.alpha,
            "used": len(self.pvalues),
            "excluded": self.excluded,
            "not_converged": self.not_converged,
            "ks_stat": self.ks_stat,
            "ks_critical_1pct": ks_critical(len(self.pvalues)) if self.pvalues else None,
            "recovery_probability": self.recovery_probability,
            "recovered": self.recovered,
            "conditional_power": self.conditional_power,
            "rejections": self.rejections,
            "median_p_selective": float(np.median(self.pvalues)) if self.pvalues else None,
            "median_p_naive": float(np.median(naive)) if naive.size else None,
            "naive_ks_stat": ks_uniform(naive) if naive.size else None,
        }

    def rows(self) -> list[dict]:
        return [
            {"seed": r.seed, "recovered": int(r.recovered), "p_selective": r.p_selective,
             "p_naive": r.p_naive}
            for r in self.replications
        ]


def ks_uniform(pvalues: Sequence[float]) -> float:
    """Kolmogorov-Smirnov distance to Uniform(0, 1)."""
    return float(stats.kstest(np.asarray(pvalues, dtype=float), "uniform").statistic)


def ks_critical(M: int, level: float = 0.01) -> float:
    """Asymptotic KS critical value (1.628 / sqrt(M) at the 1% level)."""
    c = float(stats.kstwobign.isf(level))
    return c / math.sqrt(M)


def qq_data(pvalues: Sequence[float]) -> list[tuple[float, float]]:
    p = np.sort(np.asarray(pvalues, dtype=float))
    if p.size == 0:
        raise ValueError("need at least one p-value")
    M = p.size
    return [((i + 1) / (M + 1), float(v)) for i, v in enumerate(p)]


def _is_true_group(members: np.ndarray, true_labels: np.ndarray) -> bool:
    if members.size == 0:
        return False
    lab = true_labels[members[0]]
    return bool(np.array_equal(np.sort(members), np.flatnonzero(true_labels == lab)))


def _draws(spec: DgpSpec, K: int, M: int, target: str) -> list[tuple[tuple[int, int], Optional[int]]]:
    """Per-replication pair and covariate choices from the experiment stream."""
    rng = np.random.default_rng([spec.seed, 7919])
    out = []
    for _ in range(M):
        if K == 2:
            pair = (0, 1)
        else:
            a, b = rng.choice(K, size=2, replace=False)
            pair = (int(min(a, b)), int(max(a, b)))
        cov = int(rng.integers(spec.p)) if target == "covariate" else None
        out.append((pair, cov))
    return out


def run_replication(spec: DgpSpec, index: int, K: int, pair: tuple[int, int],
                    covariate: int | None = None, method: str = "ls",
                    s_max: int = S_MAX_DEFAULT, cov_type: str = "unit") -> Replication:
    seed = spec.seed + index
    data = dgp_generate(replace(spec, seed=seed))
    fits = fit_individuals(data, method=method)
    run = run_kmeans(fits, K, seed=seed, s_max=s_max, cov_type=cov_type)
    labels = run.labels
    truth = data.meta["true_labels"]
    k, k2 = pair
    recovered = (_is_true_group(np.flatnonzero(labels == k), truth)
                 and _is_true_group(np.flatnonzero(labels == k2), truth))
    rep = Replication(index=index, seed=seed, pair=pair, covariate=covariate, recovered=recovered,
                      p_selective=None, p_naive=None, converged=run.converged,
                      iterations=run.iterations)
    try:
        if covariate is None:
            res = selective_test(run, k, k2)
        else:
            res = selective_test_covariate(run, k, k2, covariate)
    except DegenerateDirection as exc:
        rep.error = f"DegenerateDirection: {exc}"
        return rep
    rep.p_selective = res.p_selective
    rep.p_naive = res.p_naive
    rep.wald_stat = res.wald_stat
    rep.statistic = res.statistic
    return rep


def _worker_count(workers: int | None) -> int:
    cap = os.environ.get("PANEL_SELINF_THREADS")
    n = workers if workers is not None else 1
    if cap:
        try:
            n = min(n, max(1, int(cap))) if workers is not None else max(1, int(cap))
        except ValueError:
            pass
    return max(1, n)


def _run_all(spec, K, M, method, target, s_max, cov_type, workers) -> list[Replication]:
    choices = _draws(spec, K, M, target)

    def one(r: int) -> Replication:
        pair, cov = choices[r]
        return run_replication(spec, r, K, pair, cov, method=method, s_max=s_max, cov_type=cov_type)

    n = _worker_count(workers)
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(one, range(M)))
    return [one(r) for r in range(M)]


def _report(reps: list[Replication], M: int, alpha: float, settings: dict) -> ExperimentReport:
    ok = [r for r in reps if r.p_selective is not None]
    pvals = [r.p_selective for r in ok]
    naive = [r.p_naive for r in ok]
    rec = [r for r in ok if r.recovered]
    rejections = sum(r.p_selective <= alpha for r in rec)
    power = rejections / len(rec) if rec else None
    return ExperimentReport(
        pvalues=pvals,
        naive_pvalues=naive,
        ks_stat=ks_uniform(pvals) if pvals else math.nan,
        conditional_power=power,
        recovery_probability=sum(r.recovered for r in reps) / M if M else 0.0,
        rejections=rejections,
        M=M,
        alpha=alpha,
        excluded=len(reps) - len(ok),
        not_converged=sum(not r.converged for r in reps),
        replications=reps,
        settings=settings,
    )


def _settings(spec: DgpSpec, K, method, target, cov_type) -> dict:
    d = asdict(spec)
    d.pop("noiseless", None)
    return {"dgp": d, "K": K, "method": method, "target": target, "cov_type": cov_type}


def run_size_experiment(spec: DgpSpec, K: int = 2, M: int = 1000, method: str = "ls",
                        target: str = "all", alpha: float = 0.05, s_max: int = S_MAX_DEFAULT,
                        cov_type: str = "unit", workers: int | None = None) -> ExperimentReport:
    """Selective and naive p-values under a null DGP (``delta = kappa = 0``)."""
    if M < 100:
        raise InvalidSpec("size experiments need M >= 100")
    if spec.delta != 0 or spec.kappa != 0:
        raise InvalidSpec("size experiments need delta = kappa = 0")
    reps = _run_all(spec, K, M, method, target, s_max, cov_type, workers)
    return _report(reps, M, alpha, _settings(spec, K, method, target, cov_type))


def run_power_experiment(spec: DgpSpec, K: int = 3, M: int = 300, alpha: float = 0.05,
                         method: str = "ls", target: str = "all", s_max: int = S_MAX_DEFAULT,
                         cov_type: str = "unit", workers: int | None = None) -> ExperimentReport:
    """Recovery probability and power conditional on recovering the tested pair."""
    if spec.delta <= 0 and spec.kappa <= 0:
        raise InvalidSpec("power experiments need delta > 0 (or kappa > 0)")
    reps = _run_all(spec, K, M, method, target, s_max, cov_type, workers)
    return _report(reps, M, alpha, _settings(spec, K, method, target, cov_type))


def run_fixed_partition_experiment(spec: DgpSpec, M: int = 1000, share: float = 0.4,
                                   method: str = "ls", cov_type: str = "unit") -> list[float]:
    """Wald p-values for a split fixed before seeing the data (first ``share`` of units)."""
    pvals = []
    n1 = int(round(share * spec.N))
    if not 0 < n1 < spec.N:
        raise InvalidSpec("share must leave both groups non-empty")
    labels = np.r_[np.zeros(n1, dtype=int), np.ones(spec.N - n1, dtype=int)]
    part = GroupPartition(labels, 2)
    for r in range(M):
        data = dgp_generate(replace(spec, seed=spec.seed + r))
        fits = fit_individuals(data, method=method)
        est = group_estimate(fits, part, cov_type=cov_type)
        pvals.append(naive_wald(est, 0, 1)[1])
    return pvals
