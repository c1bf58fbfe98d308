"""Balanced panel container, transforms, unit-level estimators and group aggregation."""

from __future__ import annotations

import csv
import io
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateRegressor,
    InputError,
    ParseError,
    RankDeficientInstruments,
    SingularGram,
    UnbalancedPanel,
)

if TYPE_CHECKING:
    from typing import TextIO

__all__ = [
    "PanelDataset",
    "DemeanedPanel",
    "DifferencedPanel",
    "IndividualFit",
    "GroupPartition",
    "GroupEstimates",
    "load_panel",
    "panel_to_csv",
    "within_demean",
    "first_difference",
    "ols_individual",
    "gmm_individual",
    "fit_individuals",
    "group_weights",
    "group_estimate",
    "plugin_covariance",
    "COND_LIMIT",
]

COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced panel: ``y`` is (N, T), ``X`` is (N, T, p), ``Z`` is (N, T, q) or None."""

    units: tuple[str, ...]
    times: np.ndarray
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 2:
            X = X[:, :, None]
        if y.ndim != 2 or X.ndim != 3 or X.shape[:2] != y.shape:
            raise InputError(f"inconsistent shapes y{y.shape} X{X.shape}")
        if X.shape[2] < 1:
            raise InputError("at least one regressor is required")
        if len(self.units) != y.shape[0] or len(self.times) != y.shape[1]:
            raise InputError("units/times do not match array shapes")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise InputError("panel contains missing or non-finite values")
        Z = self.Z
        if Z is not None:
            Z = np.asarray(Z, dtype=float)
            if Z.ndim == 2:
                Z = Z[:, :, None]
            if Z.shape[:2] != y.shape:
                raise InputError(f"instrument shape {Z.shape} does not match y{y.shape}")
            if Z.shape[2] < X.shape[2]:
                raise InputError(f"need q >= p instruments, got q={Z.shape[2]} p={X.shape[2]}")
            if not np.all(np.isfinite(Z)):
                raise InputError("instruments contain missing or non-finite values")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "units", tuple(str(u) for u in self.units))
        object.__setattr__(self, "times", np.asarray(self.times, dtype=int))

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[2]

    @property
    def q(self) -> int:
        return 0 if self.Z is None else self.Z.shape[2]

    def subset(self, idx: Sequence[int]) -> "PanelDataset":
        idx = list(idx)
        return PanelDataset(
            units=tuple(self.units[i] for i in idx),
            times=self.times,
            y=self.y[idx],
            X=self.X[idx],
            Z=None if self.Z is None else self.Z[idx],
            meta=dict(self.meta),
        )


@dataclass(frozen=True, eq=False)
class DemeanedPanel:
    units: tuple[str, ...]
    y: np.ndarray
    X: np.ndarray


@dataclass(frozen=True, eq=False)
class DifferencedPanel:
    units: tuple[str, ...]
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray | None


@dataclass(frozen=True, eq=False)
class IndividualFit:
    """Unit-level estimate.

    ``gram`` is the weighting matrix Q_i used both for the fit and as the
    k-means metric. ``X``/``y`` keep the transformed data; for GMM ``L`` is
    the map ``G' Omega Z'`` with ``Q_i beta_i = L y``.
    """

    unit: str
    beta: np.ndarray
    gram: np.ndarray
    residuals: np.ndarray
    method: str = "ls"
    X: np.ndarray | None = None
    y: np.ndarray | None = None
    L: np.ndarray | None = None

    def score_cov(self, alpha: np.ndarray | None = None) -> np.ndarray:
        """Estimated Var(Q_i beta_i) under serially uncorrelated, homoskedastic errors.

        LS uses the unit's own residuals. GMM residuals at the unit's own
        estimate carry its (large) estimation noise, so the error variance is
        taken from residuals at ``alpha`` (the group slope) when given.
        """
        T, p = self.X.shape if self.X is not None else (self.residuals.size, self.beta.size)
        if self.method == "ls":
            dof = T - 1 - p
            if dof <= 0:
                return np.full_like(self.gram, np.nan)
            sigma2 = float(self.residuals @ self.residuals) / dof
            return sigma2 * self.gram
        if alpha is None:
            resid, dof = self.residuals, T - p
        else:
            resid, dof = self.y - self.X @ alpha, T
        if dof <= 0:
            return np.full_like(self.gram, np.nan)
        # first differences of white noise: variance 2 sigma^2, MA(1) correlation
        sigma2 = float(resid @ resid) / (2.0 * dof)
        cov = sigma2 * (self.L @ _diff_cov(T) @ self.L.T)
        return 0.5 * (cov + cov.T)

    def to_json(self) -> dict:
        return {"unit": self.unit, "beta": self.beta.tolist(), "gram": self.gram.tolist()}


@dataclass(frozen=True, eq=False)
class GroupPartition:
    labels: np.ndarray
    K: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        object.__setattr__(self, "labels", labels)
        if self.K < 1:
            raise InputError("K must be positive")
        if labels.ndim != 1 or labels.min(initial=0) < 0 or labels.max(initial=0) >= self.K:
            raise InputError("labels must lie in 0..K-1")
        missing = sorted(set(range(self.K)) - set(labels.tolist()))
        if missing:
            raise InputError(f"empty groups {missing}")

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)


@dataclass(frozen=True, eq=False)
class GroupEstimates:
    """``alpha`` (K, p), per-unit ``weights`` (N, p, p) and block-diagonal ``sigma`` (Kp, Kp)."""

    alpha: np.ndarray
    weights: np.ndarray
    sigma: np.ndarray | None = None

    @property
    def K(self) -> int:
        return self.alpha.shape[0]

    @property
    def p(self) -> int:
        return self.alpha.shape[1]

    def block(self, k: int) -> np.ndarray:
        p = self.p
        return self.sigma[k * p:(k + 1) * p, k * p:(k + 1) * p]

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sigma), 0.0, None)).reshape(self.K, self.p)


# -- ingestion ---------------------------------------------------------------

_X_COL = re.compile(r"^x(\d+)$")
_Z_COL = re.compile(r"^z(\d+)$")


def _numbered(header: Sequence[str], pattern: re.Pattern) -> list[str]:
    found = sorted(((int(m.group(1)), h) for h in header if (m := pattern.match(h))))
    cols = [h for _, h in found]
    idx = [i for i, _ in found]
    if idx and idx != list(range(1, len(idx) + 1)):
        raise ParseError(f"columns {cols} are not numbered consecutively from 1")
    return cols


def _unit_sort_key(units: Iterable[str]) -> Callable[[str], object]:
    units = list(units)
    try:
        [int(u) for u in units]
    except ValueError:
        return str
    return int


def load_panel(source, schema: Mapping[str, object] | None = None) -> PanelDataset:
    """Read a long-format CSV panel.

    ``source`` is a path, a text stream or a CSV string containing a newline.
    The default schema expects columns ``unit,time,y,x1..xp[,z1..zq]``;
    ``schema`` may rename them: ``{"unit": ..., "time": ..., "y": ...,
    "x": [...], "z": [...]}``.
    """
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, str) and "\n" in source:
        text = source
    else:
        with open(os.fspath(source), encoding="utf-8", newline="") as fh:
            text = fh.read()
    reader = csv.DictReader(io.StringIO(text))
    header = [h.strip() for h in (reader.fieldnames or [])]
    if not header:
        raise ParseError("empty input")
    reader.fieldnames = header
    schema = dict(schema or {})
    c_unit = schema.get("unit", "unit")
    c_time = schema.get("time", "time")
    c_y = schema.get("y", "y")
    x_cols = list(schema.get("x") or _numbered(header, _X_COL))
    z_cols = list(schema.get("z") or _numbered(header, _Z_COL))
    for col in [c_unit, c_time, c_y, *x_cols, *z_cols]:
        if col not in header:
            raise ParseError(f"missing column {col!r}")
    if not x_cols:
        raise ParseError("no regressor columns (x1..xp)")

    rows: dict[str, dict[int, list[float]]] = {}
    for line_no, row in enumerate(reader, start=2):
        unit = (row[c_unit] or "").strip()
        if not unit:
            raise ParseError(f"line {line_no}: empty unit")
        try:
            t_raw = row[c_time].strip()
            t = int(t_raw)
        except (AttributeError, ValueError):
            raise ParseError(f"line {line_no}: time {row.get(c_time)!r} is not an integer") from None
        values = []
        for col in [c_y, *x_cols, *z_cols]:
            try:
                v = float(row[col])
            except (TypeError, ValueError):
                raise ParseError(f"line {line_no}: column {col!r} value {row.get(col)!r} is not numeric") from None
            if not math.isfinite(v):
                raise ParseError(f"line {line_no}: column {col!r} is not finite")
            values.append(v)
        per_unit = rows.setdefault(unit, {})
        if t in per_unit:
            raise ParseError(f"line {line_no}: duplicate observation for unit {unit!r} time {t}")
        per_unit[t] = values
    if not rows:
        raise ParseError("no observations")

    all_times = sorted(set().union(*(set(d) for d in rows.values())))
    key = _unit_sort_key(rows)
    units = sorted(rows, key=key)
    for u in units:
        missing = sorted(set(all_times) - set(rows[u]))
        if missing:
            raise UnbalancedPanel(f"unit {u!r} is missing time(s) {missing}")

    arr = np.array([[rows[u][t] for t in all_times] for u in units], dtype=float)
    p, q = len(x_cols), len(z_cols)
    y = arr[:, :, 0]
    X = arr[:, :, 1:1 + p]
    Z = arr[:, :, 1 + p:] if q else None
    if q and q < p:
        raise ParseError(f"need at least as many instruments as regressors (q={q} < p={p})")

    # a regressor that is constant within a unit vanishes after demeaning
    spread = X.max(axis=1) - X.min(axis=1)
    bad = np.argwhere(spread == 0)
    if bad.size:
        i, j = bad[0]
        raise DegenerateRegressor(f"column {x_cols[j]!r} is constant within unit {units[i]!r}")
    return PanelDataset(units=tuple(units), times=np.array(all_times), y=y, X=X, Z=Z,
                        meta={"x_columns": x_cols, "z_columns": z_cols})


def panel_to_csv(data: PanelDataset, stream: "TextIO") -> None:
    writer = csv.writer(stream, lineterminator="\n")
    header = ["unit", "time", "y"] + [f"x{j + 1}" for j in range(data.p)]
    header += [f"z{j + 1}" for j in range(data.q)]
    writer.writerow(header)
    for i, u in enumerate(data.units):
        for t_idx, t in enumerate(data.times):
            row = [u, int(t), repr(float(data.y[i, t_idx]))]
            row += [repr(float(v)) for v in data.X[i, t_idx]]
            if data.Z is not None:
                row += [repr(float(v)) for v in data.Z[i, t_idx]]
            writer.writerow(row)


# -- transforms --------------------------------------------------------------


def within_demean(data: PanelDataset) -> DemeanedPanel:
    y = data.y - data.y.mean(axis=1, keepdims=True)
    X = data.X - data.X.mean(axis=1, keepdims=True)
    return DemeanedPanel(units=data.units, y=y, X=X)


def first_difference(data: PanelDataset) -> DifferencedPanel:
    """Differences for t = 1..T-1 (the first period only serves as a lag).

    Instrument rows are those of the differenced periods.
    """
    if data.T < 2:
        raise InputError("first differencing needs at least two periods")
    y = np.diff(data.y, axis=1)
    X = np.diff(data.X, axis=1)
    Z = None if data.Z is None else data.Z[:, 1:, :]
    return DifferencedPanel(units=data.units, y=y, X=X, Z=Z)


# -- unit-level estimators ---------------------------------------------------


def _check_gram(gram: np.ndarray, unit: str) -> None:
    if not np.all(np.isfinite(gram)):
        raise SingularGram(f"non-finite Gram matrix for unit {unit!r}")
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularGram(f"Gram matrix of unit {unit!r} is singular (condition number {cond:.3g})")


def ols_individual(demeaned: DemeanedPanel, unit: int) -> IndividualFit:
    X = demeaned.X[unit]
    y = demeaned.y[unit]
    name = demeaned.units[unit]
    T, p = X.shape
    gram = X.T @ X
    gram = 0.5 * (gram + gram.T)
    _check_gram(gram, name)
    beta = np.linalg.solve(gram, X.T @ y)
    resid = y - X @ beta
    return IndividualFit(unit=name, beta=beta, gram=gram, residuals=resid, method="ls", X=X, y=y)


def _diff_cov(n: int) -> np.ndarray:
    """Covariance pattern of first-differenced white noise (unit variance)."""
    D = 2.0 * np.eye(n)
    i = np.arange(n - 1)
    D[i, i + 1] = D[i + 1, i] = -1.0
    return D


def gmm_individual(diffed: DifferencedPanel, unit: int, weight_rule: str = "2sls") -> IndividualFit:
    """Unit-level GMM on first differences.

    ``weight_rule`` is ``"2sls"`` for Omega = (Z'Z/T)^-1 or ``"identity"``.
    """
    if diffed.Z is None:
        raise InputError("GMM needs instrument columns")
    X = diffed.X[unit]
    y = diffed.y[unit]
    Z = diffed.Z[unit]
    name = diffed.units[unit]
    T, p = X.shape
    G = Z.T @ X
    if np.linalg.matrix_rank(G) < p:
        raise RankDeficientInstruments(f"Z'X is rank deficient for unit {name!r}")
    if weight_rule == "2sls":
        ZZ = Z.T @ Z / T
        if np.linalg.cond(ZZ) > COND_LIMIT:
            raise RankDeficientInstruments(f"instrument moment matrix singular for unit {name!r}")
        omega = np.linalg.inv(ZZ)
        omega = 0.5 * (omega + omega.T)
    elif weight_rule == "identity":
        omega = np.eye(Z.shape[1])
    else:
        raise InputError(f"unknown weight rule {weight_rule!r}")
    GO = G.T @ omega
    gram = GO @ G
    gram = 0.5 * (gram + gram.T)
    _check_gram(gram, name)
    beta = np.linalg.solve(gram, GO @ (Z.T @ y))
    resid = y - X @ beta
    return IndividualFit(unit=name, beta=beta, gram=gram, residuals=resid, method="gmm",
                         X=X, y=y, L=GO @ Z.T)


def _worker_count() -> int:
    env = os.environ.get("PANEL_SELINF_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def fit_individuals(data: PanelDataset, method: str = "ls", weight_rule: str = "2sls",
                    workers: int | None = None) -> list[IndividualFit]:
    """Fit every unit; output order follows ``data.units`` regardless of ``workers``."""
    if method == "ls":
        dm = within_demean(data)
        fn = lambda i: ols_individual(dm, i)  # noqa: E731
    elif method == "gmm":
        if data.Z is None:
            raise InputError("method 'gmm' needs instrument columns z1..zq")
        fd = first_difference(data)
        fn = lambda i: gmm_individual(fd, i, weight_rule)  # noqa: E731
    else:
        raise InputError(f"unknown method {method!r}")
    workers = workers or _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, range(data.N)))
    return [fn(i) for i in range(data.N)]


def stack_fits(fits: Sequence[IndividualFit]) -> tuple[np.ndarray, np.ndarray]:
    """(N, p) betas and (N, p, p) grams."""
    return np.stack([f.beta for f in fits]), np.stack([f.gram for f in fits])


# -- aggregation -------------------------------------------------------------


def group_weights(grams: np.ndarray, labels: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit weights ``(sum_{G_k} Q)^-1 Q_i`` and the per-group inverse Gram sums."""
    N, p, _ = grams.shape
    weights = np.zeros_like(grams)
    inv_sums = np.zeros((K, p, p))
    for k in range(K):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            continue
        A = grams[idx].sum(axis=0)
        if np.linalg.cond(A) > COND_LIMIT:
            raise SingularGram(f"summed Gram of group {k} is singular")
        A_inv = np.linalg.inv(A)
        inv_sums[k] = A_inv
        weights[idx] = A_inv @ grams[idx]
    return weights, inv_sums


def group_estimate(fits: Sequence[IndividualFit], partition: GroupPartition,
                   cov_type: str | None = "unit") -> GroupEstimates:
    """Weighted group slopes; ``sigma`` is filled unless ``cov_type`` is None."""
    betas, grams = stack_fits(fits)
    labels = partition.labels
    if labels.shape[0] != betas.shape[0]:
        raise InputError("partition length does not match the number of fits")
    weights, _ = group_weights(grams, labels, partition.K)
    wb = np.einsum("nij,nj->ni", weights, betas)
    alpha = np.zeros((partition.K, betas.shape[1]))
    np.add.at(alpha, labels, wb)
    sigma = None
    if cov_type is not None:
        sigma = plugin_covariance(fits, partition, cov_type=cov_type, alpha=alpha)
    return GroupEstimates(alpha=alpha, weights=weights, sigma=sigma)


def plugin_covariance(fits: Sequence[IndividualFit], partition: GroupPartition,
                      estimator: str | None = None, cov_type: str = "unit",
                      alpha: np.ndarray | None = None) -> np.ndarray:
    """Block-diagonal covariance of the stacked group slopes.

    Each block is the sandwich ``A^-1 B A^-1`` with ``A = sum Q_i`` over the
    group. ``cov_type`` chooses the middle term:

    * ``"unit"``: ``B = sum_i Var(Q_i beta_i)`` from each unit's error variance
      (see :meth:`IndividualFit.score_cov`); no between-unit spread enters.
    * ``"cluster"``: ``B = sum s_i s_i'`` with ``s_i = Q_i (beta_i - alpha_k)``,
      the cluster-robust form using residuals from the group fit.

    ``estimator`` (``"ls"``/``"gmm"``) is only checked against the fits.
    """
    betas, grams = stack_fits(fits)
    if estimator is not None and any(f.method != estimator for f in fits):
        raise InputError(f"fits were not produced by estimator {estimator!r}")
    labels, K = partition.labels, partition.K
    N, p = betas.shape
    _, inv_sums = group_weights(grams, labels, K)
    if alpha is None:
        weights, _ = group_weights(grams, labels, K)
        alpha = np.zeros((K, p))
        np.add.at(alpha, labels, np.einsum("nij,nj->ni", weights, betas))
    sigma = np.zeros((K * p, K * p))
    for k in range(K):
        idx = np.flatnonzero(labels == k)
        if cov_type == "unit":
            meat = np.sum([fits[i].score_cov(alpha[k]) for i in idx], axis=0)
            if not np.all(np.isfinite(meat)):
                raise SingularGram(f"group {k}: unit residual variance undefined (too few periods)")
        elif cov_type == "cluster":
            s = np.einsum("nij,nj->ni", grams[idx], betas[idx] - alpha[k])
            meat = s.T @ s
        else:
            raise InputError(f"unknown cov_type {cov_type!r}")
        block = inv_sums[k] @ meat @ inv_sums[k].T
        sigma[k * p:(k + 1) * p, k * p:(k + 1) * p] = 0.5 * (block + block.T)
    return sigma
