"""Finite unions of closed real intervals and quadratic inequality solving."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "IntervalUnion",
    "solve_quadratic_leq",
    "solve_quadratic_system_leq",
    "intersect",
    "clip_nonnegative",
    "contains",
    "DEFAULT_TOL",
    "BOUNDARY_SLACK",
]

DEFAULT_TOL = 1e-10
BOUNDARY_SLACK = 1e-9

_INF = math.inf


def _normalize(pairs: Iterable[Sequence[float]]) -> tuple[tuple[float, float], ...]:
    items = []
    for lo, hi in pairs:
        lo, hi = float(lo), float(hi)
        if math.isnan(lo) or math.isnan(hi):
            raise ValueError("interval endpoints must not be NaN")
        if lo > hi:
            continue
        items.append((lo, hi))
    items.sort()
    merged: list[list[float]] = []
    for lo, hi in items:
        # closed intervals that touch are merged
        if merged and lo <= merged[-1][1]:
            if hi > merged[-1][1]:
                merged[-1][1] = hi
        else:
            merged.append([lo, hi])
    return tuple((lo, hi) for lo, hi in merged)


@dataclass(frozen=True)
class IntervalUnion:
    """Sorted, disjoint union of closed intervals ``[lo, hi]``.

    Endpoints may be infinite. Construct through :meth:`of` (or the helpers
    below) so the representation is always canonical.
    """

    intervals: tuple[tuple[float, float], ...] = ()

    @classmethod
    def of(cls, pairs: Iterable[Sequence[float]]) -> "IntervalUnion":
        return cls(_normalize(pairs))

    @classmethod
    def empty(cls) -> "IntervalUnion":
        return cls(())

    @classmethod
    def real_line(cls) -> "IntervalUnion":
        return cls(((-_INF, _INF),))

    @classmethod
    def half_line(cls) -> "IntervalUnion":
        return cls(((0.0, _INF),))

    def __post_init__(self):
        if _normalize(self.intervals) != tuple(self.intervals):
            raise ValueError(f"intervals are not in canonical form: {self.intervals!r}")

    def __iter__(self):
        return iter(self.intervals)

    def __len__(self) -> int:
        return len(self.intervals)

    def __bool__(self) -> bool:
        return bool(self.intervals)

    @property
    def is_empty(self) -> bool:
        return not self.intervals

    @property
    def inf(self) -> float:
        if not self.intervals:
            raise ValueError("empty set has no infimum")
        return self.intervals[0][0]

    @property
    def sup(self) -> float:
        if not self.intervals:
            raise ValueError("empty set has no supremum")
        return self.intervals[-1][1]

    def intersect(self, other: "IntervalUnion") -> "IntervalUnion":
        return intersect(self, other)

    def union(self, other: "IntervalUnion") -> "IntervalUnion":
        return IntervalUnion.of(self.intervals + other.intervals)

    def clip_nonnegative(self) -> "IntervalUnion":
        return clip_nonnegative(self)

    def contains(self, x: float, slack: float = BOUNDARY_SLACK) -> bool:
        return contains(self, x, slack)

    def contains_array(self, xs: np.ndarray, slack: float = 0.0) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        out = np.zeros(xs.shape, dtype=bool)
        for lo, hi in self.intervals:
            out |= (xs >= lo - slack) & (xs <= hi + slack)
        return out

    def boundaries(self) -> list[float]:
        return [e for pair in self.intervals for e in pair if math.isfinite(e)]

    def to_json(self) -> list[list]:
        def enc(v: float):
            if v == _INF:
                return "inf"
            if v == -_INF:
                return "-inf"
            return v

        return [[enc(lo), enc(hi)] for lo, hi in self.intervals]

    @classmethod
    def from_json(cls, data: Sequence[Sequence]) -> "IntervalUnion":
        return cls.of((float(lo), float(hi)) for lo, hi in data)

    def __repr__(self) -> str:
        if not self.intervals:
            return "IntervalUnion(∅)"
        body = " ∪ ".join(f"[{lo:.6g}, {hi:.6g}]" for lo, hi in self.intervals)
        return f"IntervalUnion({body})"


def intersect(s1: IntervalUnion, s2: IntervalUnion) -> IntervalUnion:
    a, b = s1.intervals, s2.intervals
    out = []
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if lo <= hi:
            out.append((lo, hi))
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return IntervalUnion.of(out)


def clip_nonnegative(s: IntervalUnion) -> IntervalUnion:
    return intersect(s, IntervalUnion.half_line())


def contains(s: IntervalUnion, x: float, slack: float = BOUNDARY_SLACK) -> bool:
    return any(lo - slack <= x <= hi + slack for lo, hi in s.intervals)


def _stable_roots(a: float, b: float, c: float) -> tuple[float, float] | None:
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return None
    sq = math.sqrt(disc)
    q = -0.5 * (b + math.copysign(sq, b))
    if q == 0.0:
        return 0.0, 0.0
    r1, r2 = q / a, c / q
    return (r1, r2) if r1 <= r2 else (r2, r1)


def solve_quadratic_leq(a: float, b: float, c: float, tol: float = DEFAULT_TOL) -> IntervalUnion:
    """Solution set of ``a*x**2 + b*x + c <= 0`` over the real line.

    Coefficients with magnitude at most ``tol * max(|a|, |b|, |c|, 1)`` are
    treated as zero, so a tiny ``a`` is solved as a linear inequality.
    """
    a, b, c = float(a), float(b), float(c)
    if not all(map(math.isfinite, (a, b, c))):
        raise ValueError("coefficients must be finite")
    scale = tol * max(abs(a), abs(b), abs(c), 1.0)
    if abs(a) <= scale:
        if abs(b) <= scale:
            return IntervalUnion.real_line() if c <= 0 else IntervalUnion.empty()
        r = -c / b
        return IntervalUnion.of([(-_INF, r)] if b > 0 else [(r, _INF)])
    roots = _stable_roots(a, b, c)
    if roots is None:
        return IntervalUnion.empty() if a > 0 else IntervalUnion.real_line()
    r1, r2 = roots
    if a > 0:
        return IntervalUnion.of([(r1, r2)])
    return IntervalUnion.of([(-_INF, r1), (r2, _INF)])


def solve_quadratic_system_leq(a, b, c, tol: float = DEFAULT_TOL) -> IntervalUnion:
    """Intersection of the solution sets of many inequalities ``a x^2 + b x + c <= 0``.

    Vectorized equivalent of folding :func:`solve_quadratic_leq` with
    :func:`intersect`. Interval-shaped constraints collapse to one lower and
    one upper bound; downward parabolas contribute open holes that are cut out
    at the end.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float)).ravel()
    b = np.atleast_1d(np.asarray(b, dtype=float)).ravel()
    c = np.atleast_1d(np.asarray(c, dtype=float)).ravel()
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
        raise ValueError("coefficients must be finite")
    scale = tol * np.maximum.reduce([np.abs(a), np.abs(b), np.abs(c), np.ones_like(a)])
    a = np.where(np.abs(a) <= scale, 0.0, a)
    b = np.where((a == 0) & (np.abs(b) <= scale), 0.0, b)

    lo, hi = -_INF, _INF

    const = (a == 0) & (b == 0)
    if np.any(c[const] > 0):
        return IntervalUnion.empty()

    lin = (a == 0) & (b != 0)
    if np.any(lin):
        r = -c[lin] / b[lin]
        pos = b[lin] > 0
        if np.any(pos):
            hi = min(hi, float(r[pos].min()))
        if np.any(~pos):
            lo = max(lo, float(r[~pos].max()))

    quad = a != 0
    holes: list[tuple[float, float]] = []
    if np.any(quad):
        qa, qb, qc = a[quad], b[quad], c[quad]
        disc = qb * qb - 4.0 * qa * qc
        up = qa > 0
        if np.any(up & (disc < 0)):
            return IntervalUnion.empty()
        real = disc >= 0
        sq = np.sqrt(np.where(real, disc, 0.0))
        q = -0.5 * (qb + np.where(qb >= 0, sq, -sq))
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            r1 = np.where(q != 0, q / qa, 0.0)
            r2 = np.where(q != 0, qc / q, 0.0)
        rlo, rhi = np.minimum(r1, r2), np.maximum(r1, r2)
        sel = up & real
        if np.any(sel):
            lo = max(lo, float(rlo[sel].max()))
            hi = min(hi, float(rhi[sel].min()))
        sel = (~up) & real
        if np.any(sel):
            holes = list(zip(rlo[sel].tolist(), rhi[sel].tolist()))

    if lo > hi:
        return IntervalUnion.empty()
    pieces = [(lo, hi)]
    if holes:
        holes.sort()
        for h_lo, h_hi in holes:
            if h_lo >= h_hi:
                # a point hole of a closed-complement set removes nothing
                continue
            nxt = []
            for p_lo, p_hi in pieces:
                if h_hi <= p_lo or h_lo >= p_hi:
                    nxt.append((p_lo, p_hi))
                    continue
                if p_lo <= h_lo:
                    nxt.append((p_lo, h_lo))
                if h_hi <= p_hi:
                    nxt.append((h_hi, p_hi))
            pieces = nxt
            if not pieces:
                break
    return IntervalUnion.of(pieces)
