"""Acceptance criteria 1 to 10.

Each test records one PASS/FAIL line; the lines are printed in the pytest
terminal summary and by ``python tests/test_acceptance.py``.  Thresholds are
pinned below and never adjusted to make a run pass.
"""

from __future__ import annotations

import math
import sys
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from panel_selinf.distributions import WeightedChiSq, wchisq_cdf, wchisq_cdf_mc  # noqa: E402
from panel_selinf.errors import DegenerateDirection  # noqa: E402
from panel_selinf.kmeans import run_kmeans  # noqa: E402
from panel_selinf.panel import fit_individuals  # noqa: E402
from panel_selinf.selective import build_contrast, perturb, perturbation_path, truncation_set  # noqa: E402
from panel_selinf.simulate import (  # noqa: E402
    DgpSpec,
    dgp_generate,
    ks_critical,
    ks_uniform,
    run_fixed_partition_experiment,
    run_power_experiment,
    run_size_experiment,
)
from test_selective import _check_lemmas, _grid_mismatches, _projector, _runs  # noqa: E402

M_NULL = 1000
NULL_SEED = 1000
FIXED_SEED = 5000
POWER_SEED = 2000
KS_CRIT = ks_critical(M_NULL)  # 1.628 / sqrt(1000) = 0.05147
NAIVE_MEDIAN_MAX = 0.01
NAIVE_SHARE_MIN = 0.95
POWER_DELTAS = (0.4, 1.2, 2.0)
RECOVERY_MIN = 0.9
POWER_MIN = 0.8
LEMMA_RTOL = 1e-8
PROJ_TOL = 1e-10
CLOSED_FORM_TOL = 1e-7

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def report_lines() -> list[str]:
    return [f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {d}" for n, (ok, d) in sorted(RESULTS.items())]


@lru_cache(maxsize=None)
def null_report(dgp: int, method: str = "ls", target: str = "all"):
    spec = DgpSpec(dgp, N=60, T=15, seed=NULL_SEED)
    return run_size_experiment(spec, K=2, M=M_NULL, method=method, target=target)


def upper_deviation(p) -> float:
    """max over u of ECDF(u) - u; positive when p-values are stochastically small."""
    x = np.sort(np.asarray(p))
    n = x.size
    return float(np.max(np.arange(1, n + 1) / n - x))


pytestmark = pytest.mark.slow


def test_criterion_01_null_uniformity():
    parts, ok = [], True
    for dgp in (1, 2, 3):
        rep = null_report(dgp)
        ks = ks_uniform(rep.pvalues)
        good = len(rep.pvalues) == M_NULL and ks < KS_CRIT
        ok &= good
        parts.append(f"dgp{dgp} KS={ks:.4f}")
    record(1, ok, f"{', '.join(parts)} (critical {KS_CRIT:.4f})")
    assert ok


def test_criterion_02_naive_anticonservative():
    rep = null_report(1)
    p = np.asarray(rep.naive_pvalues)
    med = float(np.median(p))
    share = float(np.mean(p < 0.05))
    ok = med < NAIVE_MEDIAN_MAX and share >= NAIVE_SHARE_MIN
    record(2, ok, f"naive median={med:.2e}, share<0.05={share:.3f}")
    assert ok


def test_criterion_03_fixed_partition():
    p = run_fixed_partition_experiment(DgpSpec(1, N=60, T=15, seed=FIXED_SEED), M=M_NULL, share=0.4)
    ks = ks_uniform(p)
    ok = ks < KS_CRIT
    record(3, ok, f"40/60 split Wald KS={ks:.4f}")
    assert ok


def test_criterion_04_gmm_versus_ls_dynamics():
    gmm = null_report(4, "gmm")
    ls = null_report(4, "ls")
    ks_g = ks_uniform(gmm.pvalues)
    ks_l = ks_uniform(ls.pvalues)
    up_l = upper_deviation(ls.pvalues)
    gmm_ok = ks_g < KS_CRIT
    ls_fails = ks_l >= KS_CRIT and up_l >= KS_CRIT
    ok = gmm_ok and ls_fails
    record(4, ok, f"GMM KS={ks_g:.4f} (must pass); LS KS={ks_l:.4f}, ECDF-u max={up_l:.4f} (must fail)")
    assert gmm_ok, "GMM selective p-values not uniform"
    assert ls_fails, "LS selective p-values are not rejected as uniform"


def test_criterion_05_covariate_uniformity():
    parts, ok = [], True
    for dgp in (5, 6):
        rep = null_report(dgp, target="covariate")
        ks = ks_uniform(rep.pvalues)
        ok &= len(rep.pvalues) == M_NULL and ks < KS_CRIT
        parts.append(f"dgp{dgp} KS={ks:.4f}")
    record(5, ok, ", ".join(parts))
    assert ok


def test_criterion_06_truncation_set_oracle():
    bad = checked = count = 0
    for run, pair, rng in _runs(606, 80, N=(6, 25), K=(2, 4), p=(1, 3)):
        c = build_contrast(run, *pair)
        cov = None if rng.random() < 0.5 else int(rng.integers(run.p))
        try:
            S = truncation_set(run, c, cov)
        except DegenerateDirection:
            continue
        b, n = _grid_mismatches(run, c, cov, S, points=400)
        bad += b
        checked += n
        count += 1
        if count == 50:
            break
    ok = count == 50 and bad == 0
    record(6, ok, f"{count} instances, {checked} grid points, {bad} interior mismatches")
    assert ok


def test_criterion_07_lemma_coefficients():
    cases = 0
    for run, pair, rng in _runs(707, 100):
        _check_lemmas(run, pair, rng)
        cases += 1
    for run, pair, rng in _runs(708, 100):
        _check_lemmas(run, pair, rng, covariate=int(rng.integers(run.p)))
        cases += 1
    gmm = 0
    for seed in range(300):
        data = dgp_generate(DgpSpec(4, N=12, T=10, delta=1.0, seed=seed))
        try:
            run = run_kmeans(fit_individuals(data, "gmm"), 3, seed=seed, cov_type=None)
        except Exception:
            continue
        rng = np.random.default_rng(seed)
        pair = tuple(sorted(rng.choice(3, 2, replace=False).tolist()))
        _check_lemmas(run, pair, rng, None if seed % 2 else int(rng.integers(3)))
        gmm += 1
        if gmm == 100:
            break
    ok = cases == 200 and gmm == 100
    record(7, ok, f"{cases} LS/covariate and {gmm} GMM instances x 20 phi, rel err < {LEMMA_RTOL:g}")
    assert ok


def test_criterion_08_distribution_kernels():
    rng = np.random.default_rng(808)
    draws = 1_000_000
    worst = 0.0
    for n in range(50):
        lam = tuple(rng.uniform(0.05, 3.0, size=int(rng.integers(1, 7))))
        x = float(rng.uniform(0.1, 3.0) * sum(lam))
        law = WeightedChiSq(lam)
        ref = wchisq_cdf_mc(x, law, draws=draws, seed=8000 + n)
        se = math.sqrt(max(ref * (1 - ref), 1e-12) / draws)
        worst = max(worst, abs(wchisq_cdf(x, law) - ref) / se)
    closed = 0.0
    for x in [0.01, 0.5, 3.841459, 9.0]:
        closed = max(closed, abs(wchisq_cdf(x, WeightedChiSq((1.0,))) - math.erf(math.sqrt(x / 2))))
    for x in [0.1, 2.0, 10.0]:
        closed = max(closed, abs(wchisq_cdf(x, WeightedChiSq((2.0, 2.0))) - (1 - math.exp(-x / 4))))
    ok = worst <= 3.0 and closed <= CLOSED_FORM_TOL
    record(8, ok, f"max |Imhof-MC|/se={worst:.2f} (<= 3), closed-form err={closed:.1e}")
    assert ok


def test_criterion_09_projection_identities():
    worst = 0.0
    for run, (k, k2), rng in _runs(909, 100):
        c = build_contrast(run, k, k2)
        P = _projector(c)
        B = run.betas.reshape(-1)
        obs = perturbation_path(c).observed
        PB = P @ B
        for phi in [0.0, obs, float(rng.uniform(0, 3 * obs))]:
            Bphi = perturb(B, c, phi)
            worst = max(worst, np.abs((Bphi - P @ Bphi) - (B - PB)).max())
            worst = max(worst, abs(np.linalg.norm(P @ Bphi) - phi) / max(1.0, obs))
            if phi > 0:
                worst = max(worst, np.abs(P @ Bphi / phi - PB / obs).max())
        worst = max(worst, np.abs(perturb(B, c, obs) - B).max())
    ok = worst <= PROJ_TOL
    record(9, ok, f"100 instances, max deviation={worst:.1e}")
    assert ok


def test_criterion_10_power_monotone():
    rec, pw = [], []
    for d in POWER_DELTAS:
        s = run_power_experiment(DgpSpec(1, N=120, T=25, delta=d, seed=POWER_SEED), M=300).summary()
        rec.append(s["recovery_probability"])
        pw.append(s["conditional_power"])
    # power is undefined when no replication recovers the pair; it then ranks lowest
    pw_num = [-1.0 if v is None else v for v in pw]
    mono = all(b >= a for a, b in zip(rec, rec[1:])) and all(b >= a for a, b in zip(pw_num, pw_num[1:]))
    ok = mono and rec[-1] >= RECOVERY_MIN and pw_num[-1] >= POWER_MIN
    record(10, ok, "recovery=" + "/".join(f"{r:.3f}" for r in rec) + ", power=" + "/".join("n/a" if p is None else f"{p:.3f}" for p in pw))
    assert ok


if __name__ == "__main__":
    for name, fn in sorted((k, v) for k, v in globals().items() if k.startswith("test_criterion")):
        try:
            fn()
        except AssertionError:
            pass
    print("\n".join(report_lines()))
