"""Command-line interface: ``panel-selinf {fit,test,simulate,perturb,qq}``.

Group numbers and covariate indices are 1-based on the command line and in
all output. Exit codes: 0 success, 2 input or configuration error, 3 numerical
or degenerate-inference error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from .errors import InputError, NumericalError, ObservedStatExcluded
from .kmeans import S_MAX_DEFAULT, run_kmeans
from .panel import fit_individuals, load_panel, panel_to_csv
from .selective import (
    build_contrast,
    perturbation_path,
    recluster_matches,
    selective_test,
    selective_test_covariate,
    truncation_set,
)
from .simulate import (
    DgpSpec,
    dgp_generate,
    qq_data,
    run_power_experiment,
    run_size_experiment,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return None if math.isnan(v) else v
    return obj


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")


def _emit_json(payload, out: str | None) -> None:
    _emit(json.dumps(_jsonable(payload), indent=2), out)


def _emit_csv(header: list[str], rows: list[list], out: str | None) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(_jsonable(rows))
    _emit(buf.getvalue(), out)


def _pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("pair must look like 1,2") from None
    return a, b


def _alpha(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return v


def _cluster(args):
    if args.input is None:
        raise InputError("--input is required")
    data = load_panel(args.input)
    if args.K > data.N:
        raise InputError(f"K exceeds N ({args.K} > {data.N})")
    if args.method == "gmm" and data.Z is None:
        raise InputError("--method gmm needs instrument columns z1..zq in the input")
    fits = fit_individuals(data, method=args.method)
    run = run_kmeans(fits, args.K, seed=args.seed, s_max=args.smax, cov_type=args.cov_type)
    return data, fits, run


def _pair_index(args, K: int) -> tuple[int, int]:
    k, k2 = args.pair
    if not (1 <= k <= K and 1 <= k2 <= K) or k == k2:
        raise InputError(f"--pair {k},{k2} is not a pair of distinct groups in 1..{K}")
    return k - 1, k2 - 1


def _covariate_index(args, p: int) -> int | None:
    if args.covariate is None:
        return None
    if not 1 <= args.covariate <= p:
        raise InputError(f"--covariate must lie in 1..{p}")
    return args.covariate - 1


def cmd_fit(args) -> int:
    data, fits, run = _cluster(args)
    est = run.estimates
    labels = run.labels + 1
    if args.format == "csv":
        header = ["unit", "group"] + [f"beta{j + 1}" for j in range(data.p)]
        rows = [[u, int(g), *f.beta.tolist()] for u, g, f in zip(data.units, labels, fits)]
        _emit_csv(header, rows, args.out)
        return EXIT_OK
    payload = {
        "units": list(data.units),
        "K": args.K,
        "method": args.method,
        "cov_type": args.cov_type,
        "labels": labels,
        "group_sizes": np.bincount(run.labels, minlength=args.K),
        "alpha": est.alpha,
        "se": est.standard_errors(),
        "fits": [f.to_json() for f in fits],
        "run": run.to_json(),
    }
    _emit_json(payload, args.out)
    return EXIT_OK


def cmd_test(args) -> int:
    data, fits, run = _cluster(args)
    k, k2 = _pair_index(args, run.K)
    j = _covariate_index(args, data.p)
    if j is None:
        res = selective_test(run, k, k2)
    else:
        res = selective_test_covariate(run, k, k2, j)
    row = res.to_json()
    row["reject"] = bool(res.p_selective <= args.alpha)
    row["alpha"] = args.alpha
    if args.format == "csv":
        _emit_csv(["statistic", "p_selective", "p_naive", "wald_stat", "target"],
                  [[res.statistic, res.p_selective, res.p_naive, res.wald_stat,
                    row["metadata"]["target"]]], args.out)
        return EXIT_OK
    _emit_json(row, args.out)
    return EXIT_OK


def cmd_perturb(args) -> int:
    data, fits, run = _cluster(args)
    k, k2 = _pair_index(args, run.K)
    j = _covariate_index(args, data.p)
    if args.phi is None or args.phi < 0:
        raise InputError("--phi must be given and non-negative")
    contrast = build_contrast(run, k, k2)
    path = perturbation_path(contrast, j)
    Bphi = path.at(run.betas, args.phi)
    same = recluster_matches(run, contrast, args.phi, j)
    S = truncation_set(run, contrast, path=path)
    if args.format == "csv":
        header = ["unit"] + [f"b{c + 1}" for c in range(data.p)]
        _emit_csv(header, [[u, *b.tolist()] for u, b in zip(data.units, Bphi)], args.out)
        return EXIT_OK
    payload = {
        "phi": args.phi,
        "observed": path.observed,
        "target": "all" if j is None else f"covariate {j + 1}",
        "pair": [k + 1, k2 + 1],
        "same_clustering": same,
        "in_truncation_set": S.contains(args.phi),
        "truncation": S.to_json(),
        "group_difference": contrast.apply(Bphi),
        "blocks": [{"unit": u, "beta": b} for u, b in zip(data.units, Bphi)],
    }
    _emit_json(payload, args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = DgpSpec(args.dgp, N=args.N, T=args.T, delta=args.delta, kappa=args.kappa,
                   p=args.p, seed=args.seed)
    if args.emit_data:
        with open(args.emit_data, "w", encoding="utf-8", newline="") as fh:
            panel_to_csv(dgp_generate(spec), fh)
    K = args.K if args.K is not None else (2 if spec.delta == 0 and spec.kappa == 0 else 3)
    target = args.target
    if target == "covariate" and args.covariate is not None:
        raise InputError("--covariate is for 'test'/'perturb'; simulations draw j at random")
    common = dict(K=K, M=args.M, method=args.method, target=target, alpha=args.alpha,
                  s_max=args.smax, cov_type=args.cov_type)
    if spec.delta == 0 and spec.kappa == 0:
        report = run_size_experiment(spec, **common)
    else:
        report = run_power_experiment(spec, **common)
    summary = report.summary()
    rows = report.rows()
    header = ["seed", "recovered", "p_selective", "p_naive"]
    if args.out:
        base = Path(args.out)
        csv_path = base.with_suffix(".csv")
        json_path = base.with_suffix(".json")
        _emit_csv(header, [[r[h] for h in header] for r in rows], str(csv_path))
        _emit_json(summary, str(json_path))
        return EXIT_OK
    if args.format == "csv":
        _emit_csv(header, [[r[h] for h in header] for r in rows], None)
    else:
        _emit_json(summary, None)
    return EXIT_OK


def cmd_qq(args) -> int:
    if args.input is None:
        raise InputError("--input is required (CSV with a p-value column)")
    try:
        text = Path(args.input).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(str(exc)) from None
    reader = csv.DictReader(io.StringIO(text))
    col = args.column
    if reader.fieldnames is None or col not in reader.fieldnames:
        raise InputError(f"column {col!r} not found")
    vals = []
    for row in reader:
        v = row[col]
        if v in ("", None):
            continue
        try:
            vals.append(float(v))
        except ValueError:
            raise InputError(f"non-numeric p-value {v!r}") from None
    if not vals:
        raise InputError("no p-values found")
    pairs = qq_data(vals)
    if args.format == "csv":
        _emit_csv(["uniform_quantile", "empirical_quantile"], [list(p) for p in pairs], args.out)
    else:
        _emit_json([list(p) for p in pairs], args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panel-selinf",
        description="Latent-group panel regression with selective inference after k-means.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        if data:
            p.add_argument("--input", help="long-format CSV: unit,time,y,x1..xp[,z1..zq]")
        p.add_argument("--K", type=int, default=2, help="number of groups")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--method", choices=["ls", "gmm"], default="ls")
        p.add_argument("--smax", type=int, default=S_MAX_DEFAULT, help="maximum k-means iterations")
        p.add_argument("--cov-type", choices=["unit", "cluster"], default="unit",
                       help="sandwich middle term for the group covariance")
        p.add_argument("--out", help="write output to this path instead of stdout")
        p.add_argument("--format", choices=["json", "csv"], default="json")

    p = sub.add_parser("fit", help="cluster units and report group estimates")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("test", help="selective and naive tests for a pair of groups")
    common(p)
    p.add_argument("--pair", type=_pair, default=(1, 2), help="groups to compare, e.g. 1,2")
    p.add_argument("--covariate", type=int, help="test a single covariate (1-based)")
    p.add_argument("--alpha", type=_alpha, default=0.05)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("perturb", help="perturbed coefficients B(phi) and a recluster check")
    common(p)
    p.add_argument("--pair", type=_pair, default=(1, 2))
    p.add_argument("--covariate", type=int)
    p.add_argument("--phi", type=float, required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("simulate", help="size or power experiment on a synthetic DGP")
    common(p, data=False)
    p.set_defaults(K=None)
    p.add_argument("--dgp", type=int, choices=range(1, 7), required=True)
    p.add_argument("--N", type=int, default=60)
    p.add_argument("--T", type=int, default=15)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--p", type=int, help="regressor count for DGP 5/6")
    p.add_argument("--M", type=int, default=200)
    p.add_argument("--alpha", type=_alpha, default=0.05)
    p.add_argument("--target", choices=["all", "covariate"], default="all",
                   help="joint test, or a random single covariate per replication")
    p.add_argument("--covariate", type=int, help=argparse.SUPPRESS)
    p.add_argument("--emit-data", help="also write the seed's generated panel to this CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("qq", help="QQ data of p-values against Uniform(0,1)")
    p.add_argument("--input", required=True, help="CSV with a p-value column")
    p.add_argument("--column", default="p_selective")
    p.add_argument("--out")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.set_defaults(func=cmd_qq)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ObservedStatExcluded as exc:
        _emit_json({"error": type(exc).__name__, "message": str(exc),
                    "triple": list(exc.triple) if exc.triple else None}, None)
        return EXIT_NUMERIC
    except NumericalError as exc:
        _emit_json({"error": type(exc).__name__, "message": str(exc)}, None)
        return EXIT_NUMERIC
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
