from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from panel_selinf.cli import main
from panel_selinf.simulate import DgpSpec, dgp_generate


@pytest.fixture(scope="module")
def separated_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "dgp1.csv"
    assert main(["simulate", "--dgp", "1", "--N", "30", "--T", "20", "--delta", "2",
                 "--M", "1", "--seed", "3", "--emit-data", str(path),
                 "--out", str(path.with_name("sim"))]) == 0
    return path


def _json(capsys):
    return json.loads(capsys.readouterr().out)


def test_fit_recovers_truth(separated_csv, capsys):
    assert main(["fit", "--input", str(separated_csv), "--K", "3", "--seed", "3"]) == 0
    doc = _json(capsys)
    truth = dgp_generate(DgpSpec(1, N=30, T=20, delta=2.0, seed=3)).meta["true_labels"]
    assert len(set(zip(doc["labels"], truth.tolist()))) == 3
    assert min(doc["labels"]) == 1 and sum(doc["group_sizes"]) == 30
    assert np.asarray(doc["alpha"]).shape == (3, 2)


def test_fit_csv_format(separated_csv, capsys):
    assert main(["fit", "--input", str(separated_csv), "--K", "3", "--format", "csv"]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0] == ["unit", "group", "beta1", "beta2"] and len(rows) == 31


def test_test_command(separated_csv, capsys):
    assert main(["test", "--input", str(separated_csv), "--K", "3", "--seed", "3", "--pair", "1,2"]) == 0
    doc = _json(capsys)
    assert 0 <= doc["p_selective"] <= 1 and doc["reject"] == (doc["p_selective"] <= 0.05)
    assert main(["test", "--input", str(separated_csv), "--K", "3", "--pair", "1,3", "--covariate", "2"]) == 0
    assert _json(capsys)["metadata"]["target"].startswith("covariate")


def test_perturb_observed_and_zero(separated_csv, capsys):
    base = ["perturb", "--input", str(separated_csv), "--K", "3", "--seed", "3", "--pair", "1,2"]
    assert main(base + ["--phi", "0"]) == 0
    zero = _json(capsys)
    # the groups are far apart, so merging their means changes the clustering
    assert zero["same_clustering"] is False and zero["in_truncation_set"] is False
    phi = zero["observed"]
    assert main(base + ["--phi", repr(phi)]) == 0
    obs = _json(capsys)
    assert obs["same_clustering"] is True and obs["in_truncation_set"] is True
    diff = np.asarray(obs["group_difference"])
    assert np.linalg.norm(diff) > 0


def test_simulate_and_qq(tmp_path, capsys):
    out = tmp_path / "size"
    assert main(["simulate", "--dgp", "1", "--N", "15", "--T", "8", "--M", "100",
                 "--seed", "2", "--out", str(out)]) == 0
    summary = json.loads(out.with_suffix(".json").read_text())
    assert summary["ks_stat"] is not None and summary["excluded"] == 0
    assert main(["qq", "--input", str(out.with_suffix(".csv"))]) == 0
    pairs = _json(capsys)
    assert len(pairs) == 100
    assert all(a <= b for (a, _), (b, _) in zip(pairs, pairs[1:]))


def test_input_errors_exit_two(separated_csv, tmp_path, capsys):
    assert main(["fit", "--input", str(separated_csv), "--K", "31"]) == 2
    assert "K exceeds N" in capsys.readouterr().err
    assert main(["fit", "--input", str(separated_csv), "--method", "gmm"]) == 2
    assert "instrument" in capsys.readouterr().err
    assert main(["fit", "--input", str(tmp_path / "missing.csv")]) == 2
    assert main(["test", "--input", str(separated_csv), "--K", "3", "--pair", "1,1"]) == 2
    assert main(["simulate", "--dgp", "1", "--M", "10"]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("unit,time,y,x1\n1,1,0.5,abc\n")
    assert main(["fit", "--input", str(bad)]) == 2


def test_numerical_error_exit_three(tmp_path, capsys):
    # the second regressor is twice the first for unit 2, so its gram is singular
    rng = np.random.default_rng(0)
    path = tmp_path / "collinear.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "time", "y", "x1", "x2"])
        for u in range(1, 5):
            for t in range(1, 7):
                x1 = rng.normal()
                x2 = 2 * x1 if u == 2 else rng.normal()
                w.writerow([u, t, rng.normal(), x1, x2])
    assert main(["fit", "--input", str(path), "--K", "2"]) == 3
    doc = _json(capsys)
    assert doc["error"] == "SingularGram"


def test_console_entry_point(separated_csv):
    proc = subprocess.run([sys.executable, "-m", "panel_selinf.cli", "fit", "--input",
                           str(separated_csv), "--K", "2"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["K"] == 2
