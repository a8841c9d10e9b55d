import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mixcem.cli import ConfigError, load_config, main, validate
from mixcem.panel import generate_exercise2, write_panel_csv

SIM1 = """command = "sim1"
[scenario]
family = "normal"
N = [200, 400]
replications = {reps}
seed = 11
algorithms = ["EM", "CEM"]
[truth]
mu = [1.0, -1.0]
sigma = [1.0, 1.0]
pi = [0.5, 0.5]
"""

SIM2 = """command = "sim2"
[scenario]
N = 60
T = 3
G = 2
p = 3
replications = 2
n_inits = 2
seed = 5
algorithms = {algs}
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def panel_csv(tmp_path_factory):
    ds, _ = generate_exercise2(150, 4, 2, 5, np.random.default_rng(3))
    path = tmp_path_factory.mktemp("data") / "panel.csv"
    write_panel_csv(path, ds)
    return str(path)


def test_validate_config_ok(tmp_path, capsys):
    cfg = write(tmp_path, "a.toml", SIM1.format(reps=3))
    assert main(["validate-config", "--config", cfg]) == 0
    assert "valid sim1" in capsys.readouterr().out


def test_shipped_configs_validate():
    from pathlib import Path

    for cfg in sorted((Path(__file__).parent.parent / "configs").iterdir()):
        assert main(["validate-config", "--config", str(cfg)]) == 0


@pytest.mark.parametrize(
    "text,field",
    [
        ('command = "sim1"\n[scenario]\nN = "ten"\n[truth]\nmu=[0,1]\nsigma=[1,1]\npi=[0.5,0.5]\n', "scenario.N"),
        ('command = "sim1"\n[scenario]\nN = 10\n[truth]\nmu=[0,1]\nsigma=[1,1]\npi=[0.7,0.5]\n', "truth.pi"),
        ('command = "sim9"\n', "command"),
        ('command = "cv"\n[cv]\ndata = "x.csv"\nfolds = 1\n', "cv.folds"),
        ('command = "cv"\n[cv]\ndata = "x.csv"\ntest_weights = "mode"\n', "cv.test_weights"),
        ('command = "fit"\n[model]\ndata = "x.csv"\n', "model.G"),
    ],
)
def test_bad_field_is_named(tmp_path, text, field):
    with pytest.raises(ConfigError) as err:
        validate(load_config(write(tmp_path, "c.toml", text)))
    assert field in str(err.value)


def test_malformed_config_exit2_no_outputs(tmp_path):
    cfg = write(tmp_path, "bad.toml", 'command = "sim1"\n[scenario\n')
    out = tmp_path / "out"
    assert main(["sim1", "--config", cfg, "--out-dir", str(out)]) == 2
    assert not out.exists()


def test_json_syntax_error_reports_line(tmp_path, capsys):
    cfg = write(tmp_path, "bad.json", '{\n "command": "cv",\n}\n')
    assert main(["validate-config", "--config", cfg]) == 2
    assert "line 3" in capsys.readouterr().err


def test_sim1_single_replication(tmp_path):
    cfg = write(tmp_path, "s.toml", SIM1.format(reps=1))
    out = tmp_path / "o"
    assert main(["sim1", "--config", cfg, "--out-dir", str(out), "--threads", "1"]) == 0
    rows = read_csv(out / "parameters.csv")
    assert list(rows[0]) == ["algorithm", "parameter", "N", "mean_estimate", "bias", "mse", "p2.5", "p97.5"]
    assert {r["parameter"] for r in rows} == {"mu1", "mu2", "sigma1", "sigma2", "pi1", "pi2"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert sorted(manifest["outputs"]) == sorted(str(out / n) for n in ("report.json", "parameters.csv", "summary.csv"))
    for name in ("report.json",):
        json.loads((out / name).read_text())


def test_sim1_reruns_byte_identical(tmp_path):
    cfg = write(tmp_path, "s.toml", SIM1.format(reps=3))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["sim1", "--config", cfg, "--out-dir", str(a), "--threads", "1"]) == 0
    assert main(["sim1", "--config", cfg, "--out-dir", str(b), "--threads", "2"]) == 0
    for name in ("report.json", "parameters.csv", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_override_changes_results(tmp_path):
    cfg = write(tmp_path, "s.toml", SIM1.format(reps=2))
    a, b = tmp_path / "a", tmp_path / "b"
    main(["sim1", "--config", cfg, "--out-dir", str(a), "--threads", "1"])
    main(["sim1", "--config", cfg, "--out-dir", str(b), "--threads", "1", "--seed", "99"])
    assert (a / "parameters.csv").read_bytes() != (b / "parameters.csv").read_bytes()
    assert json.loads((b / "manifest.json").read_text())["seed"] == 99


def test_sim2_em_only_has_no_cem_columns(tmp_path):
    cfg = write(tmp_path, "s.toml", SIM2.format(algs='["EM"]'))
    out = tmp_path / "o"
    assert main(["sim2", "--config", cfg, "--out-dir", str(out), "--threads", "1"]) == 0
    summary = read_csv(out / "summary.csv")
    assert not any("CEM" in c for c in summary[0])
    assert {r["algorithm"] for r in read_csv(out / "parameters.csv")} == {"EM"}


def test_sim2_both_algorithms(tmp_path):
    cfg = write(tmp_path, "s.toml", SIM2.format(algs='["EM", "CEM"]'))
    out = tmp_path / "o"
    assert main(["sim2", "--config", cfg, "--out-dir", str(out), "--threads", "1"]) == 0
    summary = read_csv(out / "summary.csv")[0]
    assert "CEM_misclass_zero_fraction" in summary and "EM_misclass_mean" in summary


def test_fit_reports_truth_misclassification(tmp_path, panel_csv):
    cfg = write(tmp_path, "f.toml", f'command = "fit"\n[model]\ndata = "{panel_csv}"\nG = 2\nn_inits = 5\n')
    out = tmp_path / "o"
    before = open(panel_csv, "rb").read()
    assert main(["fit", "--config", cfg, "--out-dir", str(out)]) == 0
    assert open(panel_csv, "rb").read() == before
    rep = json.loads((out / "fit.json").read_text())
    assert 0 <= rep["misclassification_vs_truth"] <= 0.5
    assert len(rep["groups"]) == 2 and np.array(rep["transition_counts"]).shape == (2, 2)
    assert "x1" in rep["groups"][0]["cluster_robust_se"]
    assert len(read_csv(out / "memberships.csv")) == 150 * 4


def test_fit_single_group(tmp_path, panel_csv):
    cfg = write(tmp_path, "f.toml", f'command = "fit"\n[model]\ndata = "{panel_csv}"\nG = 1\n')
    out = tmp_path / "o"
    assert main(["fit", "--config", cfg, "--out-dir", str(out)]) == 0
    rep = json.loads((out / "fit.json").read_text())
    assert len(rep["groups"]) == 1 and rep["groups"][0]["pi"] == 1.0


def test_fit_empty_data_exit2(tmp_path):
    data = write(tmp_path, "empty.csv", "")
    cfg = write(tmp_path, "f.toml", 'command = "fit"\n[model]\nG = 2\n')
    out = tmp_path / "o"
    assert main(["fit", "--config", cfg, "--data", data, "--out-dir", str(out)]) == 2
    assert not out.exists()


def test_fit_ingestion_error_has_row(tmp_path, capsys):
    data = write(tmp_path, "bad.csv", "unit_id,period,y,w,x1\n1,1,1,1,0\n1,2,oops,1,0\n")
    cfg = write(tmp_path, "f.toml", f'command = "fit"\n[model]\ndata = "{data}"\nG = 1\n')
    assert main(["fit", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 2
    assert "row 3" in capsys.readouterr().err


def test_cv_single_group_relative_one(tmp_path, panel_csv):
    cfg = write(tmp_path, "c.json", json.dumps(
        {"command": "cv", "cv": {"data": panel_csv, "G": [1], "folds": 2, "repetitions": 1, "n_inits": 1}}))
    out = tmp_path / "o"
    assert main(["cv", "--config", cfg, "--out-dir", str(out)]) == 0
    rel = read_csv(out / "relative_rmse.csv")
    assert float(rel[0]["relative_to_G1"]) == 1.0


def test_cv_row_count_and_improvement(tmp_path, panel_csv):
    cfg = write(tmp_path, "c.json", json.dumps(
        {"command": "cv", "cv": {"data": panel_csv, "G": [2], "folds": 2, "repetitions": 10, "n_inits": 3}}))
    out = tmp_path / "o"
    assert main(["cv", "--config", cfg, "--out-dir", str(out)]) == 0
    folds = read_csv(out / "folds.csv")
    assert len(folds) == 10 * 2 + 1
    assert float(read_csv(out / "relative_rmse.csv")[0]["relative_to_G1"]) < 1


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, "a.toml", SIM1.format(reps=3))
    r = subprocess.run([sys.executable, "-m", "mixcem.cli", "validate-config", "--config", cfg],
                       capture_output=True, text=True)
    assert r.returncode == 0
