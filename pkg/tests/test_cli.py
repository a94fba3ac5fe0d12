import json

import pandas as pd
import pytest

from beltfield.cli import main


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--spec", "S_BYM.T_AR1.ST_1.B", "--seed", "2", "--out", str(d / "s")]) == 0
    return d


def test_simulate_defaults(sim):
    s = sim / "s"
    comp = pd.read_csv(s / "compliance.csv")
    assert len(comp) == 1188 and comp["region_id"].nunique() == 99
    truth = json.loads((s / "truth.json").read_text())
    assert truth["seed"] == 2 and truth["spec_code"] == "S_BYM.T_AR1.ST_1.B"
    assert json.loads((s / "config.json").read_text())["seed"] == 2


def test_moran_columns_and_perm(sim):
    out = sim / "m.csv"
    assert main(["moran", str(sim / "s"), "--out", str(out)]) == 0
    df = pd.read_csv(out)
    assert len(df) == 12 and "p_perm" not in df
    assert list(df.columns[:6]) == ["month", "I", "expected_I", "variance_I", "z", "p_normal"]
    assert main(["moran", str(sim / "s"), "--perm", "99", "--seed", "1", "--out", str(out)]) == 0
    assert "p_perm" in pd.read_csv(out)
    assert json.loads((sim / "m_config.json").read_text())["perm"] == 99


def test_moran_flags_constant_month(tmp_path):
    rows = [(f"{19001 + 2 * k}", m, 0.5 if m == 2 else 0.3 + 0.004 * k, 100)
            for k in range(99) for m in (1, 2)]
    comp = tmp_path / "c.csv"
    pd.DataFrame(rows, columns=["region_id", "month", "rate", "n_journeys"]).to_csv(comp, index=False)
    assert main(["moran", str(comp), "--out", str(tmp_path / "m.csv")]) == 0
    assert pd.read_csv(tmp_path / "m.csv")["status"].tolist() == ["ok", "undefined"]


def test_fit_eval_bundle(sim, capsys):
    for code in ("S_0.T_0.ST_0.B", "S_BYM.T_0.ST_0.B"):
        rc = main(["fit", str(sim / "s"), "--spec", code, "--iter", "300", "--burnin", "150",
                   "--chains", "2", "--seed", "5", "--out", str(sim / code)])
        assert rc == 0
    assert (sim / "S_BYM.T_0.ST_0.B" / "summary.csv").exists()
    out = sim / "eval"
    assert main(["eval", str(sim / "S_0.T_0.ST_0.B"), str(sim / "S_BYM.T_0.ST_0.B"), "--out", str(out)]) == 0
    cmp = pd.read_csv(out / "comparison.csv")
    assert cmp["Model Code"].tolist()[0] == "S_BYM.T_0.ST_0.B"
    assert list(pd.read_csv(out / "residual_moran_S_BYM.T_0.ST_0.B.csv").columns[:3]) == \
        ["Month", "Moran's I", "p-value"]
    assert set(pd.read_csv(out / "spatial_effects_S_0.T_0.ST_0.B.csv", keep_default_na=False)["class"]) == {"n/a"}
    assert "Model Code" in capsys.readouterr().out


def test_config_file_and_flag_override(sim, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('spec = "S_0.T_0.ST_0.B"\nseed = 9\n[mcmc]\nn_iter = 300\nn_burnin = 150\n'
                   'n_chains = 1\n[prior.fixed]\nsd = 10.0\n')
    assert main(["fit", str(sim / "s"), "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "f")]) == 0
    resolved = json.loads((tmp_path / "f" / "config.json").read_text())
    assert resolved["seed"] == 4 and resolved["mcmc"]["n_iter"] == 300
    assert resolved["priors"]["prior.fixed.sd"] == 10.0


def test_exit_codes(sim, tmp_path, capsys):
    assert main(["fit", str(sim / "s"), "--spec", "S_X", "--out", str(tmp_path / "x")]) == 2
    assert "S_BYM.T_RW1.ST_1.B" in capsys.readouterr().err
    assert main(["ingest", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "c.csv")]) == 2
    assert main(["bogus"]) == 2
    assert main(["fit", str(sim / "s"), "--spec", "S_0.T_0.ST_0.B", "--iter", "201", "--burnin", "200",
                 "--chains", "1", "--out", str(tmp_path / "y")]) == 1


def test_journeys_ingest_round_trip(tmp_path):
    d = tmp_path / "j"
    assert main(["simulate", "--journeys", "--months", "1", "--journeys-per-region", "200",
                 "--seed", "3", "--out", str(d)]) == 0
    with open(d / "events.csv", "a") as fh:
        fh.write("broken,row\n")
    assert main(["ingest", str(d / "events.csv"), "--out", str(d / "c.csv")]) == 0
    report = json.loads((d / "c_report.json").read_text())
    assert report["n_malformed"] == 1
    assert len(pd.read_csv(d / "c.csv")) == 99
