import json

import numpy as np
import pytest
from scipy import stats

from beltfield.evaluation import (EvalReport, NotApplicableError, compare, cpo_from_loglik,
                                  dic_from_deviances, evaluate, ks_uniform, moran_frame,
                                  pit_from_draws, pit_histogram, rmse_mae, spatial_effect_export,
                                  spatial_effect_geojson, spatial_fraction,
                                  spatial_fraction_from_precisions)
from beltfield.sampler import McmcConfig, fit

SHORT = McmcConfig(n_iter=400, n_burnin=200, n_thin=2, n_chains=2, seed=1)


@pytest.fixture(scope="module")
def fits():
    from conftest import grid_graph
    from beltfield.panel import panel_from_arrays
    g = grid_graph(3, 3)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(9, 1))
    rate = 1 / (1 + np.exp(-(0.3 + 0.5 * x + rng.normal(scale=0.2, size=(9, 6)))))
    p = panel_from_arrays(rate, np.full((9, 6), 200), x, region_ids=g.region_ids)
    return g, {c: fit(p, g, c, config=SHORT) for c in ("S_0.T_0.ST_0.B", "S_BYM.T_AR1.ST_1.B")}


def test_dic_toy():
    assert dic_from_deviances([10, 14], 11) == (13.0, 1.0, 12.0)
    with pytest.raises(ValueError):
        dic_from_deviances([10], 11)


def test_report_enforces_dic_identity():
    with pytest.raises(ValueError):
        EvalReport("x", DIC=5.0, p_D=1.0, D_bar=3.0, mean_CPO=1, LPML=0, RMSE=0, MAE=0)


def test_cpo_constant_loglik():
    ll = np.log(np.full((50, 3), 0.2))
    res = cpo_from_loglik(ll)
    np.testing.assert_allclose(res.cpo, 0.2)
    assert res.lpml == pytest.approx(3 * np.log(0.2))


def test_cpo_harmonic_mean_and_flagging():
    ll = np.log(np.array([[0.5, 1.0], [0.25, 1.0]]))
    res = cpo_from_loglik(ll)
    assert res.cpo[0] == pytest.approx(1 / 3)  # 2 / (2 + 4)
    flagged = cpo_from_loglik(np.array([[-np.inf, 0.0], [-np.inf, 0.0]]))
    assert flagged.flagged == (0,) and flagged.mean_cpo == pytest.approx(1.0)


def test_rmse_mae():
    assert rmse_mae([0, 0], [3, -4]) == (pytest.approx(np.sqrt(12.5)), 3.5)
    with pytest.raises(ValueError):
        rmse_mae([1], [1, 2])


def test_pit_exact_predictive_is_uniform():
    rng = np.random.default_rng(0)
    mu, tau = 0.3, 40.0
    y = rng.beta(mu * tau, (1 - mu) * tau, 4000)
    pit = pit_from_draws(y, np.full((5, y.size), mu), np.full(5, tau))
    assert ks_uniform(pit) < 0.03
    assert pit_histogram(pit, 4)["count"].sum() == 4000


def test_ks_uniform_matches_scipy():
    x = np.random.default_rng(2).uniform(size=300) ** 1.3
    assert ks_uniform(x) == pytest.approx(stats.kstest(x, "uniform").statistic)


def test_spatial_fraction_properties():
    assert spatial_fraction_from_precisions(np.array([1 / 3]), np.array([1.0]))[0] == 0.75
    rng = np.random.default_rng(1)
    tu, tv = np.exp(rng.normal(0, 5, 1000)), np.exp(rng.normal(0, 5, 1000))
    f, ratio = spatial_fraction_from_precisions(tu, tv)
    assert 0 <= f <= 1 and 0 <= ratio <= 1
    assert spatial_fraction_from_precisions([np.inf], [1.0])[0] == 0.0


def test_evaluate_and_compare(fits, tmp_path):
    g, fs = fits
    reports = [evaluate(f, g) for f in fs.values()]
    for r in reports:
        assert r.DIC == pytest.approx(r.D_bar + r.p_D, abs=1e-9)
        assert len(r.residual_moran) == 6
        assert r.pit_values.size == 54
    table = compare(reports)
    assert list(table["DIC"]) == sorted(table["DIC"])
    assert table["selected"].tolist() == [True, False]
    row1 = table.set_index("Model Code").loc["S_0.T_0.ST_0.B"]
    assert row1["spatial_fraction"] == "n/a"
    assert moran_frame(reports[0].residual_moran).columns[:3].tolist() == ["Month", "Moran's I", "p-value"]


def test_spatial_effects_gated_and_exported(fits, tmp_path):
    g, fs = fits
    with pytest.raises(NotApplicableError):
        spatial_fraction(fs["S_0.T_0.ST_0.B"])
    with pytest.raises(NotApplicableError):
        spatial_effect_export(fs["S_0.T_0.ST_0.B"])
    eff = spatial_effect_export(fs["S_BYM.T_AR1.ST_1.B"])
    assert set(eff["class"]) <= {"above_1", "below_1"}
    assert np.all((eff["exp_u"] >= 1) == (eff["class"] == "above_1"))
    fc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"region_id": r}, "geometry": None} for r in g.region_ids]}
    src = tmp_path / "in.geojson"
    src.write_text(json.dumps(fc))
    spatial_effect_geojson(eff, src, tmp_path / "out.geojson")
    out = json.loads((tmp_path / "out.geojson").read_text())
    assert all("exp_u" in f["properties"] for f in out["features"])
