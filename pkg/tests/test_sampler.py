import numpy as np
import pytest
from scipy import stats

from beltfield.graph import from_adjacency_list, icar_precision
from beltfield.model import MODEL_SPECS, Priors
from beltfield.panel import panel_from_arrays
from beltfield.sampler import (AdaptationError, GaussianLikelihood, McmcConfig, SamplerError,
                               checksum_dir, convergence, effective_sample_size, fit, load_fit,
                               resolve_threads, save_fit, split_rhat, summarize, summary_frame)

SHORT = McmcConfig(n_iter=400, n_burnin=200, n_thin=2, n_chains=2, seed=3)


@pytest.fixture(scope="module")
def bym_fit():
    from conftest import grid_graph
    g = grid_graph(3, 3)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(9, 1))
    rate = 1 / (1 + np.exp(-(0.3 + 0.5 * x + rng.normal(scale=0.2, size=(9, 6)))))
    p = panel_from_arrays(rate, np.full((9, 6), 200), x, region_ids=g.region_ids, covariate_names=["x"])
    return p, g, fit(p, g, "S_BYM.T_AR1.ST_1.B", config=SHORT)


def test_config_validation():
    with pytest.raises(ValueError):
        McmcConfig(n_iter=10, n_burnin=10)
    with pytest.raises(ValueError):
        McmcConfig(n_thin=0)
    assert McmcConfig(n_iter=100, n_burnin=50, n_thin=5).n_keep == 10


@pytest.mark.parametrize("spec", [s.code for s in MODEL_SPECS.values()])
def test_every_spec_runs(small_panel, grid3, spec):
    f = fit(small_panel, grid3, spec, config=SHORT)
    assert f.n_draws == 2 * SHORT.n_keep
    assert f.fitted_mu.shape == f.loglik.shape == (f.n_draws, small_panel.n_observed)
    assert np.all((f.fitted_mu > 0) & (f.fitted_mu < 1))
    assert np.all(np.isfinite(f.loglik))
    if "u" in f.samples:
        np.testing.assert_allclose(f.samples["u"].sum(axis=1), 0, atol=1e-8)
    if f.spec.temporal == "rw1":
        np.testing.assert_allclose(f.samples["phi"].sum(axis=1), 0, atol=1e-8)
    if f.spec.temporal == "ar1":
        assert np.all(np.abs(f.samples["rho"]) < 1)


def test_same_seed_same_draws_any_threads(small_panel, grid3):
    a = fit(small_panel, grid3, "S_BYM.T_RW1.ST_1.B", config=SHORT, threads=1)
    b = fit(small_panel, grid3, "S_BYM.T_RW1.ST_1.B", config=SHORT, threads=2)
    for k in a.samples:
        np.testing.assert_array_equal(a.samples[k], b.samples[k])
    c = fit(small_panel, grid3, "S_BYM.T_RW1.ST_1.B",
            config=McmcConfig(n_iter=400, n_burnin=200, n_thin=2, n_chains=2, seed=4))
    assert not np.array_equal(a.samples["alpha"], c.samples["alpha"])


def test_missing_cells_are_skipped(grid3):
    rng = np.random.default_rng(0)
    rate = rng.uniform(0.3, 0.7, (9, 4))
    counts = np.full((9, 4), 50)
    counts[2, 1] = counts[7, 3] = 0
    p = panel_from_arrays(rate, counts, region_ids=grid3.region_ids)
    f = fit(p, grid3, "S_BYM.T_AR1.ST_1.B", config=SHORT)
    assert f.n_obs == 34
    assert f.eta_mean.shape == (9, 4)


def test_threads_resolution(monkeypatch):
    monkeypatch.setenv("BELTFIELD_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.delenv("BELTFIELD_THREADS")
    assert resolve_threads(None) == 1


def test_summary_and_errors(bym_fit):
    _, _, f = bym_fit
    rows = summarize(f, min_draws=10)
    names = [r.name for r in rows]
    assert names[:2] == ["(Intercept)", "x"] and "rho" in names
    df = summary_frame(rows)
    assert list(df.columns) == ["Parameter", "Mean", "SD", "0.025quant", "0.975quant"]
    assert np.all(df["0.025quant"] <= df["0.975quant"])
    with pytest.raises(KeyError, match="available"):
        summarize(f, ["nope"], min_draws=10)
    with pytest.raises(ValueError):
        summarize(f, min_draws=f.n_draws + 1)


def test_fit_artifact_round_trip(bym_fit, tmp_path):
    p, g, f = bym_fit
    save_fit(f, tmp_path / "a")
    save_fit(f, tmp_path / "b")
    assert checksum_dir(tmp_path / "a") == checksum_dir(tmp_path / "b")
    back = load_fit(tmp_path / "a")
    assert back.spec == f.spec and back.panel_checksum == p.checksum()
    for k in f.samples:
        np.testing.assert_array_equal(back.samples[k], f.samples[k])
    np.testing.assert_array_equal(back.loglik_samples, f.loglik_samples)
    assert back.graph.equals(g)


def test_adaptation_failure_raises(small_panel, grid3):
    with pytest.raises(AdaptationError):
        fit(small_panel, grid3, "S_0.T_0.ST_0.B",
            config=McmcConfig(n_iter=201, n_burnin=200, n_chains=1))


def test_split_rhat_and_ess():
    rng = np.random.default_rng(0)
    good = rng.normal(size=(4, 2000))
    assert split_rhat(good) == pytest.approx(1.0, abs=0.01)
    bad = good + np.arange(4)[:, None]
    assert split_rhat(bad) > 1.5
    assert effective_sample_size(good) == pytest.approx(8000, rel=0.15)
    ar = np.zeros((2, 5000))
    for t in range(1, 5000):
        ar[:, t] = 0.9 * ar[:, t - 1] + rng.normal(size=2)
    # AR(1) with phi = 0.9 has ESS ratio (1 - phi) / (1 + phi)
    assert effective_sample_size(ar) == pytest.approx(10000 * 0.1 / 1.9, rel=0.3)
    rows = convergence({"a": good, "b": bad})
    assert [r.flagged for r in rows] == [False, True]


# -- exact posterior oracle under a Gaussian likelihood -----------------------------

def _bym_oracle(y, X, Q, tau_e, priors, grid):
    R, T = y.shape
    lam, E = np.linalg.eigh(Q)
    inv = np.where(lam > 1e-9, 1 / np.where(lam > 1e-9, lam, 1), 0)
    Qp = (E * inv) @ E.T
    Z = np.kron(np.column_stack([np.ones(R), X]), np.ones((T, 1)))
    A = np.kron(np.eye(R), np.ones((T, 1)))
    yv = y.ravel()
    V0 = priors.fixed_sd ** 2 * np.eye(Z.shape[1])
    a, b = priors.precision_shape, priors.precision_rate
    logw, means, second = [], [], []
    for ltu in grid:
        for ltv in grid:
            tu, tv = np.exp(ltu), np.exp(ltv)
            C = A @ (Qp / tu + np.eye(R) / tv) @ A.T + np.eye(yv.size) / tau_e
            lw = stats.multivariate_normal(np.zeros(yv.size), Z @ V0 @ Z.T + C).logpdf(yv)
            logw.append(lw + a * ltu - b * tu + a * ltv - b * tv)
            Ci = np.linalg.inv(C)
            Pi = np.linalg.inv(np.linalg.inv(V0) + Z.T @ Ci @ Z)
            m = Pi @ Z.T @ Ci @ yv
            means.append(m)
            second.append(Pi + np.outer(m, m))
    w = np.exp(np.array(logw) - max(logw))
    w /= w.sum()
    mean = w @ np.array(means)
    sec = np.einsum("g,gkl->kl", w, np.array(second))
    return mean, np.sqrt(np.diag(sec) - mean ** 2)


@pytest.mark.slow
def test_bym_matches_exact_posterior():
    rng = np.random.default_rng(1)
    R, T = 8, 3
    g = from_adjacency_list(R, [(i, i + 1) for i in range(R - 1)] + [(0, 2), (3, 6), (1, 4)])
    X = rng.uniform(-1, 1, (R, 1))
    u = rng.standard_normal(R)
    u -= u.mean()
    tau_e = 25.0
    y = 0.3 + 0.8 * X + 0.7 * u[:, None] + rng.standard_normal((R, T)) / np.sqrt(tau_e)
    mean, sd = _bym_oracle(y, X[:, 0], icar_precision(g).toarray(), tau_e, Priors(),
                           np.linspace(-6, 14, 61))

    class Fixed(GaussianLikelihood):
        def bind(self, y_obs):
            self.y = y.ravel()
            return self

    p = panel_from_arrays(np.full((R, T), 0.5), np.ones((R, T), int), X)
    f = fit(p, g, "S_BYM.T_0.ST_0.B", _likelihood=Fixed(tau_e),
            config=McmcConfig(n_iter=30000, n_burnin=5000, n_thin=5, n_chains=2, seed=1))
    for k, draws in enumerate([f.samples["alpha"], f.samples["beta"][:, 0]]):
        ess = effective_sample_size(f.by_chain(draws))
        mc_se = sd[k] / np.sqrt(ess)
        assert abs(draws.mean() - mean[k]) < 4 * mc_se
        assert draws.std() == pytest.approx(sd[k], rel=0.1)
