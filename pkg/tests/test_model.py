import math

import numpy as np
import pytest
from scipy import integrate, stats

from beltfield import model as M
from beltfield.graph import from_adjacency_list, icar_precision

from conftest import grid_graph


def pseudo_logdet(Q, tol=1e-10):
    lam = np.linalg.eigvalsh(Q)
    return float(np.sum(np.log(lam[lam > tol * lam.max()])))


def constrained(rng, n, groups):
    x = rng.normal(size=n)
    for g in groups:
        x[g] -= x[g].mean()
    return x


# -- spec parsing ----------------------------------------------------------------

@pytest.mark.parametrize("no,spec", sorted(M.MODEL_SPECS.items()))
def test_table_codes_round_trip(no, spec):
    assert M.ModelSpec.parse(spec.code) == spec


def test_spec_flags_and_errors():
    s = M.ModelSpec.parse("S_BYM.T_RW1.ST_1.B")
    assert s.has_bym and s.has_field_time and s.interaction
    assert not M.ModelSpec.parse("S_BYM.T_L.ST_0.B").has_field_time
    with pytest.raises(M.SpecError, match="valid codes"):
        M.ModelSpec.parse("S_CAR.T_0.ST_0.B")
    with pytest.raises(M.SpecError):
        M.ModelSpec.parse("S_0.T_0.ST_1.B")


def test_priors_mapping():
    p = M.Priors.from_mapping({"prior": {"fixed": {"sd": 3.0}}})
    assert p.fixed_sd == 3.0 and p.precision_rate == M.Priors().precision_rate
    assert M.Priors.from_mapping(p.to_mapping()) == p
    with pytest.raises(KeyError):
        M.Priors.from_mapping({"prior.nope": 1})
    with pytest.raises(ValueError):
        M.Priors(fixed_sd=-1.0)


# -- beta likelihood ----------------------------------------------------------------

def test_beta_loglik_integrates_to_one():
    rng = np.random.default_rng(11)
    for mu, tau in zip(rng.uniform(0.05, 0.95, 20), np.exp(rng.uniform(np.log(2), np.log(200), 20))):
        val, _ = integrate.quad(lambda y: math.exp(M.beta_loglik(y, mu, tau)), 0, 1,
                                epsabs=1e-12, epsrel=1e-12, limit=200)
        assert abs(val - 1) < 1e-8


def test_beta_loglik_values():
    assert M.beta_loglik(0.5, 0.5, 2) == 0.0
    y = np.array([0.2, 0.7])
    np.testing.assert_allclose(M.beta_loglik(y, 0.4, 12.0), stats.beta.logpdf(y, 4.8, 7.2))
    for bad in [(0.0, 0.5, 2), (0.5, 1.0, 2), (0.5, 0.5, 0.0), (0.5, 0.5, np.inf)]:
        with pytest.raises(ValueError):
            M.beta_loglik(*bad)


# -- GMRF densities against dense normal oracles --------------------------------------

@pytest.mark.parametrize("n", [2, 5, 8])
def test_icar_matches_pseudo_determinant_oracle(n):
    rng = np.random.default_rng(n)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.uniform() < 0.4]
    g = from_adjacency_list(n, pairs)
    Q = icar_precision(g).toarray()
    tau = 2.7
    u = constrained(rng, n, g.components)
    # constant-free convention: drop -rank/2 log(2 pi) and the pseudo-determinant of Q
    rank = np.linalg.matrix_rank(Q) if Q.any() else 0
    oracle = 0.5 * rank * math.log(tau) - 0.5 * tau * u @ Q @ u
    full = oracle - 0.5 * rank * M.LOG_2PI + 0.5 * (pseudo_logdet(Q) if rank else 0.0)
    got = M.icar_logdensity(u, tau, g)
    assert got == pytest.approx(oracle, abs=1e-10)
    assert got - 0.5 * rank * M.LOG_2PI + 0.5 * (pseudo_logdet(Q) if rank else 0.0) == pytest.approx(full, abs=1e-10)


def test_icar_rejects_unconstrained():
    g = grid_graph(2, 2)
    with pytest.raises(M.ConstraintError):
        M.icar_logdensity(np.ones(4), 1.0, g)


@pytest.mark.parametrize("T", [1, 2, 5, 8])
@pytest.mark.parametrize("rho", [-0.6, 0.0, 0.45, 0.95])
def test_ar1_matches_mvn(T, rho):
    rng = np.random.default_rng(T)
    phi = rng.normal(size=T)
    tau = 1.8
    Q = M.ar1_precision(T, rho, tau)
    oracle = stats.multivariate_normal(np.zeros(T), np.linalg.inv(Q)).logpdf(phi)
    assert M.ar1_logdensity(phi, rho, tau) == pytest.approx(oracle, abs=1e-10)


def test_ar1_near_zero_rho_is_iid():
    phi = np.linspace(-1, 1, 7)
    rho, tau = 1e-6, 3.0
    gap = M.ar1_logdensity(phi, rho, tau) - M.iid_logdensity(phi, tau)
    # first-order expansion in rho; the remainder is O(rho^2)
    assert gap == pytest.approx(rho * tau * float(phi[1:] @ phi[:-1]), abs=1e-10)
    assert math.exp(M.ar1_logdensity(phi, rho, tau)) == pytest.approx(
        math.exp(M.iid_logdensity(phi, tau)), abs=1e-8)


@pytest.mark.parametrize("T", [2, 4, 8])
def test_rw1_matches_pseudo_determinant_oracle(T):
    rng = np.random.default_rng(T)
    phi = rng.normal(size=T)
    phi -= phi.mean()
    tau = 0.7
    S = M.rw1_structure(T)
    assert np.linalg.matrix_rank(S) == T - 1
    oracle = 0.5 * (T - 1) * math.log(tau) - 0.5 * tau * phi @ S @ phi
    assert M.rw1_logdensity(phi, tau) == pytest.approx(oracle, abs=1e-10)
    # the full degenerate normal differs only by a phi-free constant
    full = oracle - 0.5 * (T - 1) * M.LOG_2PI + 0.5 * pseudo_logdet(S)
    phi2 = rng.normal(size=T)
    phi2 -= phi2.mean()
    full2 = M.rw1_logdensity(phi2, tau) - 0.5 * (T - 1) * M.LOG_2PI + 0.5 * pseudo_logdet(S)
    assert full - full2 == pytest.approx(M.rw1_logdensity(phi, tau) - M.rw1_logdensity(phi2, tau))


def test_iid_and_normal():
    x = np.array([0.3, -1.2])
    assert M.iid_logdensity(x, 4.0) == pytest.approx(stats.norm(0, 0.5).logpdf(x).sum())
    assert M.normal_logdensity(x, 2.0) == pytest.approx(stats.norm(0, 2).logpdf(x).sum())


def test_rho_transform_and_prior():
    for rho in (-0.9, 0.0, 0.3, 0.99):
        assert M.theta_to_rho(M.rho_to_theta(rho)) == pytest.approx(rho)
    assert M.rho_to_theta(0.0) == 0.0
    assert M.rho_prior(0.0, 2.5) == pytest.approx(stats.norm(0, 2.5).logpdf(0))


def test_log_precision_prior_is_density_of_log_tau():
    val, _ = integrate.quad(lambda lt: math.exp(M.log_precision_prior(math.exp(lt), 2.0, 0.5)), -30, 10)
    assert val == pytest.approx(1.0, abs=1e-7)


# -- joint density ---------------------------------------------------------------------

def test_log_joint_terms_by_spec(small_panel, grid3):
    R, T, K = small_panel.n_regions, small_panel.n_months, small_panel.n_covariates
    st = M.LatentState.zeros(R, T, K)
    h = M.HyperParams()
    full = M.log_joint_terms(small_panel, grid3, M.ModelSpec.parse("S_BYM.T_AR1.ST_1.B"), st, h)
    assert {"prior.u", "prior.v", "prior.phi", "prior.eta", "hyper.rho"} <= set(full)
    base = M.log_joint_terms(small_panel, grid3, M.ModelSpec.parse("S_0.T_0.ST_0.B"), st, h)
    assert set(base) == {"likelihood", "prior.intercept", "prior.beta", "hyper.tau_b"}
    mu = 0.5
    obs = small_panel.y[small_panel.observed]
    assert base["likelihood"] == pytest.approx(M.beta_loglik(obs, mu, h.tau_b).sum())
    assert M.log_joint(small_panel, grid3, M.ModelSpec.parse("S_0.T_0.ST_0.B"), st, h) == pytest.approx(sum(base.values()))


def test_linear_predictor_grid_matches_cellwise(small_panel, grid3):
    rng = np.random.default_rng(3)
    R, T = small_panel.n_regions, small_panel.n_months
    u = constrained(rng, R, grid3.components)
    st = M.LatentState(0.2, np.array([0.4]), u, rng.normal(size=R), rng.normal(size=T), 0.1,
                       rng.normal(size=(R, T)))
    for code in ("S_BYM.T_L.ST_1.B", "S_BYM.T_AR1.ST_1.B"):
        spec = M.ModelSpec.parse(code)
        grid = M.linear_predictor_grid(st, spec, small_panel.X)
        for i, t in [(0, 0), (4, 3), (8, 5)]:
            assert grid[i, t] == pytest.approx(M.linear_predictor(st, spec, small_panel.X[i, t], i, t))
