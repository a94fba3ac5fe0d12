"""Scoring and diagnostics for posterior fits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import betainc, expit, logsumexp

from .autocorr import MonthlyMoran, moran_by_month
from .graph import RegionGraph
from .model import beta_loglik
from .sampler import PosteriorFit

COMPARISON_COLUMNS = ("No", "Model Code", "DIC", "RMSE", "MAE", "CPO")


class NotApplicableError(ValueError):
    """The quantity needs a spatial (BYM) term the model does not have."""


@dataclass
class EvalReport:
    spec_code: str
    DIC: float
    p_D: float
    D_bar: float
    mean_CPO: float
    LPML: float
    RMSE: float
    MAE: float
    spatial_fraction: float | None = None
    pit_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    residual_moran: list = field(default_factory=list)
    spatial_fraction_of_means: float | None = None
    flagged_cpo: list = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        if abs(self.DIC - (self.D_bar + self.p_D)) > 1e-9 * max(1.0, abs(self.DIC)):
            raise ValueError("DIC must equal D_bar + p_D")


# -- DIC ---------------------------------------------------------------------

def dic_from_deviances(deviances, deviance_at_mean):
    """``(DIC, p_D, D_bar)`` from per-draw deviances and ``D(theta_bar)``."""
    d = np.asarray(deviances, dtype=float)
    if d.size < 2:
        raise ValueError("DIC needs at least two retained draws")
    d_bar = float(d.mean())
    p_d = d_bar - float(deviance_at_mean)
    return d_bar + p_d, p_d, d_bar


def deviance_at_mean(fit: PosteriorFit):
    """Deviance at the posterior mean of the linear predictor and of ``tau_b``."""
    tau = float(np.mean(fit.samples["tau_b"]))
    if fit.likelihood == "gaussian":
        r = fit.y_obs - fit.lin_mean
        ll = 0.5 * (math.log(tau) - math.log(2 * math.pi)) - 0.5 * tau * r * r
    else:
        ll = beta_loglik(fit.y_obs, expit(fit.lin_mean), tau)
    return -2.0 * float(np.sum(ll))


def dic(fit: PosteriorFit):
    """``(DIC, p_D, D_bar)`` with ``D_m = -2 sum_j loglik_jm``."""
    return dic_from_deviances(-2.0 * fit.loglik.sum(axis=1), deviance_at_mean(fit))


# -- CPO ---------------------------------------------------------------------

@dataclass(frozen=True)
class CpoResult:
    cpo: np.ndarray
    mean_cpo: float
    lpml: float
    flagged: tuple


def cpo_from_loglik(loglik):
    """Harmonic-mean CPO from ``(n_draws, n_obs)`` log-likelihood draws.

    ``log CPO_j = log M - logsumexp_m(-loglik_jm)``. Observations whose CPO is
    not finite are listed in ``flagged`` and left out of the mean and LPML.
    """
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 1:
        raise ValueError("loglik must be (n_draws, n_obs)")
    with np.errstate(over="ignore", invalid="ignore"):
        log_cpo = math.log(ll.shape[0]) - logsumexp(-ll, axis=0)
    ok = np.isfinite(log_cpo)
    flagged = tuple(int(j) for j in np.flatnonzero(~ok))
    cpo = np.exp(log_cpo)
    return CpoResult(cpo, float(np.mean(cpo[ok])) if ok.any() else float("nan"),
                     float(np.sum(log_cpo[ok])), flagged)


def cpo(fit: PosteriorFit) -> CpoResult:
    return cpo_from_loglik(fit.loglik)


# -- point accuracy ------------------------------------------------------------

def rmse_mae(observed, fitted):
    """Root mean square and mean absolute error."""
    o = np.asarray(observed, dtype=float).ravel()
    p = np.asarray(fitted, dtype=float).ravel()
    if o.size != p.size:
        raise ValueError(f"length mismatch: {o.size} observed, {p.size} fitted")
    if o.size == 0:
        raise ValueError("need at least one observation")
    e = o - p
    return float(np.sqrt(np.mean(e * e))), float(np.mean(np.abs(e)))


# -- PIT ---------------------------------------------------------------------

def pit_from_draws(y, mu_draws, tau_draws, chunk=256):
    """``PIT_j = mean_m BetaCDF(y_j; mu_jm tau_m, (1 - mu_jm) tau_m)``."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu_draws, dtype=float)
    tau = np.asarray(tau_draws, dtype=float)
    if mu.ndim == 1:
        mu = mu[None, :]
    tau = np.broadcast_to(tau.reshape(-1, 1) if tau.ndim else tau, (mu.shape[0], 1))
    total = np.zeros(y.size)
    for s in range(0, mu.shape[0], chunk):
        m, t = mu[s:s + chunk], tau[s:s + chunk]
        total += betainc(m * t, (1 - m) * t, y[None, :]).sum(axis=0)
    return np.clip(total / mu.shape[0], 0.0, 1.0)


def pit(fit: PosteriorFit):
    if fit.likelihood != "beta":
        raise NotApplicableError("PIT is defined for the beta likelihood only")
    return pit_from_draws(fit.y_obs, fit.fitted_mu, fit.samples["tau_b"])


def pit_histogram(values, n_bins=10):
    """``(bin_left, bin_right, count)`` table over [0, 1]."""
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    counts, _ = np.histogram(np.asarray(values, dtype=float), bins=edges)
    return pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts})


def ks_uniform(values):
    """Kolmogorov-Smirnov distance of ``values`` from Uniform(0, 1)."""
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - x), np.max(x - (i - 1) / n)))


# -- spatial fraction ------------------------------------------------------------

def spatial_fraction_from_precisions(tau_u, tau_v):
    """Per-draw mean of ``s_u^2 / (s_u^2 + s_v^2)`` and the ratio of means.

    Written in precisions, ``s_u^2 / (s_u^2 + s_v^2) = tau_v / (tau_u + tau_v)``,
    which stays in [0, 1] for any positive (or infinite) precisions.
    """
    tu = np.asarray(tau_u, dtype=float)
    tv = np.asarray(tau_v, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        var_u, var_v = 1.0 / tu, 1.0 / tv
        per = var_u / (var_u + var_v)
        ratio = float(np.mean(var_u) / (np.mean(var_u) + np.mean(var_v)))
    return float(np.clip(np.mean(per), 0.0, 1.0)), ratio


def spatial_fraction(fit: PosteriorFit):
    if not fit.spec.has_bym:
        raise NotApplicableError(f"{fit.spec.code} has no BYM term")
    return spatial_fraction_from_precisions(fit.samples["tau_u"], fit.samples["tau_v"])[0]


# -- residual autocorrelation -----------------------------------------------------

def residual_grid(fit: PosteriorFit, n_regions, n_months):
    """``y - posterior mean fitted rate`` on the region x month grid (NaN if missing)."""
    grid = np.full((n_regions, n_months), np.nan)
    grid[fit.obs_region, fit.obs_month] = fit.y_obs - fit.mean_fitted()
    return grid


def observed_grid(fit: PosteriorFit, n_regions, n_months):
    grid = np.full((n_regions, n_months), np.nan)
    grid[fit.obs_region, fit.obs_month] = fit.y_obs
    return grid


def residual_moran(fit: PosteriorFit, graph: RegionGraph, style="binary", **kw):
    """Moran test on the response residuals of every month."""
    grid = residual_grid(fit, graph.n_regions, len(fit.months))
    return moran_by_month(grid, graph, fit.months, style=style, **kw)


def moran_frame(results: list[MonthlyMoran]):
    rows = []
    for r in results:
        if r.status == "ok":
            res = r.result
            row = {"Month": r.month, "Moran's I": res.I, "p-value": res.p_one_sided,
                   "expected_I": res.expected_I, "variance_I": res.variance_I, "z": res.z,
                   "p_two_sided": res.p_two_sided, "n_used": res.n_used, "status": "ok"}
            if res.p_perm is not None:
                row["p_perm"] = res.p_perm
        else:
            row = {"Month": r.month, "Moran's I": np.nan, "p-value": np.nan, "status": r.status,
                   "note": r.note}
        rows.append(row)
    return pd.DataFrame(rows)


# -- structured spatial effect ------------------------------------------------------

def spatial_effect_export(fit: PosteriorFit, region_ids=None):
    """``exp(posterior mean u_i)`` with ``above_1`` for values >= 1."""
    if not fit.spec.has_bym:
        raise NotApplicableError(f"{fit.spec.code} has no BYM term")
    ids = list(region_ids) if region_ids is not None else list(fit.region_ids)
    u_mean = fit.samples["u"].mean(axis=0)
    if len(ids) != u_mean.size:
        raise ValueError("region_ids length does not match the fitted field")
    val = np.exp(u_mean)
    return pd.DataFrame({"region_id": ids, "exp_u": val,
                         "class": np.where(val >= 1.0, "above_1", "below_1")})


def spatial_effect_geojson(effects: pd.DataFrame, geojson_path, out_path, id_property="region_id"):
    """Copy a GeoJSON file adding ``exp_u`` and ``class`` to each feature."""
    data = json.loads(Path(geojson_path).read_text())
    lookup = {str(r.region_id): (float(r.exp_u), r["class"]) for _, r in effects.iterrows()}
    for feat in data["features"]:
        rid = str(feat["properties"].get(id_property))
        if rid in lookup:
            feat["properties"]["exp_u"], feat["properties"]["class"] = lookup[rid]
    Path(out_path).write_text(json.dumps(data) + "\n")


# -- full report and comparison -----------------------------------------------------

def evaluate(fit: PosteriorFit, graph: RegionGraph | None = None, label="", moran_style="binary"):
    """All scores for one fit."""
    graph = graph if graph is not None else fit.graph
    dic_val, p_d, d_bar = dic(fit)
    c = cpo(fit)
    rmse, mae = rmse_mae(fit.y_obs, fit.mean_fitted())
    frac = frac_ratio = None
    if fit.spec.has_bym:
        frac, frac_ratio = spatial_fraction_from_precisions(fit.samples["tau_u"], fit.samples["tau_v"])
    pit_vals = pit(fit) if fit.likelihood == "beta" else np.zeros(0)
    moran = residual_moran(fit, graph, moran_style) if graph is not None else []
    return EvalReport(fit.spec.code, dic_val, p_d, d_bar, c.mean_cpo, c.lpml, rmse, mae, frac,
                      pit_vals, moran, frac_ratio, list(c.flagged), label)


def compare(reports):
    """Comparison table sorted by DIC, then RMSE, then MAE; the first row is selected."""
    if not reports:
        raise ValueError("need at least one report")
    order = sorted(range(len(reports)), key=lambda k: (reports[k].DIC, reports[k].RMSE, reports[k].MAE))
    rows = []
    for rank, k in enumerate(order):
        r = reports[k]
        rows.append({
            "No": k + 1,
            "Model Code": r.spec_code,
            "DIC": r.DIC,
            "RMSE": r.RMSE,
            "MAE": r.MAE,
            "CPO": r.mean_CPO,
            "p_D": r.p_D,
            "D_bar": r.D_bar,
            "LPML": r.LPML,
            "spatial_fraction": "n/a" if r.spatial_fraction is None else r.spatial_fraction,
            "selected": rank == 0,
        })
    return pd.DataFrame(rows)
