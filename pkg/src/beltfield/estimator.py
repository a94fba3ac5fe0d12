"""scikit-learn style front end to the sampler."""

from __future__ import annotations

import numpy as np
import pandas as pd
from scipy.special import expit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .graph import GraphError, RegionGraph, from_adjacency_list
from .model import ModelSpec, Priors, centered_months
from .panel import Panel, PanelError, panel_from_arrays
from .sampler import McmcConfig, fit as run_mcmc, summarize, summary_frame


def check_graph(graph, n_regions=None):
    """Validate a :class:`RegionGraph` and, optionally, its size."""
    if not isinstance(graph, RegionGraph):
        raise TypeError(f"expected a RegionGraph, got {type(graph).__name__}")
    if n_regions is not None and graph.n_regions != n_regions:
        raise GraphError(f"graph has {graph.n_regions} regions, expected {n_regions}")
    return graph


def check_panel(panel, graph=None):
    """Validate a :class:`Panel` against an optional graph."""
    if not isinstance(panel, Panel):
        raise TypeError(f"expected a Panel, got {type(panel).__name__}")
    if panel.n_observed == 0:
        raise PanelError("panel has no observed cells")
    obs = panel.observed
    if not np.all((panel.y[obs] > 0) & (panel.y[obs] < 1)):
        raise PanelError("observed rates must lie in (0, 1)")
    if not np.all(np.isfinite(panel.X)):
        raise PanelError("covariates must be finite")
    if graph is not None:
        check_graph(graph, panel.n_regions)
        if graph.region_ids is not None and tuple(graph.region_ids) != tuple(panel.region_ids):
            raise GraphError("graph region_ids are not in panel order")
    return panel


def panel_from_long(X, y, region_index, month_index, n_regions=None, n_months=None,
                    region_ids=None):
    """Panel from long-format arrays of observed cells.

    ``y`` is taken as already inside (0, 1); no boundary adjustment.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim == 1:
        X = X[:, None]
    i = np.asarray(region_index, dtype=np.int64).ravel()
    t = np.asarray(month_index, dtype=np.int64).ravel()
    if not (X.shape[0] == y.size == i.size == t.size):
        raise ValueError("X, y, region_index and month_index must have equal length")
    if i.size and (i.min() < 0 or t.min() < 0):
        raise ValueError("indices must be non-negative")
    R = int(n_regions if n_regions is not None else i.max() + 1)
    T = int(n_months if n_months is not None else t.max() + 1)
    if np.unique(i * T + t).size != i.size:
        raise ValueError("duplicate (region, month) cell")
    rate = np.full((R, T), np.nan)
    counts = np.zeros((R, T), dtype=np.int64)
    cov = np.zeros((R, T, X.shape[1]))
    rate[i, t] = y
    counts[i, t] = 1
    cov[i, t] = X
    return panel_from_arrays(rate, counts, cov, region_ids=region_ids, adjust=False)


class SpatioTemporalBetaRegressor(RegressorMixin, BaseEstimator):
    """Bayesian beta regression with BYM spatial and AR1/RW1/linear temporal effects.

    Parameters
    ----------
    spec : str or ModelSpec
        Model code such as ``"S_BYM.T_AR1.ST_1.B"``.
    graph : RegionGraph
        Region adjacency; required for BYM specs.
    priors : Priors, optional
    n_iter, n_burnin, n_thin, n_chains, adaptation_window : int
        MCMC settings.
    random_state : int
        Seed; chains derive independent streams from it.
    keep_eta : bool
        Keep every draw of the interaction field (large).
    threads : int, optional
        Worker processes for chains.

    Attributes
    ----------
    fit_ : PosteriorFit
    panel_ : Panel
    """

    def __init__(self, spec="S_BYM.T_AR1.ST_1.B", graph=None, priors=None, n_iter=20000,
                 n_burnin=10000, n_thin=5, n_chains=4, random_state=0, adaptation_window=50,
                 keep_eta=False, threads=None):
        self.spec = spec
        self.graph = graph
        self.priors = priors
        self.n_iter = n_iter
        self.n_burnin = n_burnin
        self.n_thin = n_thin
        self.n_chains = n_chains
        self.random_state = random_state
        self.adaptation_window = adaptation_window
        self.keep_eta = keep_eta
        self.threads = threads

    def _config(self):
        return McmcConfig(n_iter=self.n_iter, n_burnin=self.n_burnin, n_thin=self.n_thin,
                          n_chains=self.n_chains, seed=int(self.random_state),
                          adaptation_window=self.adaptation_window, keep_eta=self.keep_eta)

    def fit(self, X, y=None, *, region_index=None, month_index=None):
        """Fit to a :class:`Panel`, or to long-format arrays.

        Parameters
        ----------
        X : Panel or array_like (n_obs, K)
        y : array_like (n_obs,), optional
            Rates in (0, 1); required when ``X`` is an array.
        region_index, month_index : array_like (n_obs,), optional
            0-based cell indices for array input.
        """
        spec = ModelSpec.parse(self.spec) if isinstance(self.spec, str) else self.spec
        graph = self.graph
        if isinstance(X, Panel):
            panel = X
        else:
            if y is None or region_index is None or month_index is None:
                raise ValueError("array input needs y, region_index and month_index")
            panel = panel_from_long(
                X, y, region_index, month_index,
                n_regions=graph.n_regions if graph is not None else None,
                region_ids=graph.region_ids if graph is not None else None)
        if graph is None:
            if spec.has_bym:
                raise ValueError(f"{spec.code} needs a graph")
            graph = from_adjacency_list(panel.n_regions, [], region_ids=panel.region_ids)
        check_panel(panel, graph)
        self.panel_ = panel
        self.graph_ = graph
        self.fit_ = run_mcmc(panel, graph, spec, self.priors or Priors(), self._config(),
                             threads=self.threads)
        self.n_features_in_ = panel.n_covariates
        return self

    def _draw_linear_predictor(self, X, i, t):
        f = self.fit_
        s = f.samples
        lin = s["alpha"][:, None] + s["beta"] @ X.T
        if "u" in s:
            lin = lin + s["u"][:, i] + s["v"][:, i]
        if "delta" in s:
            tc = centered_months(len(f.months))
            lin = lin + s["delta"][:, None] * tc[t][None, :]
        if "phi" in s:
            lin = lin + s["phi"][:, t]
        if f.spec.interaction:
            if "eta" in s:
                lin = lin + s["eta"][:, i, t]
            else:
                lin = lin + f.eta_mean[i, t][None, :]
        return lin

    def predict(self, X=None, *, region_index=None, month_index=None):
        """Posterior mean rate.

        With no arguments, returns the ``(n_regions, n_months)`` grid for the
        fitted panel. With arrays, returns one value per row of ``X``.
        The interaction term enters at its posterior mean unless draws were kept.
        """
        check_is_fitted(self, "fit_")
        panel = self.panel_
        if X is None or isinstance(X, Panel):
            p = panel if X is None else X
            i, t = np.meshgrid(np.arange(p.n_regions), np.arange(p.n_months), indexing="ij")
            i, t = i.ravel(), t.ravel()
            Xc = p.X[i, t]
            out = expit(self._draw_linear_predictor(Xc, i, t)).mean(axis=0)
            return out.reshape(p.n_regions, p.n_months)
        Xa = np.asarray(X, dtype=float)
        if Xa.ndim == 1:
            Xa = Xa[:, None]
        if Xa.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {Xa.shape[1]} features, expected {self.n_features_in_}")
        if region_index is None or month_index is None:
            raise ValueError("array input needs region_index and month_index")
        i = np.asarray(region_index, dtype=np.int64)
        t = np.asarray(month_index, dtype=np.int64)
        return expit(self._draw_linear_predictor(Xa, i, t)).mean(axis=0)

    def score(self, X, y=None, sample_weight=None, *, region_index=None, month_index=None):
        """Coefficient of determination of the posterior mean rate."""
        from sklearn.metrics import r2_score

        if isinstance(X, Panel):
            obs = X.observed
            return r2_score(X.y[obs], self.predict(X)[obs], sample_weight=sample_weight)
        pred = self.predict(X, region_index=region_index, month_index=month_index)
        return r2_score(np.asarray(y, dtype=float), pred, sample_weight=sample_weight)

    def summary(self, names=None) -> pd.DataFrame:
        check_is_fitted(self, "fit_")
        return summary_frame(summarize(self.fit_, names))
