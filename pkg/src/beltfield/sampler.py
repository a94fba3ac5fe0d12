"""MCMC for the spatio-temporal beta regression.

Adaptive random-walk Metropolis-within-Gibbs. Each sweep visits

* intercept + coefficients (+ trend slope) as one block with an adapted
  proposal covariance (covariates are centered internally);
* ``v`` region by region, then ``u`` given ``s = u + v`` drawn exactly from
  its Gaussian conditional under the sum-to-zero constraints;
* AR1 ``phi`` with an odd/even colouring, RW1 ``phi`` month by month with a
  constraint-preserving move;
* ``eta`` cell by cell;
* precisions of Gaussian fields by their conjugate gamma updates, ``rho`` and
  ``tau_b`` by random walks on ``logit((rho+1)/2)`` and ``log tau_b``.

Between these, a few exact Gibbs moves run along directions that leave the
linear predictor unchanged (fixed effects against ``v``, the intercept
against the AR1 level, ``v`` against region means of ``eta``, ``phi``
against month means of ``eta``). Those directions are informed only by the
priors and are where single-site updates mix worst.

Proposal scales adapt during burn-in only (Robbins-Monro towards 0.44 for
scalar updates and 0.234 for the fixed-effect block).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.special import expit, gammaln, polygamma

from . import model as M
from .graph import RegionGraph, icar_precision, icar_rank, read_adjacency, write_adjacency
from .panel import Panel

FORMAT_VERSION = 1
SUMMARY_COLUMNS = ("Parameter", "Mean", "SD", "0.025quant", "0.975quant")


class SamplerError(RuntimeError):
    pass


class InitializationError(SamplerError):
    pass


class AdaptationError(SamplerError):
    pass


@dataclass(frozen=True)
class McmcConfig:
    n_iter: int = 20000
    n_burnin: int = 10000
    n_thin: int = 5
    n_chains: int = 4
    seed: int = 0
    adaptation_window: int = 50
    keep_eta: bool = False

    def __post_init__(self):
        if not self.n_iter > self.n_burnin >= 0:
            raise ValueError("need n_iter > n_burnin >= 0")
        if self.n_thin < 1 or self.n_chains < 1 or self.adaptation_window < 1:
            raise ValueError("n_thin, n_chains and adaptation_window must be >= 1")

    @property
    def n_keep(self):
        return len(range(self.n_burnin, self.n_iter, self.n_thin))


# -- likelihoods --------------------------------------------------------------

class BetaLikelihood:
    name = "beta"
    fixed_precision = None

    def __init__(self, y):
        self.logy = np.log(y)
        self.log1my = np.log1p(-y)

    def __call__(self, lin, tau, idx=slice(None)):
        a = expit(lin) * tau
        b = expit(-lin) * tau
        return gammaln(tau) - gammaln(a) - gammaln(b) + (a - 1.0) * self.logy[idx] + (b - 1.0) * self.log1my[idx]

    def mean(self, lin):
        return expit(lin)

    def information(self, lin, tau):
        """Expected information about the linear predictor, per cell."""
        mu = expit(lin)
        return (tau * mu * (1 - mu)) ** 2 * (polygamma(1, mu * tau) + polygamma(1, (1 - mu) * tau))


class GaussianLikelihood:
    """``y ~ N(linear predictor, 1/precision)`` with a known precision.

    Only meant for checking the sampler against conjugate closed forms.
    """

    name = "gaussian"

    def __init__(self, precision):
        self.fixed_precision = float(precision)

    def bind(self, y):
        self.y = y
        return self

    def __call__(self, lin, tau, idx=slice(None)):
        r = self.y[idx] - lin
        return 0.5 * (math.log(tau) - M.LOG_2PI) - 0.5 * tau * r * r

    def mean(self, lin):
        return lin

    def information(self, lin, tau):
        return np.full(np.shape(lin), tau)


# -- design shared by all chains ---------------------------------------------

@dataclass
class _Design:
    spec: M.ModelSpec
    priors: M.Priors
    R: int
    T: int
    K: int
    obs_i: np.ndarray
    obs_t: np.ndarray
    y: np.ndarray
    Xc: np.ndarray          # (n_obs, K) centered covariates of observed cells
    xbar: np.ndarray        # (K,)
    Zr: np.ndarray          # (R, K+1) region-level design [1, mean centered x]
    region_constant: bool
    tc: np.ndarray          # (T,) centered month index
    Q: np.ndarray | None    # dense ICAR precision
    Q_eig: tuple | None     # eigenvalues (zeroed on the null space), eigenvectors
    rank_q: int
    comp: np.ndarray | None  # (n_components, R) indicator rows
    by_month: list          # obs positions per month
    likelihood: object


def _build_design(panel: Panel, graph: RegionGraph, spec, priors, likelihood=None):
    if graph.n_regions != panel.n_regions:
        raise ValueError(f"graph has {graph.n_regions} regions, panel {panel.n_regions}")
    if graph.region_ids is not None and tuple(graph.region_ids) != tuple(panel.region_ids):
        raise ValueError("graph region_ids are not in panel order")
    obs_i, obs_t = panel.observed_index()
    if obs_i.size == 0:
        raise ValueError("panel has no observed cells")
    y = panel.y[obs_i, obs_t]
    X = panel.X
    K = X.shape[2]
    xbar = X[obs_i, obs_t].mean(axis=0) if K else np.zeros(0)
    Xc_full = X - xbar
    Xc = Xc_full[obs_i, obs_t]
    Zr = np.column_stack([np.ones(panel.n_regions), Xc_full.mean(axis=1)])
    region_constant = bool(np.all(X == X[:, :1, :]))
    T = panel.n_months
    Q = comp = Q_eig = None
    rank_q = 0
    if spec.has_bym:
        Q = icar_precision(graph).toarray()
        rank_q = icar_rank(graph)
        lam, vec = np.linalg.eigh(Q)
        lam[np.argsort(lam)[:graph.n_components]] = 0.0
        Q_eig = (lam, vec)
        comp = np.zeros((graph.n_components, graph.n_regions))
        comp[graph.component_labels, np.arange(graph.n_regions)] = 1.0
    by_month = [np.flatnonzero(obs_t == t) for t in range(T)]
    if likelihood is None:
        lik = BetaLikelihood(y)
    else:
        lik = likelihood.bind(y) if hasattr(likelihood, "bind") else likelihood
    return _Design(spec, priors, panel.n_regions, T, K, obs_i, obs_t, y, Xc, xbar, Zr,
                   region_constant, M.centered_months(T), Q, Q_eig, rank_q, comp, by_month, lik)


# -- one chain ------------------------------------------------------------------

class _Adapter:
    """Robbins-Monro adaptation of log proposal scales toward a target rate."""

    def __init__(self, init, target):
        self.log_scale = np.log(np.atleast_1d(np.asarray(init, dtype=float))).copy()
        self.target = target
        self.acc = np.zeros_like(self.log_scale)
        self.n = 0
        self.total_acc = np.zeros_like(self.log_scale)
        self.total_n = 0
        self.k = 0

    @property
    def scale(self):
        return np.exp(self.log_scale)

    def record(self, accepted):
        self.acc += accepted
        self.n += 1
        self.total_acc += accepted
        self.total_n += 1

    def adapt(self):
        if self.n == 0:
            return
        self.k += 1
        rate = self.acc / self.n
        self.log_scale += (rate - self.target) * min(1.0, 3.0 / math.sqrt(self.k))
        self.acc[:] = 0.0
        self.n = 0

    def reset_totals(self):
        self.total_acc[:] = 0.0
        self.total_n = 0

    def rate(self):
        return float(self.total_acc.mean() / self.total_n) if self.total_n else float("nan")


def _gamma_draw(rng, shape, rate):
    return rng.gamma(shape, 1.0 / rate)


def _krige(z, V, A):
    """Project a draw onto ``A x = 0``; ``V = P^{-1} A'``."""
    return z - V @ np.linalg.solve(A @ V, A @ z)


class _Chain:
    def __init__(self, d: _Design, config: McmcConfig, chain_index: int):
        self.d = d
        self.cfg = config
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, chain_index]))
        spec = d.spec
        R, T, K = d.R, d.T, d.K
        # state (intercept kept on the centered-covariate scale)
        self.ac = 0.0
        self.beta = np.zeros(K)
        self.delta = 0.0
        self.u = np.zeros(R)
        self.v = np.zeros(R)
        self.phi = np.zeros(T)
        self.eta = np.zeros((R, T))
        fixed = d.likelihood.fixed_precision
        self.tau_b = fixed if fixed is not None else 10.0
        self.tau_u = self.tau_v = self.tau_phi = self.tau_eta = 10.0
        self.rho = 0.0
        # proposal machinery
        self.n_fixed = 1 + K + (1 if spec.temporal == "linear" else 0)
        sd_x = d.Xc.std(axis=0) if K else np.zeros(0)
        init_sd = np.concatenate([[0.02], 0.02 / np.where(sd_x > 0, sd_x, 1.0)])
        if spec.temporal == "linear":
            init_sd = np.append(init_sd, 0.005)
        self.fixed_chol = np.diag(init_sd)
        self.ad_fixed = _Adapter(1.0, 0.234 if self.n_fixed > 1 else 0.44)
        self.ad_v = _Adapter(np.full(R, 0.1), 0.44)
        self.ad_phi = _Adapter(np.full(T, 0.1), 0.44)
        self.ad_eta = _Adapter(np.full(d.y.size, 0.1), 0.44)
        self.ad_taub = _Adapter(0.2, 0.44)
        self.ad_rho = _Adapter(0.5, 0.44)
        self.ad_tu = _Adapter(0.3, 0.44)
        self.ad_tv = _Adapter(0.3, 0.44)
        self.ad_seta = _Adapter(0.05, 0.44)
        self.refresh()
        self.adapt_fixed()

    # -- bookkeeping -------------------------------------------------------
    def alpha(self):
        return self.ac - float(self.d.xbar @ self.beta)

    def temporal(self):
        s = self.d.spec
        if s.temporal == "linear":
            return self.delta * self.d.tc
        if s.has_field_time:
            return self.phi
        return np.zeros(self.d.T)

    def refresh(self):
        d = self.d
        lin = self.ac + (d.Xc @ self.beta if d.K else 0.0)
        if d.spec.has_bym:
            lin = lin + (self.u + self.v)[d.obs_i]
        lin = lin + self.temporal()[d.obs_t]
        if d.spec.interaction:
            lin = lin + self.eta[d.obs_i, d.obs_t]
        self.lin = np.asarray(lin, dtype=float) * np.ones(d.y.size)
        self.ll = d.likelihood(self.lin, self.tau_b)

    def alpha_prior(self, alpha):
        sd = self.d.priors.fixed_sd
        return -0.5 * alpha * alpha / (sd * sd)

    # -- updates -------------------------------------------------------------
    def update_fixed(self):
        d = self.d
        K = d.K
        step = self.fixed_chol @ self.rng.standard_normal(self.n_fixed) * self.ad_fixed.scale[0]
        d_ac, d_beta = step[0], step[1:1 + K]
        new_lin = self.lin + d_ac
        if K:
            new_lin = new_lin + d.Xc @ d_beta
        if d.spec.temporal == "linear":
            d_delta = step[-1]
            new_lin = new_lin + d_delta * d.tc[d.obs_t]
        new_ll = d.likelihood(new_lin, self.tau_b)
        sd2 = d.priors.fixed_sd ** 2
        beta_new = self.beta + d_beta
        a_old, a_new = self.alpha(), self.ac + d_ac - float(d.xbar @ beta_new)
        lp = -0.5 * (a_new ** 2 - a_old ** 2 + beta_new @ beta_new - self.beta @ self.beta) / sd2
        if d.spec.temporal == "linear":
            lp += -0.5 * ((self.delta + d_delta) ** 2 - self.delta ** 2) / sd2
        log_r = float(np.sum(new_ll) - np.sum(self.ll)) + lp
        ok = math.log(self.rng.uniform()) < log_r
        if ok:
            self.ac += d_ac
            self.beta = beta_new
            if d.spec.temporal == "linear":
                self.delta += d_delta
            self.lin, self.ll = new_lin, new_ll
        self.ad_fixed.record(ok)

    def update_v(self):
        d = self.d
        eps = self.rng.standard_normal(d.R) * self.ad_v.scale
        new_lin = self.lin + eps[d.obs_i]
        new_ll = d.likelihood(new_lin, self.tau_b)
        dll = np.bincount(d.obs_i, weights=new_ll - self.ll, minlength=d.R)
        vn = self.v + eps
        log_r = dll - 0.5 * self.tau_v * (vn * vn - self.v * self.v)
        ok = np.log(self.rng.uniform(size=d.R)) < log_r
        self.v = np.where(ok, vn, self.v)
        cell_ok = ok[d.obs_i]
        self.lin = np.where(cell_ok, new_lin, self.lin)
        self.ll = np.where(cell_ok, new_ll, self.ll)
        self.ad_v.record(ok)

    def split_uv(self):
        """Draw ``u | u + v`` exactly; the likelihood only sees the sum."""
        d = self.d
        s = self.u + self.v
        P = self.tau_u * d.Q + self.tau_v * np.eye(d.R)
        c = linalg.cho_factor(P, lower=True)
        mean = linalg.cho_solve(c, self.tau_v * s)
        z = mean + linalg.solve_triangular(c[0], self.rng.standard_normal(d.R), lower=True, trans="T")
        V = linalg.cho_solve(c, d.comp.T)
        u = _krige(z, V, d.comp)
        # float cleanup: remove residual component means, keep the sum s
        u -= d.comp.T @ ((d.comp @ u) / d.comp.sum(axis=1))
        self.u = u
        self.v = s - u

    def shift_fixed_s(self):
        """Exact draw of (intercept, coefficients) holding ``s + Z a`` fixed.

        ``s = u + v`` has prior covariance ``Q^+ / tau_u + I / tau_v``; its
        precision is formed from the eigenpairs of ``Q``. ``u`` is re-split
        from the new ``s`` afterwards.
        """
        d = self.d
        K = d.K
        lam, E = d.Q_eig
        w = np.where(lam > 0, 1.0 / (1.0 / (self.tau_u * np.where(lam > 0, lam, 1.0)) + 1.0 / self.tau_v),
                     self.tau_v)
        a = np.concatenate([[self.ac], self.beta])
        s = self.u + self.v
        m = s + d.Zr @ a
        EZ = E.T @ d.Zr
        Em = E.T @ m
        e = np.concatenate([[1.0], -d.xbar])
        S = np.eye(K + 1)
        S[0, 0] = 0.0
        prec = (np.outer(e, e) + S) / d.priors.fixed_sd ** 2 + EZ.T @ (EZ * w[:, None])
        c = linalg.cho_factor(prec, lower=True)
        mean = linalg.cho_solve(c, EZ.T @ (w * Em))
        a_new = mean + linalg.solve_triangular(c[0], self.rng.standard_normal(K + 1), lower=True, trans="T")
        s_new = m - d.Zr @ a_new
        da = a_new - a
        if not d.region_constant and K:
            new_lin = self.lin + da[0] + d.Xc @ da[1:] + (s_new - s)[d.obs_i]
            new_ll = d.likelihood(new_lin, self.tau_b)
            if math.log(self.rng.uniform()) >= float(np.sum(new_ll) - np.sum(self.ll)):
                return
            self.lin, self.ll = new_lin, new_ll
        self.ac, self.beta = float(a_new[0]), a_new[1:].copy()
        self.v = self.v + (s_new - s)

    def _scale_move(self, x, tau, adapter, lin_delta):
        """Joint move ``x -> c x``, ``tau -> tau / c^2`` for a Gaussian field.

        Returns the accepted (x, tau). ``lin_delta(x_new)`` gives the change of
        the observed linear predictor, or None when ``x`` is not in it.
        """
        d = self.d
        log_c = self.rng.standard_normal() * adapter.scale[0]
        c = math.exp(log_c)
        x_new = c * x
        tau_new = tau / (c * c)
        a, b = d.priors.precision_shape, d.priors.precision_rate
        log_r = -2.0 * a * log_c - b * (tau_new - tau)
        new_lin = self.lin + lin_delta(x_new)
        new_ll = d.likelihood(new_lin, self.tau_b)
        log_r += float(np.sum(new_ll) - np.sum(self.ll))
        ok = math.log(self.rng.uniform()) < log_r
        adapter.record(ok)
        if ok:
            self.lin, self.ll = new_lin, new_ll
            return x_new, tau_new
        return x, tau

    def update_tau_uv(self):
        """Random-walk updates of ``log tau_u`` and ``log tau_v`` given ``s = u + v``.

        ``u`` and ``v`` are integrated out: in the eigenbasis of ``Q`` the sum
        has independent coordinates with variance ``1/(tau_u lam) + 1/tau_v``.
        """
        d = self.d
        lam, E = d.Q_eig
        z2 = (E.T @ (self.u + self.v)) ** 2
        pos = lam > 0
        lam_safe = np.where(pos, lam, 1.0)
        a, b = d.priors.precision_shape, d.priors.precision_rate

        def target(tu, tv):
            var = np.where(pos, 1.0 / (tu * lam_safe), 0.0) + 1.0 / tv
            return -0.5 * float(np.sum(np.log(var) + z2 / var)) + a * (math.log(tu) + math.log(tv)) - b * (tu + tv)

        cur = target(self.tau_u, self.tau_v)
        for which, ad in ((0, self.ad_tu), (1, self.ad_tv)):
            step = math.exp(self.rng.standard_normal() * ad.scale[0])
            tu = self.tau_u * step if which == 0 else self.tau_u
            tv = self.tau_v * step if which == 1 else self.tau_v
            new = target(tu, tv)
            ok = math.log(self.rng.uniform()) < new - cur
            if ok:
                self.tau_u, self.tau_v, cur = tu, tv, new
            ad.record(ok)

    def scale_eta(self):
        d = self.d
        self.eta, self.tau_eta = self._scale_move(
            self.eta, self.tau_eta, self.ad_seta,
            lambda en: (en - self.eta)[d.obs_i, d.obs_t])

    def shift_v_eta(self):
        """Exact draw of a per-region shift between ``v_i`` and ``eta_i.``."""
        d = self.d
        p = self.tau_v + d.T * self.tau_eta
        b = -self.tau_v * self.v + self.tau_eta * self.eta.sum(axis=1)
        c = b / p + self.rng.standard_normal(d.R) / math.sqrt(p)
        self.v = self.v + c
        self.eta = self.eta - c[:, None]

    def update_phi_ar1(self):
        d = self.d
        Qphi = M.ar1_precision(d.T, self.rho, self.tau_phi)
        diag = np.diag(Qphi)
        for color in (0, 1):
            ts = np.arange(color, d.T, 2)
            if ts.size == 0:
                continue
            eps = np.zeros(d.T)
            eps[ts] = self.rng.standard_normal(ts.size) * self.ad_phi.scale[ts]
            new_lin = self.lin + eps[d.obs_t]
            new_ll = d.likelihood(new_lin, self.tau_b)
            dll = np.bincount(d.obs_t, weights=new_ll - self.ll, minlength=d.T)
            dprior = -eps * (Qphi @ self.phi) - 0.5 * diag * eps * eps
            log_r = (dll + dprior)[ts]
            ok_ts = np.log(self.rng.uniform(size=ts.size)) < log_r
            ok = np.zeros(d.T, dtype=bool)
            ok[ts[ok_ts]] = True
            self.phi = np.where(ok, self.phi + eps, self.phi)
            cell_ok = ok[d.obs_t]
            self.lin = np.where(cell_ok, new_lin, self.lin)
            self.ll = np.where(cell_ok, new_ll, self.ll)
            rec = np.zeros(d.T)
            rec[ts] = ok_ts
            self.ad_phi.acc[ts] += ok_ts
            self.ad_phi.total_acc[ts] += ok_ts
        self.ad_phi.n += 1
        self.ad_phi.total_n += 1

    def shift_alpha_phi(self):
        """Exact draw of a common shift between the intercept and the AR1 level."""
        d = self.d
        Qphi = M.ar1_precision(d.T, self.rho, self.tau_phi)
        one = np.ones(d.T)
        sd2 = d.priors.fixed_sd ** 2
        p = float(one @ Qphi @ one) + 1.0 / sd2
        b = float(one @ Qphi @ self.phi) - self.alpha() / sd2
        c = b / p + self.rng.standard_normal() / math.sqrt(p)
        self.phi = self.phi - c
        self.ac += c

    def update_phi_rw1(self):
        d = self.d
        if d.T < 2:
            return
        Rm = M.rw1_structure(d.T)
        sd2 = d.priors.fixed_sd ** 2
        scale = self.ad_phi.scale
        acc = np.zeros(d.T)
        for t in range(d.T):
            eps = self.rng.standard_normal() * scale[t]
            idx = d.by_month[t]
            new_lin_t = self.lin[idx] + eps
            new_ll_t = d.likelihood(new_lin_t, self.tau_b, idx)
            dll = float(np.sum(new_ll_t) - np.sum(self.ll[idx]))
            dprior = -self.tau_phi * (eps * float(Rm[t] @ self.phi) + 0.5 * eps * eps * Rm[t, t])
            a_old = self.alpha()
            a_new = a_old + eps / d.T
            dprior += -0.5 * (a_new * a_new - a_old * a_old) / sd2
            if math.log(self.rng.uniform()) < dll + dprior:
                self.phi = self.phi - eps / d.T
                self.phi[t] += eps
                self.ac += eps / d.T
                self.lin[idx] = new_lin_t
                self.ll[idx] = new_ll_t
                acc[t] = 1.0
        # keep the constraint exact against float drift
        m = self.phi.mean()
        self.phi = self.phi - m
        self.ac += m
        self.ad_phi.record(acc)

    def shift_phi_eta(self):
        """Exact draw of per-month shifts between ``phi_t`` and ``eta_.t``."""
        d = self.d
        if d.spec.temporal == "ar1":
            Qphi = M.ar1_precision(d.T, self.rho, self.tau_phi)
        else:
            Qphi = self.tau_phi * M.rw1_structure(d.T)
        P = Qphi + d.R * self.tau_eta * np.eye(d.T)
        b = -Qphi @ self.phi + self.tau_eta * self.eta.sum(axis=0)
        c = linalg.cho_factor(P, lower=True)
        z = linalg.cho_solve(c, b) + linalg.solve_triangular(
            c[0], self.rng.standard_normal(d.T), lower=True, trans="T")
        if d.spec.temporal == "rw1":
            A = np.ones((1, d.T))
            z = _krige(z, linalg.cho_solve(c, A.T), A)
        self.phi = self.phi + z
        self.eta = self.eta - z[None, :]

    def update_eta(self):
        d = self.d
        eps = self.rng.standard_normal(d.y.size) * self.ad_eta.scale
        cur = self.eta[d.obs_i, d.obs_t]
        new = cur + eps
        new_lin = self.lin + eps
        new_ll = d.likelihood(new_lin, self.tau_b)
        log_r = new_ll - self.ll - 0.5 * self.tau_eta * (new * new - cur * cur)
        ok = np.log(self.rng.uniform(size=d.y.size)) < log_r
        self.eta[d.obs_i, d.obs_t] = np.where(ok, new, cur)
        self.lin = np.where(ok, new_lin, self.lin)
        self.ll = np.where(ok, new_ll, self.ll)
        self.ad_eta.record(ok)
        # unobserved cells: exact draw from the prior
        missing = np.ones((d.R, d.T), dtype=bool)
        missing[d.obs_i, d.obs_t] = False
        if missing.any():
            self.eta[missing] = self.rng.standard_normal(int(missing.sum())) / math.sqrt(self.tau_eta)

    def update_rho(self):
        d = self.d
        theta = M.rho_to_theta(self.rho)
        theta_new = theta + self.rng.standard_normal() * self.ad_rho.scale[0]
        rho_new = M.theta_to_rho(theta_new)
        ok = False
        if -1.0 < rho_new < 1.0:
            sd = d.priors.rho_sd

            def target(r, th):
                return (M.ar1_logdensity(self.phi, r, self.tau_phi)
                        - 0.5 * th * th / (sd * sd))

            ok = math.log(self.rng.uniform()) < target(rho_new, theta_new) - target(self.rho, theta)
            if ok:
                self.rho = rho_new
        self.ad_rho.record(ok)

    def update_precisions(self):
        d = self.d
        a, b = d.priors.precision_shape, d.priors.precision_rate
        rng = self.rng
        if d.spec.temporal == "ar1":
            q = float(self.phi @ M.ar1_precision(d.T, self.rho, 1.0) @ self.phi)
            self.tau_phi = _gamma_draw(rng, a + 0.5 * d.T, b + 0.5 * q)
        elif d.spec.temporal == "rw1":
            df = np.diff(self.phi)
            self.tau_phi = _gamma_draw(rng, a + 0.5 * (d.T - 1), b + 0.5 * float(df @ df))
        if d.spec.interaction:
            self.tau_eta = _gamma_draw(rng, a + 0.5 * d.R * d.T, b + 0.5 * float(np.sum(self.eta ** 2)))

    def update_tau_b(self):
        d = self.d
        if d.likelihood.fixed_precision is not None:
            return
        lt = math.log(self.tau_b)
        lt_new = lt + self.rng.standard_normal() * self.ad_taub.scale[0]
        tb = math.exp(lt_new)
        new_ll = d.likelihood(self.lin, tb)
        a, b = d.priors.precision_shape, d.priors.precision_rate
        log_r = float(np.sum(new_ll) - np.sum(self.ll)) + a * (lt_new - lt) - b * (tb - self.tau_b)
        ok = math.log(self.rng.uniform()) < log_r
        if ok:
            self.tau_b, self.ll = tb, new_ll
        self.ad_taub.record(ok)

    def fixed_design(self):
        d = self.d
        cols = [np.ones(d.y.size)]
        if d.K:
            cols.append(d.Xc)
        if d.spec.temporal == "linear":
            cols.append(d.tc[d.obs_t])
        return np.column_stack(cols)

    def adapt_fixed(self):
        """Proposal covariance from the conditional curvature of the block.

        Uses the expected information of the linear predictor at the current
        state, so the shape tracks the block given the latent fields.
        """
        J = self.fixed_design()
        w = self.d.likelihood.information(self.lin, self.tau_b)
        H = J.T @ (J * w[:, None]) + np.eye(self.n_fixed) / self.d.priors.fixed_sd ** 2
        try:
            cov = np.linalg.inv(H) * (2.38 ** 2 / self.n_fixed)
            self.fixed_chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            pass

    def adapters(self):
        spec = self.d.spec
        out = {"fixed": self.ad_fixed}
        if self.d.likelihood.fixed_precision is None:
            out["tau_b"] = self.ad_taub
        if spec.has_bym:
            out["v"] = self.ad_v
            out["tau_u"] = self.ad_tu
            out["tau_v"] = self.ad_tv
        if spec.has_field_time:
            out["phi"] = self.ad_phi
        if spec.temporal == "ar1":
            out["rho"] = self.ad_rho
        if spec.interaction:
            out["eta"] = self.ad_eta
            out["eta_scale"] = self.ad_seta
        return out

    def sweep(self, adapting):
        spec = self.d.spec
        self.update_fixed()
        if spec.has_bym:
            self.update_v()
            self.shift_fixed_s()
            self.update_tau_uv()
            self.split_uv()
            if spec.interaction:
                self.shift_v_eta()
        if spec.temporal == "ar1":
            self.update_phi_ar1()
            self.shift_alpha_phi()
            self.update_rho()
        elif spec.temporal == "rw1":
            self.update_phi_rw1()
        if spec.interaction:
            self.update_eta()
            self.scale_eta()
            if spec.has_field_time:
                self.shift_phi_eta()
        self.update_precisions()
        self.update_tau_b()

    # -- driver ------------------------------------------------------------------
    def run(self):
        d, cfg = self.d, self.cfg
        spec = d.spec
        n_keep = cfg.n_keep
        n_obs = d.y.size
        out = {
            "alpha": np.empty(n_keep),
            "beta": np.empty((n_keep, d.K)),
            "tau_b": np.empty(n_keep),
            "fitted_mu": np.empty((n_keep, n_obs)),
            "loglik": np.empty((n_keep, n_obs)),
        }
        if spec.has_bym:
            for k in ("u", "v"):
                out[k] = np.empty((n_keep, d.R))
            out["tau_u"] = np.empty(n_keep)
            out["tau_v"] = np.empty(n_keep)
        if spec.temporal == "linear":
            out["delta"] = np.empty(n_keep)
        if spec.has_field_time:
            out["phi"] = np.empty((n_keep, d.T))
            out["tau_phi"] = np.empty(n_keep)
        if spec.temporal == "ar1":
            out["rho"] = np.empty(n_keep)
        if spec.interaction:
            out["tau_eta"] = np.empty(n_keep)
            if cfg.keep_eta:
                out["eta"] = np.empty((n_keep, d.R, d.T))
        lin_sum = np.zeros(n_obs)
        eta_sum = np.zeros((d.R, d.T))
        eta_sq = np.zeros((d.R, d.T))
        adapters = self.adapters()
        W = cfg.adaptation_window
        k = 0
        for it in range(cfg.n_iter):
            adapting = it < cfg.n_burnin
            if it % 100 == 0:
                self.refresh()
            self.sweep(adapting)
            if adapting and (it + 1) % W == 0:
                for ad in adapters.values():
                    ad.adapt()
                self.adapt_fixed()
            if it + 1 == cfg.n_burnin or (cfg.n_burnin == 0 and it == 0):
                for ad in adapters.values():
                    ad.reset_totals()
                if cfg.n_burnin == 0:
                    pass
            if it >= cfg.n_burnin and (it - cfg.n_burnin) % cfg.n_thin == 0:
                self.refresh()
                out["alpha"][k] = self.alpha()
                out["beta"][k] = self.beta
                out["tau_b"][k] = self.tau_b
                out["fitted_mu"][k] = d.likelihood.mean(self.lin)
                out["loglik"][k] = self.ll
                if spec.has_bym:
                    out["u"][k], out["v"][k] = self.u, self.v
                    out["tau_u"][k], out["tau_v"][k] = self.tau_u, self.tau_v
                if spec.temporal == "linear":
                    out["delta"][k] = self.delta
                if spec.has_field_time:
                    out["phi"][k] = self.phi
                    out["tau_phi"][k] = self.tau_phi
                if spec.temporal == "ar1":
                    out["rho"][k] = self.rho
                if spec.interaction:
                    out["tau_eta"][k] = self.tau_eta
                    eta_sum += self.eta
                    eta_sq += self.eta ** 2
                    if cfg.keep_eta:
                        out["eta"][k] = self.eta
                lin_sum += self.lin
                k += 1
        acceptance = {name: ad.rate() for name, ad in adapters.items()}
        extras = {"lin_sum": lin_sum, "eta_sum": eta_sum, "eta_sq": eta_sq}
        return out, extras, acceptance


def _check_init(panel, graph, spec, priors, likelihood):
    if likelihood is not None:
        return
    state = M.LatentState.zeros(panel.n_regions, panel.n_months, panel.n_covariates)
    terms = M.log_joint_terms(panel, graph, spec, state, M.HyperParams(), priors)
    bad = [k for k, v in terms.items() if not np.isfinite(v)]
    if bad:
        raise InitializationError(f"log joint is not finite at the initial state: {', '.join(bad)}")


def _run_chain(args):
    design, config, chain_index = args
    return _Chain(design, config, chain_index).run()


def resolve_threads(threads=None):
    if threads is None:
        env = os.environ.get("BELTFIELD_THREADS")
        threads = int(env) if env else 1
    return max(1, int(threads))


# -- posterior container --------------------------------------------------------

_SCALARS = ("alpha", "delta", "tau_b", "tau_u", "tau_v", "tau_phi", "rho", "tau_eta")


@dataclass(eq=False)
class PosteriorFit:
    """Retained MCMC draws (all chains stacked along the first axis).

    ``samples`` maps parameter names to arrays whose first axis is the draw;
    ``chain`` gives the chain of every draw. ``fitted_mu`` and ``loglik`` are
    ``(n_draws, n_obs)`` for the observed cells listed in ``obs_region`` /
    ``obs_month``.
    """

    spec: M.ModelSpec
    samples: dict
    chain: np.ndarray
    fitted_mu: np.ndarray
    loglik: np.ndarray
    obs_region: np.ndarray
    obs_month: np.ndarray
    y_obs: np.ndarray
    lin_mean: np.ndarray
    region_ids: tuple
    months: tuple
    covariate_names: tuple
    config: McmcConfig
    priors: M.Priors
    acceptance: dict
    panel_checksum: str = ""
    eta_mean: np.ndarray | None = None
    eta_sd: np.ndarray | None = None
    likelihood: str = "beta"
    graph: RegionGraph | None = None
    wall_time_s: float = 0.0

    @property
    def rng_seed(self):
        return self.config.seed

    @property
    def n_draws(self):
        return self.chain.size

    @property
    def n_obs(self):
        return self.y_obs.size

    @property
    def n_chains(self):
        return int(self.chain.max()) + 1 if self.chain.size else 0

    def scalar_draws(self):
        """Named one-dimensional draw arrays for every scalar quantity."""
        out = {}
        s = self.samples
        out["(Intercept)"] = s["alpha"]
        for k, name in enumerate(self.covariate_names):
            out[name] = s["beta"][:, k]
        if "delta" in s:
            out["trend"] = s["delta"]
        for name in ("tau_b", "tau_u", "tau_v", "tau_phi", "rho", "tau_eta"):
            if name in s:
                out[name] = s[name]
        for name, labels in (("u", self.region_ids), ("v", self.region_ids), ("phi", self.months)):
            if name in s:
                for j, lab in enumerate(labels):
                    out[f"{name}[{lab}]"] = s[name][:, j]
        return out

    def default_summary_names(self):
        names = ["(Intercept)", *self.covariate_names]
        if "delta" in self.samples:
            names.append("trend")
        names += [n for n in ("tau_b", "tau_u", "tau_v", "tau_phi", "rho", "tau_eta") if n in self.samples]
        return names

    @property
    def fitted_mu_samples(self):
        return self.fitted_mu

    @property
    def loglik_samples(self):
        return self.loglik

    def mean_fitted(self):
        return self.fitted_mu.mean(axis=0)

    def by_chain(self, values):
        """Reshape draws ``(n_draws, ...)`` to ``(n_chains, n_per_chain, ...)``."""
        n = self.n_chains
        return np.asarray(values).reshape(n, -1, *np.shape(values)[1:])


def fit(panel: Panel, graph: RegionGraph, spec, priors: M.Priors | None = None,
        config: McmcConfig | None = None, threads=None, _likelihood=None) -> PosteriorFit:
    """Sample the posterior of ``spec`` given ``panel`` on ``graph``.

    Chains use independent generators seeded from ``(config.seed, chain)``
    and are collected in chain order, so results do not depend on
    ``threads``.

    Raises
    ------
    InitializationError
        The log joint is not finite at the starting state.
    AdaptationError
        A block accepts fewer than 1% of proposals after burn-in.
    """
    spec = M.ModelSpec.parse(spec) if isinstance(spec, str) else spec
    priors = priors or M.Priors()
    config = config or McmcConfig()
    _check_init(panel, graph, spec, priors, _likelihood)
    design = _build_design(panel, graph, spec, priors, _likelihood)
    threads = min(resolve_threads(threads), config.n_chains)
    t0 = time.perf_counter()
    jobs = [(design, config, c) for c in range(config.n_chains)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_run_chain, jobs))
    else:
        results = [_run_chain(j) for j in jobs]
    wall = time.perf_counter() - t0

    samples = {}
    for name in results[0][0]:
        if name in ("fitted_mu", "loglik"):
            continue
        samples[name] = np.concatenate([r[0][name] for r in results], axis=0)
    fitted_mu = np.concatenate([r[0]["fitted_mu"] for r in results], axis=0)
    loglik = np.concatenate([r[0]["loglik"] for r in results], axis=0)
    chain = np.repeat(np.arange(config.n_chains), config.n_keep)
    n_total = config.n_keep * config.n_chains
    lin_mean = sum(r[1]["lin_sum"] for r in results) / n_total
    eta_mean = eta_sd = None
    if spec.interaction:
        es = sum(r[1]["eta_sum"] for r in results) / n_total
        eq = sum(r[1]["eta_sq"] for r in results) / n_total
        eta_mean, eta_sd = es, np.sqrt(np.maximum(eq - es * es, 0.0))
    acceptance = {}
    for name in results[0][2]:
        rates = [r[2][name] for r in results]
        acceptance[name] = float(np.mean(rates))
        if min(rates) < 0.01:
            raise AdaptationError(
                f"block {name!r} accepted {min(rates):.2%} of proposals after adaptation; "
                "lengthen burn-in, tighten priors or simplify the model")
    return PosteriorFit(
        spec=spec, samples=samples, chain=chain, fitted_mu=fitted_mu, loglik=loglik,
        obs_region=design.obs_i, obs_month=design.obs_t, y_obs=design.y, lin_mean=lin_mean,
        region_ids=tuple(panel.region_ids), months=tuple(panel.months),
        covariate_names=tuple(panel.covariate_names), config=config, priors=priors,
        acceptance=acceptance, panel_checksum=panel.checksum(), eta_mean=eta_mean,
        eta_sd=eta_sd, likelihood=design.likelihood.name, graph=graph, wall_time_s=wall,
    )


# -- summaries and diagnostics ----------------------------------------------------

@dataclass(frozen=True)
class SummaryRow:
    name: str
    mean: float
    sd: float
    q025: float
    q975: float


def summarize_draws(draws):
    """Mean, SD (ddof=1) and 2.5%/97.5% quantiles (linear interpolation)."""
    x = np.asarray(draws, dtype=float)
    q = np.quantile(x, [0.025, 0.975], method="linear")
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return float(x.mean()), sd, float(q[0]), float(q[1])


def summarize(fit: PosteriorFit, names=None, min_draws=100):
    """Posterior summary rows in the order requested.

    Raises
    ------
    KeyError
        A requested name is unknown; the message lists the available names.
    ValueError
        Fewer than ``min_draws`` retained draws.
    """
    if fit.n_draws < min_draws:
        raise ValueError(f"need at least {min_draws} retained draws, have {fit.n_draws}")
    table = fit.scalar_draws()
    names = fit.default_summary_names() if names is None else list(names)
    unknown = [n for n in names if n not in table]
    if unknown:
        raise KeyError(f"unknown parameters {unknown}; available: {sorted(table)}")
    return [SummaryRow(n, *summarize_draws(table[n])) for n in names]


def summary_frame(rows):
    import pandas as pd

    return pd.DataFrame([(r.name, r.mean, r.sd, r.q025, r.q975) for r in rows],
                        columns=list(SUMMARY_COLUMNS))


def split_rhat(chains):
    """Split-R-hat for draws shaped ``(n_chains, n_draws)``."""
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("split-R-hat needs at least two chains")
    n = x.shape[1] // 2
    if n < 2:
        raise ValueError("chains too short")
    halves = np.concatenate([x[:, :n], x[:, x.shape[1] - n:]], axis=0)
    W = halves.var(axis=1, ddof=1).mean()
    B = n * halves.mean(axis=1).var(ddof=1)
    if W == 0.0:
        return 1.0 if B == 0.0 else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def effective_sample_size(chains):
    """Multi-chain ESS with Geyer's initial monotone sequence."""
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    m, n = x.shape
    if n < 4:
        raise ValueError("chains too short")
    xc = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, n=2 * n, axis=1)
    acov = np.fft.irfft(f * np.conj(f), axis=1)[:, :n] / n
    chain_var = acov[:, 0] * n / (n - 1.0)
    W = chain_var.mean()
    B_over_n = x.mean(axis=1).var(ddof=1) if m > 1 else 0.0
    var_plus = (n - 1.0) / n * W + B_over_n
    if var_plus == 0.0:
        return float(m * n)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total = 0.0
    prev = float("inf")
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
        t += 2
    tau = -1.0 + 2.0 * total
    return float(m * n / max(tau, 1.0 / math.log10(m * n + 10)))


@dataclass(frozen=True)
class ConvergenceRow:
    name: str
    rhat: float
    ess: float
    flagged: bool


def convergence(fit_or_draws, names=None, threshold=1.05):
    """Split-R-hat and ESS per parameter; ``flagged`` marks R-hat above ``threshold``.

    Accepts a :class:`PosteriorFit` or a mapping ``name -> (n_chains, n_draws)``.
    """
    if isinstance(fit_or_draws, PosteriorFit):
        f = fit_or_draws
        if f.n_chains < 2:
            raise ValueError("convergence diagnostics need at least two chains")
        table = f.scalar_draws()
        names = f.default_summary_names() if names is None else names
        draws = {n: f.by_chain(table[n]) for n in names}
    else:
        draws = {n: np.asarray(v) for n, v in fit_or_draws.items()}
        if names is not None:
            draws = {n: draws[n] for n in names}
    rows = []
    for n, ch in draws.items():
        if ch.ndim != 2 or ch.shape[0] < 2:
            raise ValueError("convergence diagnostics need at least two chains")
        r = split_rhat(ch)
        rows.append(ConvergenceRow(n, r, effective_sample_size(ch), bool(not r <= threshold)))
    return rows


# -- fit artifact on disk -------------------------------------------------------------

def save_fit(fit: PosteriorFit, directory):
    """Write ``manifest.json`` plus one ``.npy`` file per column under ``samples/``.

    Layout (format version 1): every array in ``samples/`` has the draw as its
    first axis except the per-observation metadata ``obs_region``,
    ``obs_month``, ``y_obs`` and ``lin_mean``. The manifest records the model
    code, seed, MCMC settings, priors, panel checksum and the shape and dtype
    of each file. The graph is copied as ``graph.adj``.
    """
    d = Path(directory)
    (d / "samples").mkdir(parents=True, exist_ok=True)
    arrays = dict(fit.samples)
    arrays.update(chain=fit.chain, fitted_mu=fit.fitted_mu, loglik=fit.loglik,
                  obs_region=fit.obs_region, obs_month=fit.obs_month, y_obs=fit.y_obs,
                  lin_mean=fit.lin_mean)
    if fit.eta_mean is not None:
        arrays.update(eta_mean=fit.eta_mean, eta_sd=fit.eta_sd)
    columns = {}
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        np.save(d / "samples" / f"{name}.npy", arr, allow_pickle=False)
        columns[name] = {"file": f"samples/{name}.npy", "shape": list(arr.shape), "dtype": str(arr.dtype)}
    if fit.graph is not None:
        write_adjacency(fit.graph, d / "graph.adj")
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec_code": fit.spec.code,
        "seed": fit.config.seed,
        "config": asdict(fit.config),
        "priors": fit.priors.to_mapping(),
        "panel_checksum": fit.panel_checksum,
        "likelihood": fit.likelihood,
        "region_ids": list(fit.region_ids),
        "months": list(fit.months),
        "covariate_names": list(fit.covariate_names),
        "acceptance": {k: round(v, 6) for k, v in sorted(fit.acceptance.items())},
        "columns": columns,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_fit(directory) -> PosteriorFit:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    if man.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported fit format {man.get('format_version')}")
    arr = {name: np.load(d / col["file"], allow_pickle=False) for name, col in man["columns"].items()}
    meta = {"chain", "fitted_mu", "loglik", "obs_region", "obs_month", "y_obs", "lin_mean",
            "eta_mean", "eta_sd"}
    samples = {k: v for k, v in arr.items() if k not in meta}
    graph = None
    if (d / "graph.adj").exists():
        graph = read_adjacency(d / "graph.adj", region_ids=tuple(man["region_ids"]))
    return PosteriorFit(
        spec=M.ModelSpec.parse(man["spec_code"]), samples=samples, chain=arr["chain"],
        fitted_mu=arr["fitted_mu"], loglik=arr["loglik"], obs_region=arr["obs_region"],
        obs_month=arr["obs_month"], y_obs=arr["y_obs"], lin_mean=arr["lin_mean"],
        region_ids=tuple(man["region_ids"]), months=tuple(man["months"]),
        covariate_names=tuple(man["covariate_names"]), config=McmcConfig(**man["config"]),
        priors=M.Priors(**{M.Priors._KEYS[k]: v for k, v in man["priors"].items()}),
        acceptance=man["acceptance"], panel_checksum=man["panel_checksum"],
        eta_mean=arr.get("eta_mean"), eta_sd=arr.get("eta_sd"),
        likelihood=man["likelihood"], graph=graph,
    )


def checksum_dir(directory):
    """SHA-256 over every file in a directory tree (names and bytes)."""
    h = hashlib.sha256()
    root = Path(directory)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
