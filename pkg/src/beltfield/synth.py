"""Synthetic panels and journey-event streams with known generating values."""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import model as M
from .graph import RegionGraph, icar_precision
from .panel import DEFAULT_LATCH_WINDOW_S, EventKind, JourneyEvent, panel_from_arrays

# Per capita income ($10,000) and VMT (100,000 miles): min, max and mean of
# the county-level values used as default covariate ranges.
COVARIATE_RANGES = {
    "per_capita_income": (2.63, 5.13, 3.55),
    "vmt": (0.5, 41.41, 3.33),
}
TRUTH_ALPHA = -0.210
TRUTH_BETA = (0.165, 0.021)
PENETRATION = 0.063
DEFAULT_JOURNEYS_PER_CELL = 1000


@dataclass
class GenTruth:
    """Generating values and realized latent fields of a synthetic panel."""

    spec: M.ModelSpec
    alpha: float
    beta: np.ndarray
    hyper: M.HyperParams
    delta: float
    u: np.ndarray
    v: np.ndarray
    phi: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    seed: int
    covariate_names: tuple = ()

    def to_dict(self):
        h = self.hyper
        return {
            "spec_code": self.spec.code,
            "seed": self.seed,
            "alpha": self.alpha,
            "beta": dict(zip(self.covariate_names, map(float, self.beta))),
            "delta": self.delta,
            "hyper": {k: (None if math.isinf(v) else v) for k, v in vars(h).items()},
            "u": self.u.tolist(),
            "v": self.v.tolist(),
            "phi": self.phi.tolist(),
            "eta": self.eta.tolist(),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @property
    def spatial_fraction(self):
        """Empirical share of the realized spatial variance carried by ``u``."""
        su, sv = float(np.var(self.u)), float(np.var(self.v))
        return su / (su + sv) if su + sv > 0 else float("nan")


def default_hyper():
    """Generating hyperparameters used when none are given."""
    return M.HyperParams(tau_b=150.0, tau_u=4.0, tau_v=40.0, tau_phi=60.0, tau_eta=150.0, rho=0.7)


def default_covariates(n_regions, rng, source="uniform"):
    """Region-level income and VMT.

    ``"uniform"`` draws uniformly over each min-max range. ``"matched"`` draws
    a scaled beta on the same range whose mean equals the reference mean
    (VMT is strongly right-skewed, so its mean sits near the minimum).
    """
    cols = []
    for lo, hi, mean in COVARIATE_RANGES.values():
        if source == "uniform":
            cols.append(rng.uniform(lo, hi, n_regions))
        elif source == "matched":
            m = (mean - lo) / (hi - lo)
            k = 4.0
            cols.append(lo + (hi - lo) * rng.beta(m * k, (1 - m) * k, n_regions))
        else:
            raise ValueError(f"unknown covariate source {source!r}")
    return np.column_stack(cols)


def sample_icar(graph: RegionGraph, tau, rng, size=None, Q=None):
    """Draw ICAR fields with per-component sum-to-zero constraints.

    Draws ``sum_k z_k / sqrt(tau * lambda_k) e_k`` over the positive
    eigenpairs of ``Q = D - A``, then removes any residual component mean.
    ``tau = inf`` gives zeros.
    """
    n = graph.n_regions
    shape = (n,) if size is None else (size, n)
    if math.isinf(tau):
        return np.zeros(shape)
    if not tau > 0:
        raise ValueError("tau must be positive")
    Q = icar_precision(graph).toarray() if Q is None else Q
    lam, vec = np.linalg.eigh(Q)
    keep = lam > 1e-9 * lam.max() if lam.max() > 0 else np.zeros(n, bool)
    z = rng.standard_normal((1 if size is None else size, int(keep.sum())))
    u = (z / np.sqrt(tau * lam[keep])) @ vec[:, keep].T
    labels = graph.component_labels
    counts = np.bincount(labels)
    for c in range(counts.size):
        idx = labels == c
        u[:, idx] -= u[:, idx].mean(axis=1, keepdims=True)
    return u[0] if size is None else u


def _normal(rng, tau, shape):
    if math.isinf(tau):
        return np.zeros(shape)
    return rng.standard_normal(shape) / math.sqrt(tau)


def sample_ar1(n, rho, tau, rng):
    if math.isinf(tau):
        return np.zeros(n)
    x = np.empty(n)
    x[0] = rng.standard_normal() / math.sqrt(tau * (1 - rho * rho))
    for t in range(1, n):
        x[t] = rho * x[t - 1] + rng.standard_normal() / math.sqrt(tau)
    return x


def sample_rw1(n, tau, rng):
    if math.isinf(tau):
        return np.zeros(n)
    x = np.concatenate([[0.0], np.cumsum(rng.standard_normal(n - 1) / math.sqrt(tau))])
    return x - x.mean()


def simulate_panel(graph: RegionGraph, spec, *, alpha=TRUTH_ALPHA, beta=TRUTH_BETA,
                   hyper: M.HyperParams | None = None, delta=0.0, covariates=None,
                   covariate_names=None, n_months=12, n_journeys=DEFAULT_JOURNEYS_PER_CELL,
                   seed=0, region_ids=None):
    """Draw a panel from the generative model of ``spec``.

    Latent fields come from their priors at ``hyper``; rates are
    ``Beta(mu tau_b, (1 - mu) tau_b)`` with ``logit(mu)`` the linear
    predictor. Every cell is observed with ``n_journeys`` journeys, so the
    panel holds the boundary-adjusted rate ``(y (n - 1) + 0.5) / n``.
    Precisions may be ``inf`` to switch a component off.

    Parameters
    ----------
    covariates : array_like (R, K), {"uniform", "matched"} or None
        Region-level covariates; a string selects :func:`default_covariates`.

    Returns
    -------
    panel : Panel
    truth : GenTruth
    """
    spec = M.ModelSpec.parse(spec) if isinstance(spec, str) else spec
    hyper = (hyper or default_hyper())
    for name in ("tau_b", "tau_u", "tau_v", "tau_phi", "tau_eta"):
        if not getattr(hyper, name) > 0:
            raise ValueError(f"{name} must be positive")
    if math.isinf(hyper.tau_b):
        raise ValueError("tau_b must be finite")
    if spec.temporal == "ar1" and not -1 < hyper.rho < 1:
        raise ValueError("rho must lie inside (-1, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    R, T = graph.n_regions, n_months
    if covariates is None or isinstance(covariates, str):
        X = default_covariates(R, rng, covariates or "uniform")
        names = tuple(covariate_names or COVARIATE_RANGES)
    else:
        X = np.asarray(covariates, dtype=float)
        if X.ndim != 2 or X.shape[0] != R:
            raise ValueError("covariates must be (n_regions, K)")
        names = tuple(covariate_names or (f"x{k + 1}" for k in range(X.shape[1])))
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (X.shape[1],):
        raise ValueError(f"beta has {beta.size} entries for {X.shape[1]} covariates")

    u = np.zeros(R)
    v = np.zeros(R)
    phi = np.zeros(T)
    eta = np.zeros((R, T))
    if spec.has_bym:
        u = sample_icar(graph, hyper.tau_u, rng)
        v = _normal(rng, hyper.tau_v, R)
    if spec.temporal == "ar1":
        phi = sample_ar1(T, hyper.rho, hyper.tau_phi, rng)
    elif spec.temporal == "rw1":
        phi = sample_rw1(T, hyper.tau_phi, rng)
    if spec.interaction:
        eta = _normal(rng, hyper.tau_eta, (R, T))
    lin = alpha + (X @ beta)[:, None] + (u + v)[:, None] + eta
    if spec.temporal == "linear":
        lin = lin + delta * M.centered_months(T)[None, :]
    lin = lin + phi[None, :]
    mu = expit(lin)
    y = rng.beta(mu * hyper.tau_b, (1 - mu) * hyper.tau_b)
    counts = np.full((R, T), int(n_journeys))
    rids = region_ids or graph.region_ids
    panel = panel_from_arrays(y, counts, X, region_ids=rids, covariate_names=names)
    truth = GenTruth(spec, float(alpha), beta, hyper, float(delta), u, v, phi, eta, mu, seed, names)
    return panel, truth


def simulate_journeys(rates, journeys_per_region=1000, penetration=PENETRATION, seed=0,
                      latch_window_s=DEFAULT_LATCH_WINDOW_S, month=1, noise=True):
    """Event stream whose aggregation recovers ``rates``.

    ``rates`` maps ``region_id`` (or ``(region_id, month)``) to a compliance
    rate in (0, 1). Every true journey is latched with that probability and
    kept with probability ``penetration``. Kept latched journeys emit
    ``engine_on`` then ``seatbelt_latch`` inside the window; with ``noise``
    some unlatched journeys also carry a latch shortly before ignition or
    after the window, which aggregation must not count.
    """
    if not 0 < penetration <= 1:
        raise ValueError("penetration must lie in (0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10E7]))
    events = []
    for key in sorted(rates, key=str):
        rate = float(rates[key])
        if not 0 < rate < 1:
            raise ValueError(f"rate for {key!r} must lie in (0, 1), got {rate}")
        region, m = key if isinstance(key, tuple) else (key, month)
        if not 1 <= int(m) <= 12:
            raise ValueError("month must be in 1..12")
        latched = rng.uniform(size=journeys_per_region) < rate
        kept = rng.uniform(size=journeys_per_region) < penetration
        # spread journeys over the month, clear of month boundaries
        start = _month_start_ms(int(m)) + 86_400_000
        t0 = start + rng.integers(0, 25 * 86_400_000, size=journeys_per_region)
        delay = rng.uniform(0, latch_window_s, size=journeys_per_region)
        duration = rng.uniform(latch_window_s + 60, 4 * 3600, size=journeys_per_region)
        stray = rng.uniform(size=journeys_per_region)
        for j in np.flatnonzero(kept):
            jid = f"{region}-{int(m):02d}-{j:06d}"
            on = int(t0[j])
            events.append(JourneyEvent(jid, str(region), on, EventKind.ENGINE_ON))
            if latched[j]:
                events.append(JourneyEvent(jid, str(region), on + int(delay[j] * 1000),
                                           EventKind.SEATBELT_LATCH))
            elif noise and stray[j] < 0.1:
                events.append(JourneyEvent(jid, str(region), on - 5000, EventKind.SEATBELT_LATCH))
            elif noise and stray[j] < 0.2:
                events.append(JourneyEvent(jid, str(region), on + int((latch_window_s + 30) * 1000),
                                           EventKind.SEATBELT_LATCH))
            events.append(JourneyEvent(jid, str(region), on + int(duration[j] * 1000),
                                       EventKind.ENGINE_OFF))
    events.sort(key=lambda e: (e.timestamp_ms, e.journey_id))
    return events


def _month_start_ms(month):
    d = dt.datetime(2022, month, 1, tzinfo=dt.timezone.utc)
    return int(d.timestamp() * 1000)
