"""Model family and log densities for the spatio-temporal beta regression.

The response ``y_it`` in (0, 1) follows a beta law with mean ``mu_it`` and
precision ``tau_b`` (shape parameters ``mu * tau_b`` and ``(1 - mu) * tau_b``)
and ``logit(mu_it)`` is

    alpha + x_it' beta + u_i + v_i + temporal_t + eta_it

where ``u`` is an intrinsic CAR field, ``v`` iid region noise, the temporal
term a linear trend ``delta * (t - (T-1)/2)``, an AR1 or an RW1 process, and
``eta`` iid cell noise. Components a :class:`ModelSpec` leaves out are fixed
at zero.

Normalising constants: ICAR and RW1 densities are improper and dropped to
``(rank/2) log tau - (tau/2) x'Qx``; AR1, iid normal and fixed-effect
densities keep their ``2 pi`` terms. Hyperpriors are densities of the
sampled coordinates: ``log tau`` for precisions (log-gamma) and
``logit((rho + 1) / 2)`` for the AR1 coefficient (normal).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy import sparse
from scipy.special import expit, gammaln

from .graph import RegionGraph, icar_precision, icar_rank

LOG_2PI = math.log(2.0 * math.pi)

SPATIAL = ("none", "bym")
TEMPORAL = ("none", "linear", "ar1", "rw1")
_T_CODE = {"none": "0", "linear": "L", "ar1": "AR1", "rw1": "RW1"}
_CODE_RE = re.compile(r"^S_(0|BYM)\.?T_(0|L|AR1|RW1)\.?ST_([01])\.?B$", re.IGNORECASE)


class SpecError(ValueError):
    pass


class ConstraintError(ValueError):
    """A sum-to-zero constraint does not hold."""


@dataclass(frozen=True)
class ModelSpec:
    """One member of the model family.

    >>> ModelSpec("bym", "ar1", True).code
    'S_BYM.T_AR1.ST_1.B'
    """

    spatial: str = "none"
    temporal: str = "none"
    interaction: bool = False

    def __post_init__(self):
        if self.spatial not in SPATIAL:
            raise SpecError(f"spatial must be one of {SPATIAL}")
        if self.temporal not in TEMPORAL:
            raise SpecError(f"temporal must be one of {TEMPORAL}")
        if self.interaction and self.temporal == "none":
            raise SpecError("an interaction term needs a temporal component")

    @property
    def code(self):
        s = "BYM" if self.spatial == "bym" else "0"
        return f"S_{s}.T_{_T_CODE[self.temporal]}.ST_{int(self.interaction)}.B"

    @property
    def has_bym(self):
        return self.spatial == "bym"

    @property
    def has_field_time(self):
        """Temporal effect carried by a per-month vector (AR1 or RW1)."""
        return self.temporal in ("ar1", "rw1")

    @classmethod
    def parse(cls, code):
        m = _CODE_RE.match(str(code).strip())
        if not m:
            valid = ", ".join(s.code for s in MODEL_SPECS.values())
            raise SpecError(f"unknown model code {code!r}; valid codes: {valid}")
        s, t, st = m.groups()
        temporal = {"0": "none", "L": "linear", "AR1": "ar1", "RW1": "rw1"}[t.upper()]
        return cls("bym" if s.upper() == "BYM" else "none", temporal, st == "1")

    def __str__(self):
        return self.code


MODEL_SPECS = {
    1: ModelSpec("none", "none", False),
    2: ModelSpec("bym", "none", False),
    3: ModelSpec("bym", "linear", False),
    4: ModelSpec("bym", "linear", True),
    5: ModelSpec("bym", "ar1", True),
    6: ModelSpec("bym", "rw1", True),
}


@dataclass(frozen=True)
class Priors:
    """Prior settings.

    Fixed effects (intercept, coefficients, trend slope) are
    ``N(0, fixed_sd**2)``; the default is variance 1000. Precisions are
    ``Gamma(precision_shape, precision_rate)``; the AR1 coefficient has
    ``logit((rho + 1) / 2) ~ N(0, rho_sd**2)``.
    """

    fixed_sd: float = math.sqrt(1000.0)
    precision_shape: float = 1.0
    precision_rate: float = 5e-5
    rho_sd: float = 2.5

    _KEYS = {
        "prior.fixed.sd": "fixed_sd",
        "prior.precision.shape": "precision_shape",
        "prior.precision.rate": "precision_rate",
        "prior.rho.sd": "rho_sd",
    }

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"prior setting {f.name} must be positive and finite")

    @classmethod
    def from_mapping(cls, mapping):
        """Build from dotted keys (``prior.fixed.sd``) or the nested equivalent."""
        flat = _flatten(mapping)
        kw = {}
        for key, value in flat.items():
            if key.startswith("prior."):
                if key not in cls._KEYS:
                    raise KeyError(f"unknown prior key {key!r}; known: {sorted(cls._KEYS)}")
                kw[cls._KEYS[key]] = float(value)
        return cls(**kw)

    def to_mapping(self):
        return {k: getattr(self, v) for k, v in self._KEYS.items()}


def _flatten(mapping, prefix=""):
    out = {}
    for k, v in mapping.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class LatentState:
    alpha: float
    beta: np.ndarray
    u: np.ndarray
    v: np.ndarray
    phi: np.ndarray
    delta: float
    eta: np.ndarray

    @classmethod
    def zeros(cls, n_regions, n_months, n_covariates):
        return cls(0.0, np.zeros(n_covariates), np.zeros(n_regions), np.zeros(n_regions),
                   np.zeros(n_months), 0.0, np.zeros((n_regions, n_months)))


@dataclass
class HyperParams:
    tau_b: float = 10.0
    tau_u: float = 10.0
    tau_v: float = 10.0
    tau_phi: float = 10.0
    tau_eta: float = 10.0
    rho: float = 0.0

    def validate(self):
        for name in ("tau_b", "tau_u", "tau_v", "tau_phi", "tau_eta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie strictly inside (-1, 1)")
        return self


def centered_months(n_months):
    return np.arange(n_months) - (n_months - 1) / 2.0


def linear_predictor(state: LatentState, spec: ModelSpec, x, i, t):
    """Linear predictor of cell ``(i, t)`` for covariates ``x``."""
    eta = state.alpha + float(np.dot(state.beta, np.asarray(x, dtype=float)))
    if spec.has_bym:
        eta += state.u[i] + state.v[i]
    if spec.temporal == "linear":
        eta += state.delta * (t - (len(state.phi) - 1) / 2.0)
    elif spec.has_field_time:
        eta += state.phi[t]
    if spec.interaction:
        eta += state.eta[i, t]
    return float(eta)


def linear_predictor_grid(state: LatentState, spec: ModelSpec, X):
    """Linear predictor for every cell; ``X`` is ``(R, T, K)``."""
    R, T = X.shape[:2]
    eta = state.alpha + X @ state.beta if X.shape[2] else np.full((R, T), state.alpha)
    eta = np.array(eta, dtype=float)
    if spec.has_bym:
        eta += (state.u + state.v)[:, None]
    if spec.temporal == "linear":
        eta += state.delta * centered_months(T)[None, :]
    elif spec.has_field_time:
        eta += state.phi[None, :]
    if spec.interaction:
        eta += state.eta
    return eta


def beta_loglik(y, mu, tau_b):
    """Log density of ``Beta(mu * tau_b, (1 - mu) * tau_b)`` at ``y`` (elementwise)."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    tau = np.asarray(tau_b, dtype=float)
    if np.any(~((y > 0) & (y < 1))):
        raise ValueError("y must lie in (0, 1)")
    if np.any(~((mu > 0) & (mu < 1))):
        raise ValueError("mu must lie in (0, 1)")
    if np.any(~(tau > 0)) or np.any(~np.isfinite(tau)):
        raise ValueError("tau_b must be positive and finite")
    a = mu * tau
    b = (1.0 - mu) * tau
    out = gammaln(tau) - gammaln(a) - gammaln(b) + (a - 1.0) * np.log(y) + (b - 1.0) * np.log1p(-y)
    return float(out) if out.ndim == 0 else out


def _check_sum_zero(x, groups, what, tol=1e-8):
    for g in groups:
        s = float(np.sum(x[g]))
        if abs(s) > tol:
            raise ConstraintError(f"{what} sums to {s:.3g} on a constrained block (tolerance {tol})")


def icar_logdensity(u, tau_u, graph: RegionGraph, Q=None):
    """``(rank/2) log tau_u - (tau_u/2) u'Qu`` with ``Q = D - A``.

    ``u`` must sum to zero on every connected component (within 1e-8).
    """
    u = np.asarray(u, dtype=float)
    if not tau_u > 0:
        raise ValueError("tau_u must be positive")
    _check_sum_zero(u, graph.components, "u")
    Q = icar_precision(graph) if Q is None else Q
    quad = float(u @ (Q @ u))
    return 0.5 * icar_rank(graph) * math.log(tau_u) - 0.5 * tau_u * quad


def ar1_precision(n, rho, tau=1.0):
    """Dense precision of a stationary AR1 with innovation precision ``tau``."""
    if n == 1:
        return np.array([[tau * (1.0 - rho * rho)]])
    d = np.full(n, 1.0 + rho * rho)
    d[0] = d[-1] = 1.0
    Q = np.diag(d) - rho * (np.eye(n, k=1) + np.eye(n, k=-1))
    return tau * Q


def ar1_logdensity(phi, rho, tau_phi):
    """Stationary AR1: ``phi_1 ~ N(0, 1/(tau(1-rho^2)))``, ``phi_t | phi_{t-1} ~ N(rho phi_{t-1}, 1/tau)``."""
    phi = np.asarray(phi, dtype=float)
    if not -1.0 < rho < 1.0:
        raise ValueError("rho must lie strictly inside (-1, 1)")
    if not tau_phi > 0:
        raise ValueError("tau_phi must be positive")
    T = phi.size
    one_m = 1.0 - rho * rho
    out = -0.5 * LOG_2PI + 0.5 * math.log(tau_phi * one_m) - 0.5 * tau_phi * one_m * phi[0] ** 2
    if T > 1:
        r = phi[1:] - rho * phi[:-1]
        out += (T - 1) * (0.5 * math.log(tau_phi) - 0.5 * LOG_2PI) - 0.5 * tau_phi * float(r @ r)
    return float(out)


def rw1_structure(n):
    """Structure matrix of a first-order random walk (rank ``n - 1``)."""
    if n == 1:
        return np.zeros((1, 1))
    d = np.full(n, 2.0)
    d[0] = d[-1] = 1.0
    return np.diag(d) - np.eye(n, k=1) - np.eye(n, k=-1)


def rw1_logdensity(phi, tau_phi):
    """``((T-1)/2) log tau - (tau/2) sum (phi_t - phi_{t-1})^2``; ``phi`` must sum to zero."""
    phi = np.asarray(phi, dtype=float)
    if not tau_phi > 0:
        raise ValueError("tau_phi must be positive")
    if abs(float(phi.sum())) > 1e-8:
        raise ConstraintError(f"phi sums to {phi.sum():.3g}; RW1 needs sum zero")
    d = np.diff(phi)
    return 0.5 * (phi.size - 1) * math.log(tau_phi) - 0.5 * tau_phi * float(d @ d)


def iid_logdensity(x, tau):
    x = np.asarray(x, dtype=float)
    return float(x.size * 0.5 * (math.log(tau) - LOG_2PI) - 0.5 * tau * np.sum(x * x))


def normal_logdensity(x, sd):
    x = np.asarray(x, dtype=float)
    return float(-x.size * (math.log(sd) + 0.5 * LOG_2PI) - 0.5 * np.sum(x * x) / (sd * sd))


def log_precision_prior(tau, shape, rate):
    """Log-gamma density of ``log tau`` when ``tau ~ Gamma(shape, rate)``."""
    lt = math.log(tau)
    return shape * math.log(rate) - math.lgamma(shape) + shape * lt - rate * tau


def rho_to_theta(rho):
    return math.log((1.0 + rho) / (1.0 - rho))


def theta_to_rho(theta):
    return 2.0 * float(expit(theta)) - 1.0


def rho_prior(rho, sd):
    return normal_logdensity(rho_to_theta(rho), sd)


def active_hyperparameters(spec: ModelSpec):
    names = ["tau_b"]
    if spec.has_bym:
        names += ["tau_u", "tau_v"]
    if spec.has_field_time:
        names.append("tau_phi")
    if spec.temporal == "ar1":
        names.append("rho")
    if spec.interaction:
        names.append("tau_eta")
    return names


def log_joint_terms(panel, graph: RegionGraph, spec: ModelSpec, state: LatentState,
                    hyper: HyperParams, priors: Priors = Priors()) -> dict:
    """Each additive piece of the log joint density, keyed by name.

    Missing cells add no likelihood. The ``likelihood`` entry is the sum of
    per-observation beta log densities.
    """
    terms = {}
    lin = linear_predictor_grid(state, spec, panel.X)
    obs = panel.observed
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        mu = expit(lin[obs])
        a = mu * hyper.tau_b
        b = expit(-lin[obs]) * hyper.tau_b
        y = panel.y[obs]
        ll = gammaln(hyper.tau_b) - gammaln(a) - gammaln(b) + (a - 1) * np.log(y) + (b - 1) * np.log1p(-y)
    terms["likelihood"] = float(np.sum(ll))
    terms["prior.intercept"] = normal_logdensity(state.alpha, priors.fixed_sd)
    terms["prior.beta"] = normal_logdensity(state.beta, priors.fixed_sd)
    shape, rate = priors.precision_shape, priors.precision_rate
    terms["hyper.tau_b"] = log_precision_prior(hyper.tau_b, shape, rate)
    if spec.has_bym:
        terms["prior.u"] = icar_logdensity(state.u, hyper.tau_u, graph)
        terms["prior.v"] = iid_logdensity(state.v, hyper.tau_v)
        terms["hyper.tau_u"] = log_precision_prior(hyper.tau_u, shape, rate)
        terms["hyper.tau_v"] = log_precision_prior(hyper.tau_v, shape, rate)
    if spec.temporal == "linear":
        terms["prior.trend"] = normal_logdensity(state.delta, priors.fixed_sd)
    elif spec.temporal == "ar1":
        terms["prior.phi"] = ar1_logdensity(state.phi, hyper.rho, hyper.tau_phi)
        terms["hyper.tau_phi"] = log_precision_prior(hyper.tau_phi, shape, rate)
        terms["hyper.rho"] = rho_prior(hyper.rho, priors.rho_sd)
    elif spec.temporal == "rw1":
        terms["prior.phi"] = rw1_logdensity(state.phi, hyper.tau_phi)
        terms["hyper.tau_phi"] = log_precision_prior(hyper.tau_phi, shape, rate)
    if spec.interaction:
        terms["prior.eta"] = iid_logdensity(state.eta, hyper.tau_eta)
        terms["hyper.tau_eta"] = log_precision_prior(hyper.tau_eta, shape, rate)
    return terms


def log_joint(panel, graph, spec, state, hyper, priors: Priors = Priors()) -> float:
    """Sum of :func:`log_joint_terms`."""
    return float(sum(log_joint_terms(panel, graph, spec, state, hyper, priors).values()))
