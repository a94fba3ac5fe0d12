"""Global Moran's I with normal-approximation and permutation inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse, stats

from .graph import RegionGraph, WeightMatrix, weight_matrix


class UndefinedStatisticError(ValueError):
    """Moran's I is undefined (constant values or no weights)."""


@dataclass(frozen=True)
class MoranResult:
    I: float
    expected_I: float
    variance_I: float
    z: float
    p_one_sided: float
    p_two_sided: float
    n_used: int
    p_perm: float | None = None
    n_perm: int | None = None

    def p_value(self, alternative="greater"):
        return self.p_one_sided if alternative == "greater" else self.p_two_sided


def _as_sparse(weights):
    if isinstance(weights, WeightMatrix):
        return weights.matrix
    if isinstance(weights, RegionGraph):
        return weight_matrix(weights).matrix
    if sparse.issparse(weights):
        return sparse.csr_matrix(weights, dtype=float)
    return sparse.csr_matrix(np.asarray(weights, dtype=float))


def _prepare(values, weights):
    y = np.asarray(values, dtype=float).ravel()
    W = _as_sparse(weights)
    n = y.size
    if n < 2:
        raise UndefinedStatisticError("need at least two values")
    if W.shape != (n, n):
        raise ValueError(f"weights are {W.shape}, values have length {n}")
    W = W - sparse.diags(W.diagonal())
    W.eliminate_zeros()
    s0 = float(W.sum())
    if W.nnz == 0 or s0 == 0.0:
        raise UndefinedStatisticError("all weights are zero")
    z = y - y.mean()
    ss = float(z @ z)
    if ss <= 1e-30 * max(1.0, float(y @ y)):
        raise UndefinedStatisticError("values have zero variance")
    return y, z, ss, W.tocsr(), s0


def morans_i(values, weights) -> float:
    """``n * sum_ij w_ij z_i z_j / (S0 * sum_i z_i^2)`` with ``z = y - mean(y)``.

    Parameters
    ----------
    values : array_like, shape (n,)
    weights : WeightMatrix, RegionGraph, sparse matrix or (n, n) array
        A RegionGraph is converted to binary weights.
    """
    y, z, ss, W, s0 = _prepare(values, weights)
    return float(y.size * (z @ (W @ z)) / (s0 * ss))


def _moments(W, n, s0):
    Ws = W + W.T
    s1 = 0.5 * float(Ws.multiply(Ws).sum())
    rows = np.asarray(W.sum(axis=1)).ravel()
    cols = np.asarray(W.sum(axis=0)).ravel()
    s2 = float(np.sum((rows + cols) ** 2))
    e = -1.0 / (n - 1)
    e2 = (n * n * s1 - n * s2 + 3.0 * s0 * s0) / (s0 * s0 * (n * n - 1.0))
    return e, max(e2 - e * e, 0.0)


def moran_test_normal(values, weights) -> MoranResult:
    """Moran's I with moments under the normality assumption.

    Uses the Cliff-Ord expressions in S0, S1 and S2; the one-sided p-value is
    the upper normal tail of ``z`` (positive autocorrelation).
    """
    y, z, ss, W, s0 = _prepare(values, weights)
    n = y.size
    I = float(n * (z @ (W @ z)) / (s0 * ss))
    e, var = _moments(W, n, s0)
    zscore = (I - e) / np.sqrt(var) if var > 0 else np.inf * np.sign(I - e)
    p1 = float(stats.norm.sf(zscore))
    p2 = float(min(1.0, 2.0 * stats.norm.sf(abs(zscore))))
    return MoranResult(I, e, var, float(zscore), p1, p2, n)


def permutation_distribution(values, weights, n_perm=999, seed=0):
    """Moran's I under ``n_perm`` random relabellings of ``values``.

    The permutation matrix is drawn in one call from a generator seeded with
    ``seed``, so the result does not depend on how rows are later evaluated.
    """
    y, z, ss, W, s0 = _prepare(values, weights)
    rng = np.random.default_rng(seed)
    Z = rng.permuted(np.broadcast_to(z, (n_perm, z.size)), axis=1)
    num = np.einsum("pi,pi->p", Z, (W @ Z.T).T)
    return y.size * num / (s0 * ss)


def moran_test_perm(values, weights, n_perm=999, seed=0, alternative="greater") -> MoranResult:
    """Normal-approximation result plus a permutation p-value.

    ``p_perm = (1 + #{I_perm >= I_obs}) / (n_perm + 1)`` for the one-sided
    test; with ``alternative="two-sided"`` deviations from ``E[I]`` are
    compared in absolute value.
    """
    if n_perm < 99:
        raise ValueError("n_perm must be at least 99")
    res = moran_test_normal(values, weights)
    sims = permutation_distribution(values, weights, n_perm, seed)
    tol = 1e-12 * max(1.0, abs(res.I))
    if alternative == "greater":
        hits = int(np.sum(sims >= res.I - tol))
    elif alternative == "two-sided":
        hits = int(np.sum(np.abs(sims - res.expected_I) >= abs(res.I - res.expected_I) - tol))
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    p = (1 + hits) / (n_perm + 1)
    return MoranResult(res.I, res.expected_I, res.variance_I, res.z, res.p_one_sided,
                       res.p_two_sided, res.n_used, p, n_perm)


@dataclass(frozen=True)
class MonthlyMoran:
    month: object
    status: str  # "ok", "undefined" or "skipped"
    result: MoranResult | None = None
    note: str = ""


def moran_by_month(grid, graph: RegionGraph, months=None, style="binary",
                   n_perm=None, seed=0, alternative="greater", min_regions=3):
    """Moran test on each column of a ``(n_regions, n_months)`` grid.

    NaN cells are dropped and the test runs on the induced subgraph of the
    observed regions. Months with fewer than ``min_regions`` observed regions
    are skipped; constant months or months whose observed regions have no
    neighbours among themselves are reported as undefined.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.shape[0] != graph.n_regions:
        raise ValueError("grid rows must match graph regions")
    months = list(months) if months is not None else list(range(1, grid.shape[1] + 1))
    out = []
    for t, m in enumerate(months):
        col = grid[:, t]
        keep = ~np.isnan(col)
        if keep.sum() < min_regions:
            out.append(MonthlyMoran(m, "skipped", None, f"{int(keep.sum())} observed regions"))
            continue
        g = graph if keep.all() else graph.subgraph(keep)
        w = weight_matrix(g, style)
        try:
            if n_perm:
                res = moran_test_perm(col[keep], w, n_perm, seed + t, alternative)
            else:
                res = moran_test_normal(col[keep], w)
        except UndefinedStatisticError as exc:
            out.append(MonthlyMoran(m, "undefined", None, str(exc)))
            continue
        out.append(MonthlyMoran(m, "ok", res))
    return out
