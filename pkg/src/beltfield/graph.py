"""Region adjacency graphs, spatial weights and the ICAR precision operator."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.csgraph import connected_components


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RegionGraph:
    """Undirected region adjacency.

    Attributes
    ----------
    n_regions : int
    adjacency : scipy.sparse.csr_matrix
        Symmetric 0/1 matrix with an empty diagonal.
    degrees : numpy.ndarray
        Neighbour count per region.
    component_labels : numpy.ndarray
        Connected-component label per region (labels 0..n_components-1).
    region_ids : tuple or None
        External identifiers in index order, when known.
    """

    n_regions: int
    adjacency: sparse.csr_matrix
    degrees: np.ndarray
    component_labels: np.ndarray
    region_ids: tuple | None = None

    @property
    def n_components(self):
        return int(self.component_labels.max()) + 1 if self.n_regions else 0

    @property
    def components(self):
        """Regions of each connected component, as sorted index arrays."""
        return [np.flatnonzero(self.component_labels == c) for c in range(self.n_components)]

    @property
    def edges(self):
        """Adjacent pairs ``(i, j)`` with ``i < j``, lexicographically sorted."""
        coo = sparse.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((coo.col, coo.row))
        return np.column_stack([coo.row[order], coo.col[order]]).astype(np.int64)

    def neighbors(self, i):
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]].copy()

    def subgraph(self, keep):
        """Induced subgraph on the regions where boolean ``keep`` is true."""
        keep = np.asarray(keep, dtype=bool)
        idx = np.flatnonzero(keep)
        sub = self.adjacency[idx][:, idx]
        ids = tuple(self.region_ids[i] for i in idx) if self.region_ids else None
        return _from_matrix(sub, ids)

    def permute(self, order):
        """Relabel so that new region ``k`` is old region ``order[k]``."""
        order = np.asarray(order)
        ids = tuple(self.region_ids[i] for i in order) if self.region_ids else None
        return _from_matrix(self.adjacency[order][:, order], ids)

    def equals(self, other):
        return (self.n_regions == other.n_regions
                and (self.adjacency != other.adjacency).nnz == 0)


def _from_matrix(adj, region_ids=None):
    adj = sparse.csr_matrix(adj, dtype=np.int8)
    adj.sum_duplicates()
    adj.sort_indices()
    n = adj.shape[0]
    if n:
        _, labels = connected_components(adj, directed=False)
        # relabel components by their smallest member so labels are order-stable
        first = {}
        stable = np.empty(n, dtype=np.int64)
        for i, lab in enumerate(labels):
            stable[i] = first.setdefault(lab, len(first))
    else:
        stable = np.zeros(0, dtype=np.int64)
    deg = np.asarray(adj.sum(axis=1)).ravel().astype(np.int64)
    for arr in (deg, stable):
        arr.setflags(write=False)
    return RegionGraph(n, adj, deg, stable, tuple(region_ids) if region_ids is not None else None)


def from_adjacency_list(n_regions, pairs, region_ids=None) -> RegionGraph:
    """Graph from neighbour pairs; the symmetric closure is taken and repeats collapse.

    >>> from_adjacency_list(3, [(0, 1), (1, 2)]).degrees.tolist()
    [1, 2, 1]
    """
    n = int(n_regions)
    if n < 0:
        raise GraphError("n_regions must be non-negative")
    p = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    if p.size:
        if p.min() < 0 or p.max() >= n:
            bad = p[(p < 0).any(axis=1) | (p >= n).any(axis=1)][0]
            raise GraphError(f"pair {tuple(bad)} out of range for {n} regions")
        loops = p[:, 0] == p[:, 1]
        if loops.any():
            raise GraphError(f"self-loop at region {p[loops][0, 0]}")
    if region_ids is not None and len(region_ids) != n:
        raise GraphError("region_ids length must equal n_regions")
    rows = np.concatenate([p[:, 0], p[:, 1]])
    cols = np.concatenate([p[:, 1], p[:, 0]])
    adj = sparse.coo_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(n, n)).tocsr()
    adj.data[:] = 1
    return _from_matrix(adj, region_ids)


_N_RE = re.compile(r"#\s*n_regions\s*[=:]\s*(\d+)")


def read_adjacency(path, n_regions=None, region_ids=None) -> RegionGraph:
    """Read an adjacency-list file: one ``i j`` pair (0-based) per line.

    ``#`` starts a comment. A ``# n_regions = N`` comment fixes the region
    count (so trailing isolated regions survive); otherwise ``n_regions`` or
    the largest index + 1 is used.
    """
    pairs = []
    declared = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        m = _N_RE.match(line.strip())
        if m:
            declared = int(m.group(1))
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 2:
            raise GraphError(f"{path}:{lineno}: expected two indices, got {body!r}")
        try:
            pairs.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise GraphError(f"{path}:{lineno}: non-integer index in {body!r}") from None
    n = n_regions if n_regions is not None else declared
    if n is None:
        n = max((max(p) for p in pairs), default=-1) + 1
    return from_adjacency_list(n, pairs, region_ids)


def write_adjacency(graph: RegionGraph, path):
    lines = [f"# n_regions = {graph.n_regions}"]
    lines += [f"{i} {j}" for i, j in graph.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def _point_segment_dist(points, a, b):
    """Distances from each point (P, 2) to each segment a[k]-b[k] (S, 2); returns (P, S)."""
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    ap = points[:, None, :] - a[None, :, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.einsum("psj,sj->ps", ap, ab) / denom
    t = np.where(denom > 0, np.clip(t, 0.0, 1.0), 0.0)
    closest = a[None, :, :] + t[..., None] * ab[None, :, :]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def _rings_to_arrays(region_id, rings):
    verts, seg_a, seg_b = [], [], []
    for ring in rings:
        r = np.asarray(ring, dtype=float)
        if r.ndim != 2 or r.shape[1] != 2:
            raise GraphError(f"region {region_id}: ring must be a list of (x, y) vertices")
        if len(np.unique(r, axis=0)) < 3:
            raise GraphError(f"region {region_id}: degenerate polygon (fewer than 3 distinct vertices)")
        closed = r if np.array_equal(r[0], r[-1]) else np.vstack([r, r[:1]])
        verts.append(closed[:-1])
        seg_a.append(closed[:-1])
        seg_b.append(closed[1:])
    if not verts:
        raise GraphError(f"region {region_id}: no rings")
    return np.vstack(verts), np.vstack(seg_a), np.vstack(seg_b)


def queen_contiguity(polygons, snap_tol=None, sort_ids=True) -> RegionGraph:
    """Queen contiguity from polygon rings.

    Two regions are neighbours when some vertex of one lies within
    ``snap_tol`` of a vertex or an edge of the other, so a shared corner is
    enough.

    Parameters
    ----------
    polygons : list of (region_id, rings)
        ``rings`` is a list of closed vertex lists (outer rings and holes of
        every part of a multipolygon, flattened).
    snap_tol : float, optional
        Contact tolerance in input units. Defaults to ``1e-9`` times the span
        of all coordinates.
    sort_ids : bool
        Order regions by ``region_id`` (matching :func:`beltfield.panel.load_panel`).
    """
    items = list(polygons)
    if sort_ids:
        items.sort(key=lambda p: p[0])
    ids = [p[0] for p in items]
    if len(set(ids)) != len(ids):
        raise GraphError("duplicate region_id among polygons")
    geoms = [_rings_to_arrays(rid, rings) for rid, rings in items]
    n = len(geoms)
    if n == 0:
        return from_adjacency_list(0, [], ())
    allv = np.vstack([g[0] for g in geoms])
    if snap_tol is None:
        snap_tol = 1e-9 * float(np.ptp(allv, axis=0).max() or 1.0)
    if snap_tol < 0:
        raise GraphError("snap_tol must be non-negative")
    lo = np.array([g[0].min(axis=0) for g in geoms]) - snap_tol
    hi = np.array([g[0].max(axis=0) for g in geoms]) + snap_tol
    pairs = []
    for i in range(n):
        cand = np.flatnonzero(np.all(lo[i + 1:] <= hi[i], axis=1) & np.all(hi[i + 1:] >= lo[i], axis=1)) + i + 1
        for j in cand:
            vi, ai, bi = geoms[i]
            vj, aj, bj = geoms[j]
            if (_point_segment_dist(vi, aj, bj).min() <= snap_tol
                    or _point_segment_dist(vj, ai, bi).min() <= snap_tol):
                pairs.append((i, int(j)))
    return from_adjacency_list(n, pairs, ids)


def read_geojson_polygons(path, id_property="region_id"):
    """``(region_id, rings)`` pairs from a GeoJSON FeatureCollection of (Multi)Polygons."""
    fc = json.loads(Path(path).read_text())
    out = []
    for k, feat in enumerate(fc.get("features", [])):
        props = feat.get("properties") or {}
        if id_property not in props:
            raise GraphError(f"feature {k} lacks property {id_property!r}")
        geom = feat.get("geometry") or {}
        if geom.get("type") == "Polygon":
            rings = geom["coordinates"]
        elif geom.get("type") == "MultiPolygon":
            rings = [ring for poly in geom["coordinates"] for ring in poly]
        else:
            raise GraphError(f"feature {k}: unsupported geometry {geom.get('type')!r}")
        out.append((str(props[id_property]), rings))
    return out


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Spatial weights; ``isolated`` flags regions whose row is empty."""

    style: str
    matrix: sparse.csr_matrix
    isolated: np.ndarray

    @property
    def n(self):
        return self.matrix.shape[0]

    def toarray(self):
        return self.matrix.toarray()


def weight_matrix(graph: RegionGraph, style="binary") -> WeightMatrix:
    """Binary or row-standardized weights from a graph.

    Row standardization leaves isolated regions with an all-zero row; they
    are listed in ``isolated``.
    """
    A = graph.adjacency.astype(float)
    isolated = graph.degrees == 0
    if style == "binary":
        W = A.tocsr()
    elif style in ("row_standardized", "row"):
        with np.errstate(divide="ignore"):
            inv = np.where(isolated, 0.0, 1.0 / np.maximum(graph.degrees, 1))
        W = sparse.diags(inv) @ A
        W = W.tocsr()
        style = "row_standardized"
    else:
        raise GraphError(f"unknown weight style {style!r}")
    W.sort_indices()
    return WeightMatrix(style, W, np.flatnonzero(isolated))


def icar_precision(graph: RegionGraph) -> sparse.csr_matrix:
    """``D - A``: degree diagonal minus adjacency."""
    Q = sparse.diags(graph.degrees.astype(float)) - graph.adjacency.astype(float)
    return Q.tocsr()


def icar_rank(graph: RegionGraph) -> int:
    return graph.n_regions - graph.n_components


# -- bundled Iowa fixture -------------------------------------------------

def _data_path(name):
    return resources.files("beltfield") / "data" / name


def iowa_counties() -> pd.DataFrame:
    """Index, FIPS code, name and centroid (lon/lat) of the 99 Iowa counties."""
    with resources.as_file(_data_path("iowa_counties.csv")) as p:
        return pd.read_csv(p, dtype={"region_id": str})


def iowa_graph() -> RegionGraph:
    """Queen-contiguity graph of the 99 Iowa counties, indexed in FIPS order."""
    ids = tuple(iowa_counties()["region_id"])
    with resources.as_file(_data_path("iowa_adjacency.txt")) as p:
        return read_adjacency(p, region_ids=ids)


def iowa_geojson_path():
    return _data_path("iowa_counties.geojson")
