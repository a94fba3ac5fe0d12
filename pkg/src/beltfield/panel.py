"""Region-month panel of compliance rates and the journey-event ingest path."""

from __future__ import annotations

import csv
import datetime as _dt
import enum
import hashlib
import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

DEFAULT_LATCH_WINDOW_S = 600.0
CORRELATION_FLAG = 0.8


class PanelError(ValueError):
    """Raised for inconsistent compliance or covariate tables."""


class EventKind(str, enum.Enum):
    ENGINE_ON = "engine_on"
    ENGINE_OFF = "engine_off"
    SEATBELT_LATCH = "seatbelt_latch"
    OTHER = "other"


@dataclass(frozen=True)
class JourneyEvent:
    journey_id: str
    region_id: str
    timestamp_ms: int
    kind: EventKind


@dataclass
class IngestReport:
    """Counts gathered while turning an event stream into compliance cells."""

    n_records: int = 0
    n_malformed: int = 0
    n_journeys: int = 0
    n_dropped_no_engine_on: int = 0
    n_cells: int = 0
    correlation_screen: dict | None = None
    warnings: list[str] = field(default_factory=list)

    def to_dict(self):
        return {
            "n_records": self.n_records,
            "n_malformed": self.n_malformed,
            "n_journeys": self.n_journeys,
            "n_dropped_no_engine_on": self.n_dropped_no_engine_on,
            "n_cells": self.n_cells,
            "correlation_screen": self.correlation_screen,
            "warnings": list(self.warnings),
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _parse_event(row):
    kind = EventKind(row["kind"].strip())
    journey_id = row["journey_id"].strip()
    region_id = row["region_id"].strip()
    if not journey_id or not region_id:
        raise ValueError("empty identifier")
    return JourneyEvent(journey_id, region_id, int(row["timestamp_ms"]), kind)


def read_events_csv(path, report: IngestReport | None = None) -> list[JourneyEvent]:
    """Read ``journey_id,region_id,timestamp_ms,kind`` rows.

    Rows that cannot be parsed are skipped and tallied in ``report``.
    """
    report = report if report is not None else IngestReport()
    events = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"journey_id", "region_id", "timestamp_ms", "kind"} - set(reader.fieldnames or ())
        if missing:
            raise PanelError(f"events file lacks columns {sorted(missing)}")
        for row in reader:
            report.n_records += 1
            try:
                events.append(_parse_event(row))
            except (ValueError, TypeError, AttributeError):
                report.n_malformed += 1
    return events


def write_events_csv(events: Iterable[JourneyEvent], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["journey_id", "region_id", "timestamp_ms", "kind"])
        for e in events:
            w.writerow([e.journey_id, e.region_id, e.timestamp_ms, EventKind(e.kind).value])


def _month_of(timestamp_ms):
    return _dt.datetime.fromtimestamp(timestamp_ms / 1000.0, tz=_dt.timezone.utc).month


def aggregate_journeys(events: Iterable[JourneyEvent],
                       latch_window_s: float = DEFAULT_LATCH_WINDOW_S,
                       report: IngestReport | None = None) -> dict:
    """Count latched and total journeys per (region_id, calendar month).

    A journey belongs to the region and UTC month of its first ``engine_on``
    event. It is latched when a ``seatbelt_latch`` event falls in
    ``[first_on, first_on + latch_window_s]``; earlier (pre-ignition) and later
    (mid-trip) latches do not count. Journeys without ``engine_on`` are dropped.

    Returns
    -------
    dict
        ``{(region_id, month): (n_latched, n_total)}`` with months 1-12.
    """
    if latch_window_s <= 0:
        raise ValueError("latch_window_s must be positive")
    report = report if report is not None else IngestReport()
    by_journey = defaultdict(list)
    for e in events:
        by_journey[e.journey_id].append(e)
    if not by_journey:
        msg = "empty event stream"
        warnings.warn(msg)
        report.warnings.append(msg)
        return {}

    window_ms = latch_window_s * 1000.0
    cells: dict = defaultdict(lambda: [0, 0])
    for jid in sorted(by_journey):
        evs = sorted(by_journey[jid], key=lambda e: e.timestamp_ms)
        first_on = next((e for e in evs if e.kind == EventKind.ENGINE_ON), None)
        if first_on is None:
            report.n_dropped_no_engine_on += 1
            continue
        report.n_journeys += 1
        t0 = first_on.timestamp_ms
        latched = any(
            e.kind == EventKind.SEATBELT_LATCH and t0 <= e.timestamp_ms <= t0 + window_ms
            for e in evs
        )
        cell = cells[(first_on.region_id, _month_of(t0))]
        cell[0] += int(latched)
        cell[1] += 1
    report.n_cells = len(cells)
    return {k: (v[0], v[1]) for k, v in sorted(cells.items())}


def compliance_frame(counts: Mapping) -> pd.DataFrame:
    """Compliance table (``region_id, month, rate, n_journeys``) from aggregated counts."""
    rows = [
        {"region_id": r, "month": m, "rate": k / n, "n_journeys": n}
        for (r, m), (k, n) in sorted(counts.items())
    ]
    return pd.DataFrame(rows, columns=["region_id", "month", "rate", "n_journeys"])


def boundary_adjust(raw_rate, n):
    """Squeeze a proportion into the open unit interval.

    ``(raw_rate * (n - 1) + 0.5) / n``. Cells with ``n == 0`` carry no
    observation and come back as NaN. Works elementwise on arrays.
    """
    r = np.asarray(raw_rate, dtype=float)
    nn = np.asarray(n, dtype=float)
    if np.any((r < 0) | (r > 1)):
        raise ValueError("raw_rate must lie in [0, 1]")
    if np.any(nn < 0):
        raise ValueError("n must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(nn > 0, (r * (nn - 1.0) + 0.5) / nn, np.nan)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class PanelObservation:
    region_index: int
    month_index: int
    rate: float
    n_journeys: int
    covariates: np.ndarray


@dataclass(frozen=True, eq=False)
class Panel:
    """Dense region x month grid of rates with covariates.

    ``y`` holds boundary-adjusted rates and NaN where a cell is missing,
    ``raw_rate`` the rates as read. ``X`` has shape ``(n_regions, n_months, K)``
    and is the (optionally) centered/scaled version of ``X_raw``.
    """

    region_ids: tuple
    months: tuple
    y: np.ndarray
    raw_rate: np.ndarray
    n_journeys: np.ndarray
    X: np.ndarray
    X_raw: np.ndarray
    covariate_names: tuple
    covariate_scaling: dict

    @property
    def n_regions(self):
        return len(self.region_ids)

    @property
    def n_months(self):
        return len(self.months)

    @property
    def n_covariates(self):
        return len(self.covariate_names)

    @property
    def observed(self):
        return ~np.isnan(self.y)

    @property
    def n_observed(self):
        return int(self.observed.sum())

    def observations(self):
        """Yield a :class:`PanelObservation` for every observed cell, region-major."""
        for i, t in zip(*np.nonzero(self.observed)):
            yield PanelObservation(int(i), int(t), float(self.y[i, t]),
                                   int(self.n_journeys[i, t]), self.X[i, t].copy())

    def observed_index(self):
        """Region and month indices of observed cells (region-major order)."""
        i, t = np.nonzero(self.observed)
        return i.astype(np.int64), t.astype(np.int64)

    def equals(self, other):
        if not isinstance(other, Panel):
            return False
        return (
            self.region_ids == other.region_ids
            and self.months == other.months
            and self.covariate_names == other.covariate_names
            and self.covariate_scaling == other.covariate_scaling
            and np.array_equal(self.y, other.y, equal_nan=True)
            and np.array_equal(self.raw_rate, other.raw_rate, equal_nan=True)
            and np.array_equal(self.n_journeys, other.n_journeys)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.X_raw, other.X_raw)
        )

    def checksum(self):
        """SHA-256 over the panel contents, stable across runs."""
        h = hashlib.sha256()
        h.update(json.dumps([list(self.region_ids), list(self.months),
                             list(self.covariate_names), self.covariate_scaling],
                            sort_keys=True).encode())
        for arr in (self.y, self.raw_rate, self.n_journeys, self.X, self.X_raw):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def compliance_frame(self):
        rows = []
        for i, rid in enumerate(self.region_ids):
            for t, m in enumerate(self.months):
                if self.n_journeys[i, t] > 0:
                    rows.append({"region_id": rid, "month": m,
                                 "rate": float(self.raw_rate[i, t]),
                                 "n_journeys": int(self.n_journeys[i, t])})
        return pd.DataFrame(rows, columns=["region_id", "month", "rate", "n_journeys"])

    def covariate_frame(self):
        """Raw covariates; a ``month`` column appears only when they vary by month."""
        varies = bool(np.any(self.X_raw != self.X_raw[:, :1, :]))
        rows = []
        for i, rid in enumerate(self.region_ids):
            months = list(enumerate(self.months)) if varies else [(0, None)]
            for t, m in months:
                row = {"region_id": rid}
                if varies:
                    row["month"] = m
                row.update({name: float(self.X_raw[i, t, k])
                            for k, name in enumerate(self.covariate_names)})
                rows.append(row)
        cols = ["region_id"] + (["month"] if varies else []) + list(self.covariate_names)
        return pd.DataFrame(rows, columns=cols)


def _read_table(source, **kw):
    if isinstance(source, pd.DataFrame):
        return source.copy()
    return pd.read_csv(source, dtype={"region_id": str}, float_precision="round_trip", **kw)


def load_panel(compliance, covariates=None, *, center=False, scale=False,
               use_covariates=None) -> Panel:
    """Build a :class:`Panel` from a compliance table and a covariate table.

    Parameters
    ----------
    compliance : path or DataFrame
        Columns ``region_id, month, rate, n_journeys``; month in 1-12.
    covariates : path or DataFrame, optional
        Columns ``region_id`` (optionally ``month``) followed by covariates.
        When omitted the panel has no covariates.
    center, scale : bool
        Subtract the mean / divide by the standard deviation of each covariate
        (over regions and months). The applied values land in
        ``covariate_scaling``.
    use_covariates : list of str, optional
        Keep only these covariate columns, in this order.

    Raises
    ------
    PanelError
        Duplicate (region, month) rows, a region missing from the covariate
        table, or a rate outside [0, 1].
    """
    comp = _read_table(compliance)
    need = {"region_id", "month", "rate", "n_journeys"}
    if need - set(comp.columns):
        raise PanelError(f"compliance table lacks columns {sorted(need - set(comp.columns))}")
    comp["region_id"] = comp["region_id"].astype(str)
    if comp.duplicated(["region_id", "month"]).any():
        dup = comp[comp.duplicated(["region_id", "month"], keep=False)].iloc[0]
        raise PanelError(f"duplicate row for region {dup['region_id']} month {dup['month']}")
    rate = comp["rate"].to_numpy(float)
    if np.any(~np.isfinite(rate)) or np.any((rate < 0) | (rate > 1)):
        bad = comp.loc[~((rate >= 0) & (rate <= 1)), "rate"].iloc[0]
        raise PanelError(f"rate {bad} outside [0, 1]")
    nj = comp["n_journeys"].to_numpy()
    if np.any(nj < 0):
        raise PanelError("n_journeys must be non-negative")
    months_present = comp["month"].astype(int)
    if len(comp) and (months_present.min() < 1 or months_present.max() > 12):
        raise PanelError("month must be in 1..12")

    region_ids = tuple(sorted(comp["region_id"].unique()))
    months = tuple(range(int(months_present.min()), int(months_present.max()) + 1)) if len(comp) else ()

    if covariates is not None:
        cov = _read_table(covariates)
        cov["region_id"] = cov["region_id"].astype(str)
        by_month = "month" in cov.columns
        names = [c for c in cov.columns if c not in ("region_id", "month")]
        if use_covariates is not None:
            unknown = set(use_covariates) - set(names)
            if unknown:
                raise PanelError(f"unknown covariates {sorted(unknown)}")
            names = list(use_covariates)
        key = ["region_id", "month"] if by_month else ["region_id"]
        if cov.duplicated(key).any():
            raise PanelError("duplicate rows in covariate table")
        absent = sorted(set(region_ids) - set(cov["region_id"]))
        if absent:
            raise PanelError(f"regions {absent[:5]} absent from covariate table")
    else:
        cov, by_month, names = None, False, []

    R, T, K = len(region_ids), len(months), len(names)
    ridx = {r: i for i, r in enumerate(region_ids)}
    midx = {m: t for t, m in enumerate(months)}
    raw = np.full((R, T), np.nan)
    counts = np.zeros((R, T), dtype=np.int64)
    for r, m, q, n in zip(comp["region_id"], months_present, rate, nj):
        raw[ridx[r], midx[m]] = q
        counts[ridx[r], midx[m]] = int(n)
    raw[counts == 0] = np.nan

    X_raw = np.zeros((R, T, K))
    if cov is not None and K:
        cov = cov[cov["region_id"].isin(ridx)]
        vals = cov[names].to_numpy(float)
        if not np.all(np.isfinite(vals)):
            raise PanelError("non-finite covariate values")
        if not by_month:
            for row, r in zip(vals, cov["region_id"]):
                X_raw[ridx[r], :, :] = row
        else:
            seen = np.zeros((R, T), dtype=bool)
            for row, r, m in zip(vals, cov["region_id"], cov["month"].astype(int)):
                if m in midx:
                    X_raw[ridx[r], midx[m], :] = row
                    seen[ridx[r], midx[m]] = True
            if not seen.all():
                raise PanelError("covariate table misses some (region, month) cells")

    return _finish_panel(region_ids, months, raw, counts, X_raw, tuple(names),
                         center=center, scale=scale)


def _finish_panel(region_ids, months, raw, counts, X_raw, names, *, center, scale, adjust=True):
    K = len(names)
    scaling = {}
    X = X_raw.copy()
    for k, name in enumerate(names):
        col = X_raw[:, :, k]
        c = float(col.mean()) if center else 0.0
        s = float(col.std()) if scale else 1.0
        if s == 0.0:
            s = 1.0
        X[:, :, k] = (col - c) / s
        scaling[name] = {"center": c, "scale": s}
    if adjust:
        with np.errstate(invalid="ignore"):
            y = np.where(counts > 0, boundary_adjust(np.nan_to_num(raw), counts), np.nan)
    else:
        y = np.where(counts > 0, raw, np.nan)
        if np.any((counts > 0) & ~((y > 0) & (y < 1))):
            raise PanelError("unadjusted rates must lie strictly inside (0, 1)")
    for arr in (y, raw, counts, X, X_raw):
        arr.setflags(write=False)
    return Panel(tuple(region_ids), tuple(months), y, raw, counts, X, X_raw,
                 tuple(names), scaling)


def panel_from_arrays(raw_rate, n_journeys, covariates=None, *, region_ids=None,
                      months=None, covariate_names=None, center=False, scale=False,
                      adjust=True) -> Panel:
    """Panel from in-memory arrays.

    ``raw_rate`` and ``n_journeys`` are ``(R, T)``; ``covariates`` is
    ``(R, K)`` (constant over months) or ``(R, T, K)``. With
    ``adjust=False`` the rates are used as given and must already lie in
    (0, 1).
    """
    raw = np.array(raw_rate, dtype=float)
    counts = np.array(n_journeys, dtype=np.int64)
    if raw.ndim != 2 or raw.shape != counts.shape:
        raise PanelError("raw_rate and n_journeys must be (R, T) arrays of equal shape")
    R, T = raw.shape
    ok = counts > 0
    if np.any(ok & ~((raw >= 0) & (raw <= 1))):
        raise PanelError("rate outside [0, 1]")
    raw = np.where(ok, raw, np.nan)
    if covariates is None:
        X_raw = np.zeros((R, T, 0))
    else:
        c = np.asarray(covariates, dtype=float)
        if c.ndim == 2:
            c = np.repeat(c[:, None, :], T, axis=1)
        if c.shape[:2] != (R, T):
            raise PanelError("covariates must be (R, K) or (R, T, K)")
        X_raw = c.copy()
    K = X_raw.shape[2]
    names = tuple(covariate_names) if covariate_names is not None else tuple(f"x{k + 1}" for k in range(K))
    if len(names) != K:
        raise PanelError("covariate_names length does not match covariates")
    rids = tuple(region_ids) if region_ids is not None else tuple(f"{i:03d}" for i in range(R))
    mons = tuple(months) if months is not None else tuple(range(1, T + 1))
    return _finish_panel(rids, mons, raw, counts, X_raw, names, center=center, scale=scale,
                         adjust=adjust)


def save_panel(panel: Panel, directory):
    """Write ``compliance.csv``, ``covariates.csv`` and ``panel.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_frame(panel.compliance_frame(), d / "compliance.csv")
    _write_frame(panel.covariate_frame(), d / "covariates.csv")
    meta = {
        "center": any(v["center"] != 0.0 for v in panel.covariate_scaling.values()),
        "scale": any(v["scale"] != 1.0 for v in panel.covariate_scaling.values()),
        "covariate_names": list(panel.covariate_names),
    }
    (d / "panel.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_panel_dir(directory) -> Panel:
    d = Path(directory)
    meta = json.loads((d / "panel.json").read_text())
    return load_panel(d / "compliance.csv", d / "covariates.csv",
                      center=meta["center"], scale=meta["scale"],
                      use_covariates=meta["covariate_names"])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_frame(df: pd.DataFrame, path):
    """CSV writer with round-trip-exact float formatting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(df.columns))
        for row in df.itertuples(index=False):
            w.writerow([_fmt(v) for v in row])


def correlation_screen(covariates, threshold: float = CORRELATION_FLAG) -> dict:
    """Pairwise Pearson correlations among covariates, flagging ``|r| >= threshold``.

    Only reports; dropping a variable stays the analyst's call.
    """
    df = _read_table(covariates) if not isinstance(covariates, Panel) else covariates.covariate_frame()
    cols = [c for c in df.columns if c not in ("region_id", "month")]
    corr = df[cols].astype(float).corr(method="pearson")
    pairs = []
    for a_i, a in enumerate(cols):
        for b in cols[a_i + 1:]:
            r = float(corr.loc[a, b])
            pairs.append({"a": a, "b": b, "r": None if math.isnan(r) else r,
                          "flagged": bool(not math.isnan(r) and abs(r) >= threshold)})
    return {"threshold": threshold, "pairs": pairs,
            "flagged": [[p["a"], p["b"]] for p in pairs if p["flagged"]]}
