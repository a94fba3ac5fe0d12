"""Command-line entry point: ``beltfield {ingest,moran,fit,eval,simulate}``.

Exit codes: 0 success, 1 numerical failure, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .autocorr import moran_by_month
from .evaluation import (COMPARISON_COLUMNS, NotApplicableError, compare, evaluate,
                         moran_frame, pit_histogram, spatial_effect_export, spatial_effect_geojson)
from .graph import (GraphError, iowa_geojson_path, iowa_graph, queen_contiguity, read_adjacency,
                    read_geojson_polygons, write_adjacency)
from .model import MODEL_SPECS, ModelSpec, Priors, SpecError
from .panel import (IngestReport, PanelError, aggregate_journeys, compliance_frame, correlation_screen,
                    load_panel, read_events_csv, read_panel_dir, save_panel,
                    write_events_csv)
from .sampler import (McmcConfig, SamplerError, convergence, fit, load_fit, save_fit, summarize,
                      summary_frame)
from .synth import default_hyper, simulate_journeys, simulate_panel

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("beltfield")

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


# -- config handling ----------------------------------------------------------

def load_config(path):
    """Read a TOML or JSON config file into a nested dict."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise InputError(f"config file not found: {p}")
    text = p.read_bytes()
    try:
        if p.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise InputError(f"cannot parse config {p}: {exc}") from None


def _lookup(cfg, dotted, default=None):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return cfg.get(dotted, default) if isinstance(cfg, dict) else default
        node = node[part]
    return node


def _resolve(args, cfg, key, cfg_key=None, default=None):
    """Flag value if given, else config value, else default."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    return _lookup(cfg, cfg_key or key.replace("_", "."), default) if cfg else default


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _write_csv(df: pd.DataFrame, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def _sidecar(path, suffix):
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _priors(args, cfg):
    merged = {}
    if cfg:
        merged.update({k: v for k, v in Priors.from_mapping(cfg).to_mapping().items()})
    for item in getattr(args, "prior", None) or []:
        if "=" not in item:
            raise InputError(f"--prior expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        merged[k.strip()] = float(v)
    try:
        return Priors.from_mapping(merged)
    except (KeyError, ValueError) as exc:
        raise InputError(str(exc)) from None


def _threads(args):
    return args.threads  # None falls back to BELTFIELD_THREADS inside the sampler


# -- inputs -----------------------------------------------------------------------

def _read_panel(path, covariates=None, center=False, scale=False, use=None):
    p = Path(path)
    if not p.exists():
        raise InputError(f"panel not found: {p}")
    if p.is_dir():
        return read_panel_dir(p)
    if covariates is not None and not Path(covariates).exists():
        raise InputError(f"covariate table not found: {covariates}")
    return load_panel(p, covariates, center=center, scale=scale, use_covariates=use)


def _read_graph(path, panel=None):
    ids = tuple(panel.region_ids) if panel is not None else None
    if path is None or str(path) == "iowa":
        g = iowa_graph()
        if ids is not None and tuple(g.region_ids) != ids:
            raise InputError("panel regions do not match the bundled Iowa counties; pass --graph")
        return g
    p = Path(path)
    if not p.exists():
        raise InputError(f"graph not found: {p}")
    if p.suffix.lower() in (".geojson", ".json"):
        g = queen_contiguity(read_geojson_polygons(p))
        if ids is not None:
            if set(g.region_ids) != set(ids):
                raise InputError("GeoJSON region_ids do not match the panel")
            pos = {r: k for k, r in enumerate(g.region_ids)}
            g = g.permute([pos[r] for r in ids])
        return g
    n = len(ids) if ids is not None else None
    g = read_adjacency(p, n_regions=n, region_ids=ids)
    if n is not None and g.n_regions != n:
        raise InputError(f"graph has {g.n_regions} regions, panel has {n}")
    return g


# -- commands ---------------------------------------------------------------------

def cmd_ingest(args):
    cfg = load_config(args.config)
    window = float(_resolve(args, cfg, "latch_window", "ingest.latch_window_s", 600.0))
    if window <= 0:
        raise InputError("--latch-window must be positive")
    src = Path(args.events)
    if not src.exists():
        raise InputError(f"events file not found: {src}")
    report = IngestReport()
    events = read_events_csv(src, report)
    counts = aggregate_journeys(events, latch_window_s=window, report=report)
    if args.covariates is not None:
        if not Path(args.covariates).exists():
            raise InputError(f"covariate table not found: {args.covariates}")
        report.correlation_screen = correlation_screen(args.covariates)
    out = Path(args.out)
    _write_csv(compliance_frame(counts), out)
    report.to_json(args.report or _sidecar(out, "_report.json"))
    _write_json(_sidecar(out, "_config.json"), {
        "command": "ingest", "events": str(src), "out": str(out), "latch_window_s": window,
        "version": __version__})
    log.info("%d journeys in %d cells, %d malformed records", report.n_journeys,
             report.n_cells, report.n_malformed)
    return EXIT_OK


def cmd_moran(args):
    cfg = load_config(args.config)
    panel = _read_panel(args.panel, args.covariates)
    graph = _read_graph(_resolve(args, cfg, "graph", "graph"), panel)
    style = _resolve(args, cfg, "weights", "moran.weights", "binary")
    n_perm = _resolve(args, cfg, "perm", "moran.perm", 0)
    seed = int(_resolve(args, cfg, "seed", "seed", 0))
    alternative = "two-sided" if args.two_sided else "greater"
    results = moran_by_month(panel.y, graph, panel.months, style=style, n_perm=n_perm or None,
                             seed=seed, alternative=alternative)
    rows = []
    for r in results:
        row = {"month": r.month, "I": np.nan, "expected_I": np.nan, "variance_I": np.nan,
               "z": np.nan, "p_normal": np.nan, "p_two_sided": np.nan, "n_used": 0,
               "status": r.status}
        if r.status == "ok":
            res = r.result
            row.update(I=res.I, expected_I=res.expected_I, variance_I=res.variance_I, z=res.z,
                       p_normal=res.p_value(alternative), p_two_sided=res.p_two_sided,
                       n_used=res.n_used)
            if n_perm:
                row["p_perm"] = res.p_perm
        elif n_perm:
            row["p_perm"] = np.nan
        rows.append(row)
    out = Path(args.out)
    _write_csv(pd.DataFrame(rows), out)
    _write_json(_sidecar(out, "_config.json"), {
        "command": "moran", "panel": str(args.panel), "graph": str(args.graph or "iowa"),
        "weights": style, "perm": n_perm, "seed": seed, "alternative": alternative,
        "version": __version__})
    return EXIT_OK


def _parse_spec(code):
    try:
        return ModelSpec.parse(code)
    except SpecError as exc:
        valid = ", ".join(s.code for s in MODEL_SPECS.values())
        msg = str(exc)
        raise SpecError(msg if "valid codes" in msg else f"{msg}; valid codes: {valid}") from None


def _mcmc_config(args, cfg):
    d = McmcConfig.__dataclass_fields__
    kw = {}
    for name in ("n_iter", "n_burnin", "n_thin", "n_chains", "adaptation_window"):
        flag = {"n_iter": "iter", "n_burnin": "burnin", "n_thin": "thin",
                "n_chains": "chains", "adaptation_window": "adapt_window"}[name]
        kw[name] = int(_resolve(args, cfg, flag, f"mcmc.{name}", d[name].default))
    kw["seed"] = int(_resolve(args, cfg, "seed", "seed", 0))
    kw["keep_eta"] = bool(args.keep_eta or _lookup(cfg, "mcmc.keep_eta", False))
    try:
        return McmcConfig(**kw)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def cmd_fit(args):
    cfg = load_config(args.config)
    code = _resolve(args, cfg, "spec", "spec")
    if code is None:
        raise InputError("--spec is required")
    spec = _parse_spec(code)
    panel = _read_panel(args.panel, args.covariates, args.center, args.scale,
                        args.use_covariates.split(",") if args.use_covariates else None)
    graph = _read_graph(_resolve(args, cfg, "graph", "graph"), panel)
    priors = _priors(args, cfg)
    mcmc = _mcmc_config(args, cfg)
    post = fit(panel, graph, spec, priors, mcmc, threads=_threads(args))
    out = Path(args.out)
    save_fit(post, out)
    _write_csv(summary_frame(summarize(post, min_draws=min(100, post.n_draws))), out / "summary.csv")
    if post.n_chains > 1:
        conv = convergence(post)
        _write_csv(pd.DataFrame([(c.name, c.rhat, c.ess, c.flagged) for c in conv],
                                columns=["Parameter", "Rhat", "ESS", "flagged"]),
                   out / "convergence.csv")
        for c in conv:
            if c.flagged:
                log.warning("%s: split R-hat %.3f above 1.05", c.name, c.rhat)
    _write_json(out / "config.json", {
        "command": "fit", "panel": str(args.panel), "graph": str(args.graph or "iowa"),
        "spec": spec.code, "mcmc": vars(mcmc), "priors": priors.to_mapping(),
        "seed": mcmc.seed, "version": __version__})
    return EXIT_OK


def cmd_eval(args):
    cfg = load_config(args.config)
    fits = []
    for d in args.fits:
        p = Path(d)
        if not (p / "manifest.json").exists():
            raise InputError(f"not a fit directory: {p}")
        fits.append(load_fit(p))
    graph = None
    if args.graph is not None:
        graph = _read_graph(args.graph)
    style = _resolve(args, cfg, "weights", "moran.weights", "binary")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for f in fits:
        g = graph or f.graph
        r = evaluate(f, g, moran_style=style)
        reports.append(r)
        tag = f.spec.code
        mf = moran_frame(r.residual_moran)
        _write_csv(mf, out / f"residual_moran_{tag}.csv")
        _write_csv(pit_histogram(r.pit_values, args.pit_bins), out / f"pit_{tag}.csv")
        try:
            eff = spatial_effect_export(f)
        except NotApplicableError:
            eff = pd.DataFrame({"region_id": list(f.region_ids), "exp_u": "n/a", "class": "n/a"})
        else:
            if args.geojson:
                spatial_effect_geojson(eff, iowa_geojson_path() if args.geojson == "iowa" else args.geojson,
                                       out / f"spatial_effects_{tag}.geojson")
        _write_csv(eff, out / f"spatial_effects_{tag}.csv")
    table = compare(reports)
    _write_csv(table, out / "comparison.csv")
    _write_json(out / "config.json", {
        "command": "eval", "fits": [str(p) for p in args.fits], "weights": style,
        "pit_bins": args.pit_bins, "seeds": [f.config.seed for f in fits], "version": __version__})
    print(table[list(COMPARISON_COLUMNS)].to_string(index=False))
    return EXIT_OK


def cmd_simulate(args):
    cfg = load_config(args.config)
    code = _resolve(args, cfg, "spec", "spec", "S_BYM.T_AR1.ST_1.B")
    spec = _parse_spec(code)
    seed = int(_resolve(args, cfg, "seed", "seed", 0))
    graph = _read_graph(_resolve(args, cfg, "graph", "graph"))
    truth_cfg = _lookup(cfg, "truth", {}) or {}
    hyper = default_hyper()
    for k, v in (truth_cfg.get("hyper") or {}).items():
        if not hasattr(hyper, k):
            raise InputError(f"unknown hyperparameter {k!r}")
        setattr(hyper, k, float(v))
    kw = {}
    if "alpha" in truth_cfg:
        kw["alpha"] = float(truth_cfg["alpha"])
    if "beta" in truth_cfg:
        kw["beta"] = [float(b) for b in truth_cfg["beta"]]
    if "delta" in truth_cfg:
        kw["delta"] = float(truth_cfg["delta"])
    covariates = _resolve(args, cfg, "covariates", "truth.covariates", "uniform")
    n_months = int(_resolve(args, cfg, "months", "truth.n_months", 12))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    panel, truth = simulate_panel(graph, spec, hyper=hyper, covariates=covariates,
                                  n_months=n_months, seed=seed, **kw)
    resolved = {"command": "simulate", "spec": spec.code, "seed": seed, "graph": str(args.graph or "iowa"),
                "covariates": covariates, "n_months": n_months, "hyper": vars(hyper),
                "mode": "journeys" if args.journeys else "panel", "version": __version__}
    if args.journeys:
        penetration = float(_resolve(args, cfg, "penetration", "journeys.penetration", 0.063))
        per_region = int(_resolve(args, cfg, "journeys_per_region", "journeys.per_region", 1000))
        rates = {(panel.region_ids[i], panel.months[t]): float(truth.mu[i, t])
                 for i in range(panel.n_regions) for t in range(panel.n_months)}
        events = simulate_journeys(rates, per_region, penetration, seed)
        write_events_csv(events, out / "events.csv")
        resolved.update(penetration=penetration, journeys_per_region=per_region)
    else:
        save_panel(panel, out)
        write_adjacency(graph, out / "graph.adj")
    truth.save(out / "truth.json")
    _write_json(out / "config.json", resolved)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="beltfield", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="TOML or JSON file; flags override its values")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="worker cap (default: $BELTFIELD_THREADS or 1)")

    s = sub.add_parser("ingest", help="journey events -> compliance CSV")
    s.add_argument("events")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--covariates", help="covariate CSV to screen for pairwise correlation")
    s.add_argument("--latch-window", dest="latch_window", type=float,
                   help="seconds after first engine_on in which a latch counts (default 600)")
    common(s, seed=False)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("moran", help="monthly Moran's I of the compliance rates")
    s.add_argument("panel", help="panel directory or compliance CSV")
    s.add_argument("--covariates")
    s.add_argument("--graph", help="adjacency file, GeoJSON or 'iowa' (default)")
    s.add_argument("--weights", choices=["binary", "row_standardized"])
    s.add_argument("--perm", type=int, help="permutations for p_perm (>= 99)")
    s.add_argument("--two-sided", action="store_true")
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_moran)

    s = sub.add_parser("fit", help="MCMC fit of one model")
    s.add_argument("panel", help="panel directory or compliance CSV")
    s.add_argument("--covariates")
    s.add_argument("--use-covariates", help="comma-separated subset of covariate columns")
    s.add_argument("--center", action="store_true")
    s.add_argument("--scale", action="store_true")
    s.add_argument("--graph")
    s.add_argument("--spec", help="model code, e.g. S_BYM.T_AR1.ST_1.B")
    s.add_argument("--iter", type=int)
    s.add_argument("--burnin", type=int)
    s.add_argument("--thin", type=int)
    s.add_argument("--chains", type=int)
    s.add_argument("--adapt-window", dest="adapt_window", type=int)
    s.add_argument("--keep-eta", action="store_true")
    s.add_argument("--prior", action="append", help="override, e.g. prior.fixed.sd=10")
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval", help="scores and diagnostics for fit directories")
    s.add_argument("fits", nargs="+")
    s.add_argument("--graph")
    s.add_argument("--weights", choices=["binary", "row_standardized"])
    s.add_argument("--pit-bins", dest="pit_bins", type=int, default=10)
    s.add_argument("--geojson", help="polygon file (or 'iowa') to annotate with spatial effects")
    s.add_argument("--out", required=True)
    common(s, seed=False)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="synthetic panel or journey events")
    s.add_argument("--spec")
    s.add_argument("--graph")
    s.add_argument("--covariates", choices=["uniform", "matched"])
    s.add_argument("--months", type=int)
    s.add_argument("--journeys", action="store_true", help="emit an event stream instead of a panel")
    s.add_argument("--penetration", type=float)
    s.add_argument("--journeys-per-region", dest="journeys_per_region", type=int)
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, SpecError, PanelError, GraphError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SamplerError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
