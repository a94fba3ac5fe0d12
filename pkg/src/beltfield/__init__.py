"""Spatio-temporal beta regression for regional seatbelt compliance rates."""

__version__ = "0.1.0"

from .autocorr import MoranResult, moran_by_month, moran_test_normal, moran_test_perm, morans_i
from .estimator import SpatioTemporalBetaRegressor
from .evaluation import EvalReport, compare, evaluate
from .graph import RegionGraph, iowa_graph, queen_contiguity, read_adjacency, weight_matrix
from .model import MODEL_SPECS, HyperParams, ModelSpec, Priors, SpecError
from .panel import Panel, PanelError, aggregate_journeys, load_panel, read_events_csv
from .sampler import McmcConfig, PosteriorFit, SamplerError, fit, load_fit, save_fit, summarize
from .synth import GenTruth, simulate_journeys, simulate_panel

__all__ = [
    "MoranResult", "moran_by_month", "moran_test_normal", "moran_test_perm", "morans_i",
    "SpatioTemporalBetaRegressor", "EvalReport", "compare", "evaluate",
    "RegionGraph", "iowa_graph", "queen_contiguity", "read_adjacency", "weight_matrix",
    "MODEL_SPECS", "HyperParams", "ModelSpec", "Priors", "SpecError",
    "Panel", "PanelError", "aggregate_journeys", "load_panel", "read_events_csv",
    "McmcConfig", "PosteriorFit", "SamplerError", "fit", "load_fit", "save_fit", "summarize",
    "GenTruth", "simulate_journeys", "simulate_panel",
]
