"""Dynamic spatio-temporal modeling of censored rainfall fields.

A latent Gaussian precipitation potential drives rain occurrence and
amount through a censored power transform; the potential's structured part
follows a convolution autoregression discretized on the Voronoi
tessellation of the station network. The package fits the model by MCMC,
samples short-term predictive distributions (stationwise, at new sites and
as areal averages) and scores them with CRPS and MAE.
"""

__version__ = "0.1.0"

from .geometry import Region, Site, StationSet, Tessellation, areal_weights, build_tessellation, distance_matrix
from .mcmc import ChainConfig, ChainOutput, LatentState, PriorConfig, RainModel, log_posterior, run_chain
from .model import CovariateGrid, ObservationGrid, Params, WindSeries, damping, exp_covariance, inverse_transform, propagator, stability_spectral_radius, transform
from .predict import PredictiveEnsemble, predict_ahead, predict_areal, predict_new_sites
from .score import ForecastCase, ScoreTable, crps_sample, mae_median, score_table
from .synth import SimulationResult, SynthSpec, desk_scale_spec, simulate

__all__ = [
    "Region", "Site", "StationSet", "Tessellation", "areal_weights",
    "build_tessellation", "distance_matrix",
    "ChainConfig", "ChainOutput", "LatentState", "PriorConfig", "RainModel",
    "log_posterior", "run_chain",
    "CovariateGrid", "ObservationGrid", "Params", "WindSeries", "damping",
    "exp_covariance", "inverse_transform", "propagator",
    "stability_spectral_radius", "transform",
    "PredictiveEnsemble", "predict_ahead", "predict_areal", "predict_new_sites",
    "ForecastCase", "ScoreTable", "crps_sample", "mae_median", "score_table",
    "SimulationResult", "SynthSpec", "desk_scale_spec", "simulate",
]
