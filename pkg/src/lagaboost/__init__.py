"""Boosted regression trees combined with latent Gaussian models.

Tree ensembles give the prior mean of a latent Gaussian model (grouped
random effects or a Gaussian process), fitted jointly for non-Gaussian
responses through a Laplace approximation of the marginal likelihood.
"""

from .boosting import (BoostConfig, BoostedModel, LinearModel, NumericalError,
                       fit_independent_boosting, fit_lagaboost,
                       fit_lagaboost_oos, fit_linear_baseline, optimize_theta)
from .estimators import (IndependentBoostingEstimator, LaGaBoostEstimator,
                         LinearLatentGaussianEstimator)
from .laplace import make_engine
from .likelihoods import BernoulliProbit, PoissonLog, get_likelihood
from .prediction import (PredictiveMoments, predict_latent, predict_response,
                         response_from_moments)
from .simulation import SimConfig, gen_dataset, run_experiment, run_sweep
from .structures import GpStructure, GroupedStructure, make_structure
from .trees import RegressionTree, fit_tree

__version__ = "0.1.0"

__all__ = [
    "BernoulliProbit", "PoissonLog", "get_likelihood",
    "GroupedStructure", "GpStructure", "make_structure",
    "make_engine",
    "RegressionTree", "fit_tree",
    "BoostConfig", "BoostedModel", "LinearModel", "NumericalError",
    "fit_lagaboost", "fit_lagaboost_oos", "fit_linear_baseline",
    "fit_independent_boosting", "optimize_theta",
    "PredictiveMoments", "predict_latent", "predict_response",
    "response_from_moments",
    "SimConfig", "gen_dataset", "run_experiment", "run_sweep",
    "LaGaBoostEstimator", "LinearLatentGaussianEstimator",
    "IndependentBoostingEstimator",
]
