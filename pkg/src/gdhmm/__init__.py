"""Latent disease progression from objective markers and noisy surrogate labels.

A continuous-time hidden Markov model for the latent state is combined
with a time-varying multinomial logistic model for the markers, fit by a
pseudo-EM algorithm whose E-step never models the marker distribution.
"""
from .core_model import (
    Dataset,
    DiscriminativeParams,
    EmissionMatrix,
    InitialDistribution,
    ModelDims,
    ModelParams,
    SubjectRecord,
    TransitionIntensityMatrix,
    validate_model,
)
from .em import FitConfig, FitResult, fit, initialize
from .errors import ConfigError, DataError, DomainError, FitError, GdhmmError, NumericalError, SchemaError
from .hmm_baseline import fit_hmm, hmm_decode
from .predict import adaptive_viterbi, forecast, posterior_predict
from .simulate import SimulationConfig, make_study

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "Dataset",
    "DiscriminativeParams",
    "DomainError",
    "EmissionMatrix",
    "FitConfig",
    "FitError",
    "FitResult",
    "GdhmmError",
    "InitialDistribution",
    "ModelDims",
    "ModelParams",
    "NumericalError",
    "SchemaError",
    "SimulationConfig",
    "SubjectRecord",
    "TransitionIntensityMatrix",
    "adaptive_viterbi",
    "fit",
    "fit_hmm",
    "forecast",
    "hmm_decode",
    "initialize",
    "make_study",
    "posterior_predict",
    "validate_model",
]
