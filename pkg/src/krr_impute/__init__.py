"""Mean estimation under item nonresponse by kernel ridge regression
imputation, with density-ratio weights for linearization variance."""

from .density_ratio import DensityRatioModel, estimate_weights, fit_ratio
from .inference import ImputationReport, estimate_mean
from .kernels import InputScaler, KernelSpec
from .krr import KrrModel, LabeledSample, fit, fit_gcv, impute_estimate

__all__ = [
    "DensityRatioModel",
    "ImputationReport",
    "InputScaler",
    "KernelSpec",
    "KrrModel",
    "LabeledSample",
    "estimate_mean",
    "estimate_weights",
    "fit",
    "fit_gcv",
    "fit_ratio",
    "impute_estimate",
]

__version__ = "0.1.0"
