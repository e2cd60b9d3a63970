"""Semiparametric clusterwise elliptical clustering.

Stages: k-means/Mahalanobis initialization, separation-penalty ADMM,
kernel estimation of the density generator, pseudo-likelihood
maximization, posterior (optimal) clustering with refinement, and
selection of the number of clusters.
"""

__version__ = "0.1.0"

from .core import (ConstantColumn, Dataset, DegenerateScatter, EllipticalParams, EmptyCluster,
                   FitConfig, LengthMismatch, NotSPD, Partition, SCEDError, TooFewPoints,
                   TransformSpec, scatter_from_variance, standardize, validate_params)
from .pipeline import FitReport, fit_once, fit_range

__all__ = [
    "ConstantColumn", "Dataset", "DegenerateScatter", "EllipticalParams", "EmptyCluster",
    "FitConfig", "FitReport", "LengthMismatch", "NotSPD", "Partition", "SCEDError",
    "TooFewPoints", "TransformSpec", "fit_once", "fit_range", "scatter_from_variance",
    "standardize", "validate_params", "__version__",
]
