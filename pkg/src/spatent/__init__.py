"""Bayesian entropy surfaces for spatially correlated binary lattice data.

Pipeline: simulate binary fields from a latent-Gaussian CAR model or a
centered autologistic model, fit the CAR-logit model by MCMC, and turn the
posterior into per-cell entropy surfaces alongside classical non-spatial
entropy estimators.
"""

from .entropy import (
    EntropySurface,
    entropy_surface_point,
    jackknife_estimator,
    local_entropy,
    miller_madow,
    plugin_estimator,
    posterior_entropy_surface,
    shannon_entropy,
)
from .infer import (
    FitConfig,
    PosteriorSamples,
    PosteriorSummary,
    Priors,
    diagnostics,
    fit_mcmc,
    log_posterior,
    posterior_summary,
)
from .lattice import (
    GridSpec,
    NeighbourhoodScheme,
    PrecisionMatrix,
    build_adjacency,
    build_precision,
    degree_matrix,
    log_det_precision,
    sparse_cholesky,
)
from .simulate import (
    AutologisticParams,
    BinaryField,
    ScenarioConfig,
    bernoulli_field,
    gibbs_autologistic,
    sample_gmrf,
    simulate_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "AutologisticParams",
    "BinaryField",
    "EntropySurface",
    "FitConfig",
    "GridSpec",
    "NeighbourhoodScheme",
    "PosteriorSamples",
    "PosteriorSummary",
    "PrecisionMatrix",
    "Priors",
    "ScenarioConfig",
    "bernoulli_field",
    "build_adjacency",
    "build_precision",
    "degree_matrix",
    "diagnostics",
    "entropy_surface_point",
    "fit_mcmc",
    "gibbs_autologistic",
    "jackknife_estimator",
    "local_entropy",
    "log_det_precision",
    "log_posterior",
    "miller_madow",
    "plugin_estimator",
    "posterior_entropy_surface",
    "posterior_summary",
    "sample_gmrf",
    "shannon_entropy",
    "simulate_scenario",
    "sparse_cholesky",
]
