"""Sparse spike-and-slab fractional posteriors for grouped generalized linear models."""

from .dataset import Dataset
from .design import GroupedDesign, PaddedVector, enumerate_supports
from .diagnostics import (CredibleSet, DiagnosticsReport, TvEstimate, assumption_audit, contains,
                          coverage_experiment, oracle_credible_set, plugin_credible_set, renyi_separation,
                          score_envelope_experiment, support_recovery_experiment, tv_between_support_mixtures,
                          tv_mixture_vs_oracle)
from .experiments import ConfigError, generate_dataset, load_config, validate_config
from .family import GlmFamily, get_family
from .kernels import BACKEND
from .posterior import (OracleLaw, SupportPosterior, exact_log_marginal, laplace_log_marginal,
                        mixture_weights, oracle_law, posterior_mode_support, support_posterior)
from .prior import SasPrior, make_prior
from .restricted import RestrictedModel, restricted_mle

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigError", "CredibleSet", "Dataset", "DiagnosticsReport", "GlmFamily", "GroupedDesign",
    "OracleLaw", "PaddedVector", "RestrictedModel", "SasPrior", "SupportPosterior", "TvEstimate",
    "assumption_audit", "contains", "coverage_experiment", "enumerate_supports", "exact_log_marginal",
    "generate_dataset", "get_family", "laplace_log_marginal", "load_config", "make_prior", "mixture_weights",
    "oracle_credible_set", "oracle_law", "plugin_credible_set", "posterior_mode_support", "renyi_separation",
    "restricted_mle", "score_envelope_experiment", "support_posterior", "support_recovery_experiment",
    "tv_between_support_mixtures", "tv_mixture_vs_oracle", "validate_config",
]
