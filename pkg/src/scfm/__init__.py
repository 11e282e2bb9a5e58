"""Gradient estimators for learning generative models with stochastic
control flow, with mixture-model and grammar benchmarks."""

from . import autodiff, distributions, estimators, gmm, grammar, nn, optim, pcfg, toy

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "distributions",
    "estimators",
    "gmm",
    "grammar",
    "nn",
    "optim",
    "pcfg",
    "toy",
    "__version__",
]
