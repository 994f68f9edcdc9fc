"""BGR - Continual learning with Bayesian generative regularization."""

__version__ = "0.1.0"
__author__ = "BGR Contributors"
