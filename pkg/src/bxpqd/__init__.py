"""Bayesian occlusion explanations for PQD classifiers."""

__version__ = "0.1.0"
