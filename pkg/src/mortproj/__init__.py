"""Bayesian Poisson-lognormal models for stratified cancer mortality panels."""

__version__ = "0.1.0"
