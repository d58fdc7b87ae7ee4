"""Numerical laboratory for one-world quantum dynamics.

Modules: ``core_fields`` (grid Schrodinger vector and observables),
``one_world`` (stochastic paths, Feynman-Kac), ``param_space`` (parameter
flows), ``adf_gaussian`` (action-decomposed Gaussians), ``branching``
(Weierstrass-split trees) and ``cli_io`` (configuration and CLI).
"""
__version__ = "0.1.0"
