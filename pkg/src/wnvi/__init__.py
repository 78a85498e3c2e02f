"""Weak-form variational inference for elastography with constitutive
model-error quantification.

Subpackages cover the structured mesh, a tape-based autodiff engine,
constitutive laws, FEM forward solves for data generation, field
representations, weak/collocation residuals, the stochastic variational
training loop, and posterior post-processing.
"""

__version__ = "0.1.0"
