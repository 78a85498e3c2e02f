"""Point-wise constitutive laws: linear isotropic and transversely isotropic.

The component-level functions (``*_components``) are written with plain
arithmetic only, so they evaluate identically on floats, numpy arrays
(batched over elements), and autodiff tensors; the 2x2 wrappers are the
convenience API for single points.  Plane-strain kinematics, 2D tensors
throughout.  Stresses are symmetric by construction: only the (11, 12, 22)
components are ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor


class DegenerateMaterialError(ValueError):
    """Transversely isotropic parameter chain hits m = 0."""


class InvertedElementError(ValueError):
    """Deformation gradient has non-positive determinant."""


def _values(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass(frozen=True)
class IsoParams:
    """Linear isotropic material: Young's modulus and Poisson's ratio."""

    E: float
    nu: float

    def __post_init__(self):
        if self.E <= 0:
            raise ValueError(f"Young's modulus must be positive, got {self.E}")
        if not 0.0 <= self.nu < 0.5:
            raise ValueError(f"Poisson's ratio must lie in [0, 0.5), got {self.nu}")


@dataclass(frozen=True)
class TransIsoParams:
    """Transversely isotropic material, symmetric about the unit axis ``a``."""

    E: float
    E_a: float
    nu: float
    G_a: float
    a: tuple = (1.0, 0.0)

    def __post_init__(self):
        if min(self.E, self.E_a, self.G_a) <= 0:
            raise ValueError("moduli must be positive")
        if abs(np.hypot(*self.a) - 1.0) > 1e-12:
            raise ValueError(f"axis must be a unit vector, got {self.a}")
        transiso_constants(self)   # raises if m degenerates


class TransIsoConstants(NamedTuple):
    n: float
    m: float
    lam: float
    mu: float
    alpha: float
    beta: float
    gamma: float


def lame_parameters(E, nu):
    """First and second Lame parameters from (E, nu); E may be batched."""
    lam = E * (nu / ((1.0 - 2.0 * nu) * (1.0 + nu)))
    mu = E * (1.0 / (2.0 * (1.0 + nu)))
    return lam, mu


def transiso_constants(p: TransIsoParams) -> TransIsoConstants:
    """Derived-constant chain for the transversely isotropic law."""
    n = p.E_a / p.E
    m = 1.0 - p.nu - 2.0 * n * p.nu ** 2
    if abs(m) < 1e-14:
        raise DegenerateMaterialError(
            f"degenerate trans-iso parameters: m = {m}")
    lam = p.E * (p.nu + n * p.nu ** 2) / (m * (1.0 + p.nu))
    mu = p.E / (2.0 * (1.0 + p.nu))
    alpha = mu - p.G_a
    beta = p.E * p.nu ** 2 * (1.0 - n) / (4.0 * m * (1.0 + p.nu))
    gamma = (p.E_a * (1.0 - p.nu) / (8.0 * m)
             - (lam + 2.0 * mu) / 8.0 + alpha / 2.0 - beta)
    return TransIsoConstants(n, m, lam, mu, alpha, beta, gamma)


@dataclass(frozen=True)
class KinematicState:
    """Deformation measures derived from a 2x2 displacement gradient."""

    grad_u: np.ndarray
    axis: tuple = (1.0, 0.0)
    F: np.ndarray = field(init=False)
    B: np.ndarray = field(init=False)
    C: np.ndarray = field(init=False)
    J: float = field(init=False)
    I1: float = field(init=False)
    I4: float = field(init=False)
    A: np.ndarray = field(init=False)

    def __post_init__(self):
        F = np.eye(2) + np.asarray(self.grad_u, dtype=float)
        a = np.asarray(self.axis, dtype=float)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "B", F @ F.T)
        object.__setattr__(self, "C", F.T @ F)
        object.__setattr__(self, "J", float(np.linalg.det(F)))
        object.__setattr__(self, "I1", float(np.trace(F.T @ F)))
        object.__setattr__(self, "I4", float(a @ (F.T @ F) @ a))
        object.__setattr__(self, "A", np.outer(a, a))


# ---------------------------------------------------------------------------
# component-level laws (float / ndarray / Tensor transparent)

def linear_iso_stress_components(e11, e22, e12, E, nu):
    """Linear isotropic Cauchy stress from small-strain components."""
    lam, mu = lame_parameters(E, nu)
    tr = e11 + e22
    s11 = lam * tr + 2.0 * mu * e11
    s22 = lam * tr + 2.0 * mu * e22
    s12 = 2.0 * mu * e12
    return s11, s12, s22


def transiso_stress_components(g11, g12, g21, g22, c: TransIsoConstants, axis):
    """Transversely isotropic Cauchy stress from displacement-gradient
    components; the 1/J prefactor applies to the anisotropic groups while
    the isotropic tail keeps its written mu/J and lambda(J-1) factors."""
    a1, a2 = float(axis[0]), float(axis[1])
    F11 = g11 + 1.0
    F12 = g12
    F21 = g21
    F22 = g22 + 1.0
    J = F11 * F22 - F12 * F21
    B11 = F11 * F11 + F12 * F12
    B12 = F11 * F21 + F12 * F22
    B22 = F21 * F21 + F22 * F22
    C11 = F11 * F11 + F21 * F21
    C12 = F11 * F12 + F21 * F22
    C22 = F12 * F12 + F22 * F22
    I1 = C11 + C22
    I4 = a1 * a1 * C11 + 2.0 * a1 * a2 * C12 + a2 * a2 * C22
    Ba1 = B11 * a1 + B12 * a2
    Ba2 = B12 * a1 + B22 * a2

    coef_B = 2.0 * c.beta * (I4 - 1.0)
    coef_A = 2.0 * (c.alpha + c.beta * (I1 - 2.0) + 2.0 * c.gamma * (I4 - 1.0))
    an11 = coef_B * B11 + coef_A * (a1 * a1) - c.alpha * (2.0 * Ba1 * a1)
    an12 = coef_B * B12 + coef_A * (a1 * a2) - c.alpha * (Ba1 * a2 + a1 * Ba2)
    an22 = coef_B * B22 + coef_A * (a2 * a2) - c.alpha * (2.0 * Ba2 * a2)

    vol = c.lam * (J - 1.0)
    s11 = (an11 + c.mu * (B11 - 1.0)) / J + vol
    s12 = (an12 + c.mu * B12) / J
    s22 = (an22 + c.mu * (B22 - 1.0)) / J + vol
    return s11, s12, s22


# ---------------------------------------------------------------------------
# 2x2 wrappers

def _as_tensor22(s11, s12, s22):
    return np.array([[s11, s12], [s12, s22]], dtype=float)


def linear_isotropic_stress(grad_u, p: IsoParams) -> np.ndarray:
    """Symmetric 2x2 stress of the linear isotropic law at one point."""
    g = np.asarray(grad_u, dtype=float)
    e11, e22 = g[0, 0], g[1, 1]
    e12 = 0.5 * (g[0, 1] + g[1, 0])
    return _as_tensor22(*linear_iso_stress_components(e11, e22, e12, p.E, p.nu))


def transiso_stress(grad_u, p: TransIsoParams) -> np.ndarray:
    """Symmetric 2x2 stress of the transversely isotropic law at one point."""
    g = np.asarray(grad_u, dtype=float)
    c = transiso_constants(p)
    J = (1.0 + g[0, 0]) * (1.0 + g[1, 1]) - g[0, 1] * g[1, 0]
    if J <= 0:
        raise InvertedElementError(f"det F = {J} <= 0")
    s11, s12, s22 = transiso_stress_components(
        g[0, 0], g[0, 1], g[1, 0], g[1, 1], c, p.a)
    return _as_tensor22(s11, s12, s22)
