"""
Stokes operator, convection, Forchheimer damping and the norms used by the
energy and dimension estimates.

Every operator returns a projected (divergence-free) SpectralField.
Nonlinear products are formed on the padded quadrature grid and truncated
back, so with pad_factor >= 2 the quadratic and cubic products are exact on
the retained modes.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from spectral_field import (
    GridMismatchError,
    SpectralField,
    project_coeffs,
    to_physical,
    to_spectral,
)

logger = logging.getLogger(__name__)

# below this speed the |u|^(r-3) factor of C'(u) for r = 2 is treated as 0
SPEED_FLOOR = 1e-14


@dataclass(frozen=True)
class NormKind:
    """One of H, V (gradient), Vdual, or Lp with 2 <= p < ∞."""

    tag: str
    p: Optional[float] = None

    def __post_init__(self):
        if self.tag not in ("H", "V", "Vdual", "Lp"):
            raise ValueError(f"unknown norm {self.tag!r}")
        if self.tag == "Lp":
            if self.p is None or not np.isfinite(self.p) or self.p < 2:
                raise ValueError(f"Lp norm needs 2 <= p < inf, got p={self.p}")
        elif self.p is not None:
            raise ValueError(f"norm {self.tag} takes no exponent")

    @classmethod
    def lp(cls, p):
        return cls("Lp", float(p))


NORM_H = NormKind("H")
NORM_V = NormKind("V")
NORM_VDUAL = NormKind("Vdual")


def _same_grid(*fields):
    grid = fields[0].grid
    for other in fields[1:]:
        if other.grid != grid:
            raise GridMismatchError(f"grid {other.grid} does not match {grid}")
    return grid


def _check_r(r):
    if r not in (1, 2, 3):
        raise ValueError(f"r = {r} is not supported; supported set {{1, 2, 3}}")


# --- raw-array kernels, shared with the integrator -------------------------

def convection_coeffs(grid, u, v):
    """P((u·∇)v) for coefficient arrays (2, N, N)."""
    up = to_physical(grid, u, padded=True)
    dvx = to_physical(grid, 1j * grid.kx * v, padded=True)
    dvy = to_physical(grid, 1j * grid.ky * v, padded=True)
    product = up[0] * dvx + up[1] * dvy
    return project_coeffs(grid, to_spectral(grid, product, padded=True))


def damping_coeffs(grid, u, r):
    """P(|u|^(r-1) u)."""
    if r == 1:
        return project_coeffs(grid, u)
    up = to_physical(grid, u, padded=True)
    speed2 = up[0] ** 2 + up[1] ** 2
    weight = np.sqrt(speed2) if r == 2 else speed2
    return project_coeffs(grid, to_spectral(grid, weight * up, padded=True))


def damping_prime_coeffs(grid, u, xi, r):
    """P(|u|^(r-1) ξ + (r-1)|u|^(r-3)(u·ξ)u)."""
    if r == 1:
        return project_coeffs(grid, xi)
    up = to_physical(grid, u, padded=True)
    xp = to_physical(grid, xi, padded=True)
    speed2 = up[0] ** 2 + up[1] ** 2
    dot = up[0] * xp[0] + up[1] * xp[1]
    if r == 3:
        product = speed2 * xp + 2.0 * dot * up
    else:
        speed = np.sqrt(speed2)
        inv = np.zeros_like(speed)
        awake = speed >= SPEED_FLOOR
        inv[awake] = 1.0 / speed[awake]
        product = speed * xp + (dot * inv) * up
    return project_coeffs(grid, to_spectral(grid, product, padded=True))


def inner_coeffs(grid, u, v, weight=None):
    """L² Σ_k w(k) Re(u_hat conj v_hat)."""
    prod = np.real(u * np.conj(v))
    if weight is not None:
        prod = prod * weight
    return float(grid.L ** 2 * np.sum(prod))


def lp_coeffs(grid, u, p):
    up = to_physical(grid, u, padded=True)
    speed = np.sqrt(up[0] ** 2 + up[1] ** 2)
    return float(((grid.L / grid.M) ** 2 * np.sum(speed ** p)) ** (1.0 / p))


# --- field-level operators --------------------------------------------------

def apply_A(u):
    """Stokes operator, multiplier |k|²."""
    return SpectralField(u.grid, u.grid.k2 * u.coeffs)


def bilinear_B(u, v):
    """B(u, v) = P((u·∇)v), products on the padded grid."""
    grid = _same_grid(u, v)
    return SpectralField(grid, convection_coeffs(grid, u.coeffs, v.coeffs))


def damping_C(u, r):
    """C(u) = P(|u|^(r-1) u)."""
    _check_r(r)
    return SpectralField(u.grid, damping_coeffs(u.grid, u.coeffs, r))


def damping_C_prime(u, xi, r):
    """
    Derivative of C at u applied to ξ. For r = 2 the (u·ξ)u/|u| term is set
    to 0 where |u| < 1e-14.
    """
    _check_r(r)
    grid = _same_grid(u, xi)
    return SpectralField(grid, damping_prime_coeffs(grid, u.coeffs, xi.coeffs, r))


def inner(u, v):
    """H inner product ⟨u, v⟩."""
    grid = _same_grid(u, v)
    return inner_coeffs(grid, u.coeffs, v.coeffs)


def inner_V(u, v):
    """Gradient inner product (∇u, ∇v)."""
    grid = _same_grid(u, v)
    return inner_coeffs(grid, u.coeffs, v.coeffs, grid.k2)


def shifted_inner(u, v, mu, alpha):
    """⟨⟨u, v⟩⟩ = μ(∇u, ∇v) + (α/2)(u, v)."""
    return mu * inner_V(u, v) + 0.5 * alpha * inner(u, v)


def shifted_norm(u, mu, alpha):
    return float(np.sqrt(shifted_inner(u, u, mu, alpha)))


def norm(u, kind=NORM_H):
    """
    ‖u‖ in H, V (gradient only), V' or Lp.

    H and V are exact spectral sums. V' is ‖A^(-1/2) P u‖_H. Lp uses the
    padded physical quadrature ((L/M)² Σ |u|^p)^(1/p).
    """
    grid = u.grid
    if kind.tag == "H":
        return float(np.sqrt(inner_coeffs(grid, u.coeffs, u.coeffs)))
    if kind.tag == "V":
        return float(np.sqrt(inner_coeffs(grid, u.coeffs, u.coeffs, grid.k2)))
    if kind.tag == "Vdual":
        projected = project_coeffs(grid, u.coeffs)
        return float(np.sqrt(inner_coeffs(grid, projected, projected, grid.inv_k2)))
    return lp_coeffs(grid, u.coeffs, kind.p)


def cbf_rhs(u, params, forcing):
    """F(u) = f - μAu - B(u,u) - αu - βC(u)."""
    grid = _same_grid(u, forcing)
    c = u.coeffs
    rhs = forcing.coeffs - params.mu * grid.k2 * c - convection_coeffs(grid, c, c) - params.alpha * c
    if params.beta:
        rhs = rhs - params.beta * damping_coeffs(grid, c, params.r)
    return SpectralField(grid, rhs)


def tangent_generator(u, xi, params):
    """F'(u)ξ = -μAξ - B(ξ,u) - B(u,ξ) - αξ - βC'(u)ξ."""
    grid = _same_grid(u, xi)
    return SpectralField(grid, tangent_generator_coeffs(grid, u.coeffs, xi.coeffs, params))


def tangent_generator_coeffs(grid, u, xi, params):
    out = (
        -params.mu * grid.k2 * xi
        - convection_coeffs(grid, xi, u)
        - convection_coeffs(grid, u, xi)
        - params.alpha * xi
    )
    if params.beta:
        out = out - params.beta * damping_prime_coeffs(grid, u, xi, params.r)
    return out


# --- inequality diagnostics ---------------------------------------------------

def ladyzhenskaya_ratio(u):
    """‖u‖_L4 / (2^(1/4) ‖u‖_H^(1/2) ‖∇u‖_H^(1/2)); at most 1 when the inequality holds."""
    return norm(u, NormKind.lp(4)) / (2 ** 0.25 * np.sqrt(norm(u) * norm(u, NORM_V)))


def agmon_ratio(u):
    """‖u‖_∞ / (‖u‖_H^(1/2) ‖Au‖_H^(1/2)); the constant is fitted, not asserted."""
    up = u.physical(padded=True)
    sup = float(np.sqrt(up[0] ** 2 + up[1] ** 2).max())
    return sup / np.sqrt(norm(u) * norm(apply_A(u)))


def gagliardo_nirenberg_ratio(u, p):
    """‖u‖_Lp / (‖u‖_H^(2/p) ‖∇u‖_H^(1-2/p))."""
    theta = 2.0 / p
    return norm(u, NormKind.lp(p)) / (norm(u) ** theta * norm(u, NORM_V) ** (1.0 - theta))


def b_bound_ratio(u):
    """‖B(u,u)‖_V' / (√2 λ₁^(-1/4) ‖u‖_V²)."""
    grid = u.grid
    return norm(bilinear_B(u, u), NORM_VDUAL) / (np.sqrt(2.0) * grid.lambda1 ** -0.25 * norm(u, NORM_V) ** 2)


def inequality_table(fields, p=6.0):
    """
    One row per field with the Ladyzhenskaya, Agmon, Gagliardo-Nirenberg and
    B-bound ratios. The column maxima are the empirically fitted constants.
    """
    rows = []
    for u in fields:
        rows.append({
            "ladyzhenskaya": ladyzhenskaya_ratio(u),
            "agmon": agmon_ratio(u),
            f"gagliardo_nirenberg_p{p:g}": gagliardo_nirenberg_ratio(u, p),
            "b_bound": b_bound_ratio(u),
        })
    return pd.DataFrame(rows)
