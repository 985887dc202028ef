"""
Physical parameters of the CBF system and the forcing catalog.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from cbf_operators import NORM_VDUAL, norm
from spectral_field import (
    SpectralField,
    GridMismatchError,
    load_field,
    project_divfree,
    random_divfree_field,
    taylor_green,
    to_spectral,
)

logger = logging.getLogger(__name__)

SUPPORTED_R = (1, 2, 3)
FORCING_KINDS = ("zero", "kolmogorov", "taylor_green", "gaussian_bump", "random", "file", "explicit")


@dataclass(frozen=True)
class ForcingSpec:
    """
    Named forcing field.

    amplitude is the pointwise amplitude for the analytic kinds (kolmogorov,
    taylor_green) and the H norm for gaussian_bump and random. wavenumber is
    the shell of the analytic kinds and the band limit of random. width is the
    Gaussian width as a fraction of L. mask_radius restricts the forcing to
    the disc of that radius around the cell center.
    """

    kind: str = "zero"
    amplitude: float = 1.0
    wavenumber: int = 1
    width: float = 0.08
    seed: int = 0
    path: Optional[str] = None
    mask_radius: Optional[float] = None
    values: Optional[SpectralField] = None

    def __post_init__(self):
        if self.kind not in FORCING_KINDS:
            raise ValueError(f"unknown forcing kind {self.kind!r}; expected one of {FORCING_KINDS}")
        if self.kind == "file" and not self.path:
            raise ValueError("forcing kind 'file' needs a path")
        if self.kind == "explicit" and self.values is None:
            raise ValueError("forcing kind 'explicit' needs values")
        if self.mask_radius is not None and self.mask_radius < 0:
            raise ValueError(f"mask radius must be >= 0, got {self.mask_radius}")


@dataclass(frozen=True)
class PhysParams:
    mu: float
    alpha: float = 0.0
    beta: float = 0.0
    r: int = 1
    forcing: ForcingSpec = ForcingSpec()

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.r not in SUPPORTED_R:
            raise ValueError(f"r = {self.r} is not supported; supported set {{1, 2, 3}}")


def disc_indicator(grid, radius):
    """Sharp indicator of the open disc |x - c| < radius, c the cell center."""
    X, Y = grid.coordinates
    center = grid.L / 2.0
    return ((X - center) ** 2 + (Y - center) ** 2 < radius ** 2).astype(float)


def apply_mask(u, radius):
    """P(u · 1_disc)."""
    grid = u.grid
    masked = u.physical() * disc_indicator(grid, radius)
    return project_divfree(to_spectral(grid, masked), grid)


def _gaussian_bump(grid, width):
    # curl of a Gaussian stream function centered in the cell
    X, Y = grid.coordinates
    center = grid.L / 2.0
    sigma = width * grid.L
    psi = np.exp(-((X - center) ** 2 + (Y - center) ** 2) / (2.0 * sigma ** 2))
    psi_hat = to_spectral(grid, psi)
    coeffs = np.stack([1j * grid.ky * psi_hat, -1j * grid.kx * psi_hat])
    return project_divfree(coeffs, grid)


def realize_forcing(spec, grid):
    """
    Divergence-free forcing field of `spec` on `grid`.
    """
    if spec.kind == "zero":
        f = SpectralField.zeros(grid)
    elif spec.kind == "kolmogorov":
        X, Y = grid.coordinates
        values = np.stack([spec.amplitude * np.sin(spec.wavenumber * grid.k0 * Y), np.zeros_like(Y)])
        f = project_divfree(to_spectral(grid, values), grid)
    elif spec.kind == "taylor_green":
        f = taylor_green(grid, spec.amplitude, spec.wavenumber)
    elif spec.kind == "gaussian_bump":
        shape = _gaussian_bump(grid, spec.width)
        size = grid.L * np.sqrt(np.sum(np.abs(shape.coeffs) ** 2))
        f = shape * (spec.amplitude / size)
    elif spec.kind == "random":
        f = random_divfree_field(grid, spec.seed, amplitude=spec.amplitude, kmax=spec.wavenumber)
    elif spec.kind == "file":
        f = load_field(spec.path, pad_factor=grid.pad_factor)
        if f.grid != grid:
            raise GridMismatchError(f"forcing file {spec.path} holds N={f.grid.N}, L={f.grid.L}")
        f = project_divfree(f)
    else:
        if spec.values.grid != grid:
            raise GridMismatchError("explicit forcing lives on a different grid")
        f = spec.values

    if spec.mask_radius is not None:
        f = apply_mask(f, spec.mask_radius)
    return f


def grashof_number(f_norm_vdual, mu, lambda1):
    """G = ‖f‖_V' / (μ² λ₁^(1/2))."""
    return f_norm_vdual / (mu ** 2 * np.sqrt(lambda1))


def scale_forcing_to_grashof(spec, grid, mu, target):
    """
    Rescale the amplitude of an analytic forcing so that its Grashof number
    equals `target`.
    """
    if spec.kind in ("zero", "file", "explicit"):
        raise ValueError(f"cannot rescale forcing of kind {spec.kind!r} to a Grashof number")
    current = grashof_number(norm(realize_forcing(spec, grid), NORM_VDUAL), mu, grid.lambda1)
    if current == 0:
        raise ValueError("forcing vanishes on this grid; Grashof rescaling is undefined")
    scaled = replace(spec, amplitude=spec.amplitude * target / current)
    logger.info("forcing amplitude rescaled %.6g -> %.6g for G=%.6g", spec.amplitude, scaled.amplitude, target)
    return scaled
