"""
Spectral representation of zero-mean, divergence-free 2D velocity fields
on the periodic torus [0, L)².

Coefficients are stored as u_hat = DFT(u) / N², so a constant field c maps
to the zero mode with value c. Integrals carry the cell area explicitly:
the H inner product is L² Σ_k Re(u_hat · conj v_hat), which equals the
physical quadrature (L/N)² Σ_x u·v.

Arrays are indexed [component, ix, iy] with x_j = j L / N.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

logger = logging.getLogger(__name__)

CBF1_MAGIC = b"CBF1"
CBF1_HEADER = np.dtype([("magic", "S4"), ("N", "<u4"), ("L", "<f8")])


class GridError(ValueError):
    """Invalid grid configuration."""


class GridMismatchError(ValueError):
    """Two fields (or a field and an array) live on different grids."""


@dataclass(frozen=True)
class GridSpec:
    """
    Resolution N, period L and quadrature padding for nonlinear products.

    Derived tables (wavenumbers, |k|², masks) are computed lazily and are not
    part of equality, so two grids compare equal iff (N, L, pad_factor) match.
    """

    N: int
    L: float = 2.0 * np.pi
    pad_factor: int = 2

    def __post_init__(self):
        if isinstance(self.N, bool) or int(self.N) != self.N:
            raise GridError(f"N must be an integer, got {self.N!r}")
        if self.N < 8 or self.N % 2:
            raise GridError(f"N must be even and >= 8, got {self.N}")
        if not self.L > 0:
            raise GridError(f"L must be positive, got {self.L}")
        if int(self.pad_factor) != self.pad_factor or self.pad_factor < 1:
            raise GridError(f"pad_factor must be an integer >= 1, got {self.pad_factor}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "L", float(self.L))
        object.__setattr__(self, "pad_factor", int(self.pad_factor))

    @property
    def M(self):
        """Points per dimension of the padded quadrature grid."""
        return self.pad_factor * self.N

    @property
    def dx(self):
        return self.L / self.N

    @property
    def k0(self):
        return 2.0 * np.pi / self.L

    @property
    def lambda1(self):
        """Smallest eigenvalue of the Stokes operator, (2π/L)²."""
        return self.k0 ** 2

    @cached_property
    def index(self):
        # integer lattice {-N/2+1, ..., N/2}; numpy puts -N/2 at the Nyquist slot
        n = np.fft.fftfreq(self.N, d=1.0 / self.N)
        n[self.N // 2] = self.N // 2
        return n

    @cached_property
    def nx(self):
        return np.meshgrid(self.index, self.index, indexing="ij")[0]

    @cached_property
    def ny(self):
        return np.meshgrid(self.index, self.index, indexing="ij")[1]

    @cached_property
    def kx(self):
        return self.k0 * self.nx

    @cached_property
    def ky(self):
        return self.k0 * self.ny

    @cached_property
    def k2(self):
        return self.kx ** 2 + self.ky ** 2

    @cached_property
    def inv_k2(self):
        """1/|k|² with the zero mode set to 0."""
        out = np.zeros_like(self.k2)
        nonzero = self.k2 > 0
        out[nonzero] = 1.0 / self.k2[nonzero]
        return out

    @cached_property
    def retained(self):
        """Boolean mask of the modes a field may carry (no Nyquist lines)."""
        half = self.N // 2
        return (np.abs(self.nx) < half) & (np.abs(self.ny) < half)

    @cached_property
    def coordinates(self):
        """Physical grid points (X, Y), each of shape (N, N)."""
        x = np.arange(self.N) * self.dx
        return np.meshgrid(x, x, indexing="ij")

    @cached_property
    def padded_coordinates(self):
        x = np.arange(self.M) * (self.L / self.M)
        return np.meshgrid(x, x, indexing="ij")

    @cached_property
    def _pad_slots(self):
        # positions of the retained integer modes inside the N and M arrays
        half = self.N // 2
        n = np.arange(-half + 1, half)
        return n % self.N, n % self.M

    def shape(self, padded=False):
        size = self.M if padded else self.N
        return (2, size, size)


def make_grid(N, L=2.0 * np.pi, pad_factor=2):
    """
    Build a GridSpec and populate its wavenumber tables.
    """
    grid = GridSpec(N, L, pad_factor)
    # touch the derived tables so later use is read-only
    _ = grid.k2, grid.retained, grid.inv_k2
    logger.debug("grid N=%d L=%.6g pad=%d lambda1=%.6g", grid.N, grid.L, grid.pad_factor, grid.lambda1)
    return grid


def pad_spectrum(grid, coeffs):
    """Zero-pad coefficients (..., N, N) onto the padded (..., M, M) lattice."""
    small, big = grid._pad_slots
    out = np.zeros(coeffs.shape[:-2] + (grid.M, grid.M), dtype=complex)
    out[..., big[:, None], big[None, :]] = coeffs[..., small[:, None], small[None, :]]
    return out


def truncate_spectrum(grid, coeffs):
    """Keep the retained modes of a padded spectrum (Nyquist lines dropped)."""
    small, big = grid._pad_slots
    out = np.zeros(coeffs.shape[:-2] + (grid.N, grid.N), dtype=complex)
    out[..., small[:, None], small[None, :]] = coeffs[..., big[:, None], big[None, :]]
    return out


def to_physical(grid, coeffs, padded=False):
    """Physical samples of a coefficient array (..., N, N)."""
    if padded:
        size = grid.M
        coeffs = pad_spectrum(grid, coeffs)
    else:
        size = grid.N
    return np.real(np.fft.ifft2(coeffs, axes=(-2, -1))) * size ** 2


def to_spectral(grid, values, padded=False):
    """Coefficients (..., N, N) of physical samples on the plain or padded grid."""
    size = grid.M if padded else grid.N
    if values.shape[-2:] != (size, size):
        raise GridMismatchError(
            f"samples of shape {values.shape[-2:]} do not match a {size}x{size} grid"
        )
    coeffs = np.fft.fft2(values, axes=(-2, -1)) / size ** 2
    if padded:
        coeffs = truncate_spectrum(grid, coeffs)
    return coeffs


@dataclass(frozen=True, eq=False)
class SpectralField:
    """
    A two-component real vector field held as Fourier coefficients.

    The coefficient array is copied on construction and made read-only, so
    fields can be shared freely between threads.
    """

    grid: GridSpec
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=complex)
        if coeffs.shape != self.grid.shape():
            raise GridMismatchError(
                f"coefficients of shape {coeffs.shape} do not match grid {self.grid.shape()}"
            )
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.shape(), dtype=complex))

    def _check(self, other):
        if not isinstance(other, SpectralField):
            return NotImplemented
        if other.grid != self.grid:
            raise GridMismatchError(f"grid {other.grid} does not match {self.grid}")
        return other

    def __add__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return SpectralField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        if not np.isscalar(scalar):
            return NotImplemented
        return SpectralField(self.grid, self.coeffs * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if not np.isscalar(scalar):
            return NotImplemented
        return SpectralField(self.grid, self.coeffs / scalar)

    def __neg__(self):
        return SpectralField(self.grid, -self.coeffs)

    def physical(self, padded=False):
        """Physical samples, shape (2, N, N) or (2, M, M)."""
        return to_physical(self.grid, self.coeffs, padded=padded)

    def max_speed(self):
        u = self.physical()
        return float(np.sqrt(u[0] ** 2 + u[1] ** 2).max())

    def divergence_residual(self):
        """max_k |k·u_hat(k)| / max_k |u_hat(k)|."""
        scale = np.abs(self.coeffs).max()
        if scale == 0:
            return 0.0
        div = self.grid.kx * self.coeffs[0] + self.grid.ky * self.coeffs[1]
        kmag = np.sqrt(self.grid.k2).max()
        return float(np.abs(div).max() / (kmag * scale))

    def symmetry_residual(self):
        """max |u_hat(-k) - conj(u_hat(k))|."""
        mirrored = np.roll(np.flip(self.coeffs, axis=(-2, -1)), 1, axis=(-2, -1))
        return float(np.abs(mirrored - np.conj(self.coeffs)).max())

    def check_invariants(self, tol=1e-12):
        """
        Zero mean, conjugate symmetry and divergence-free, each within tol
        relative to the largest coefficient.
        """
        scale = max(float(np.abs(self.coeffs).max()), 1e-300)
        zero_mode = float(np.abs(self.coeffs[:, 0, 0]).max()) / scale
        return (
            zero_mode <= tol
            and self.symmetry_residual() / scale <= tol
            and self.divergence_residual() <= tol
        )


def transform(grid, values, padded=False):
    """
    Physical samples (2, N, N), or (2, M, M) when padded, to a SpectralField.
    No projection is applied.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 3 or values.shape[0] != 2:
        raise GridMismatchError(f"expected samples of shape (2, n, n), got {values.shape}")
    return SpectralField(grid, to_spectral(grid, values, padded=padded))


def project_divfree(f, grid=None):
    """
    Helmholtz-Hodge projection P_hat(k) = I - k kᵀ/|k|², zero mode and
    Nyquist lines removed. Accepts a SpectralField or a raw (2, N, N) array
    together with its grid.
    """
    if isinstance(f, SpectralField):
        grid, coeffs = f.grid, f.coeffs
    else:
        if grid is None:
            raise GridMismatchError("a grid is required to project a raw coefficient array")
        coeffs = np.asarray(f, dtype=complex)
    return SpectralField(grid, project_coeffs(grid, coeffs))


def project_coeffs(grid, coeffs):
    kx, ky = grid.kx, grid.ky
    div = (kx * coeffs[..., 0, :, :] + ky * coeffs[..., 1, :, :]) * grid.inv_k2
    out = np.empty(coeffs.shape, dtype=complex)
    out[..., 0, :, :] = coeffs[..., 0, :, :] - kx * div
    out[..., 1, :, :] = coeffs[..., 1, :, :] - ky * div
    out[..., 0, 0] = 0.0
    out *= grid.retained
    return out


def random_divfree_field(grid, seed, spectrum=2.0, amplitude=1.0, kmax=None):
    """
    Random real divergence-free field with velocity spectrum decaying like
    |k|^(-spectrum), normalized to ‖u‖_H = amplitude.

    The stream function is drawn from a counter-based Philox generator, so
    the same seed gives bitwise-identical coefficients on every platform.
    """
    if amplitude < 0:
        raise ValueError(f"amplitude must be >= 0, got {amplitude}")
    if amplitude == 0:
        return SpectralField.zeros(grid)
    rng = np.random.Generator(np.random.Philox(seed))
    psi = rng.standard_normal((grid.N, grid.N))
    psi_hat = np.fft.fft2(psi) / grid.N ** 2

    nmag = np.sqrt(grid.nx ** 2 + grid.ny ** 2)
    weight = np.zeros_like(nmag)
    nonzero = nmag > 0
    weight[nonzero] = nmag[nonzero] ** (-(spectrum + 1.0))
    if kmax is not None:
        weight[nmag > kmax] = 0.0
    psi_hat = psi_hat * weight

    coeffs = np.stack([1j * grid.ky * psi_hat, -1j * grid.kx * psi_hat])
    coeffs = project_coeffs(grid, coeffs)
    size = grid.L * np.sqrt(np.sum(np.abs(coeffs) ** 2))
    if size == 0:
        raise ValueError("band limit leaves no modes to excite")
    return SpectralField(grid, coeffs * (amplitude / size))


def taylor_green(grid, amplitude=1.0, wavenumber=1):
    """
    (cos kx sin ky, -sin kx cos ky) scaled by amplitude, k = wavenumber·2π/L.
    """
    X, Y = grid.coordinates
    k = wavenumber * grid.k0
    values = np.stack([np.cos(k * X) * np.sin(k * Y), -np.sin(k * X) * np.cos(k * Y)])
    return project_divfree(transform(grid, amplitude * values))


def fourier_mode(grid, n, kind="cos"):
    """
    Real divergence-free mode cos(k·x) k⊥/|k| (or sin) for integer wavevector
    n, normalized to unit H norm.
    """
    nx, ny = int(n[0]), int(n[1])
    if (nx, ny) == (0, 0) or max(abs(nx), abs(ny)) >= grid.N // 2:
        raise ValueError(f"wavevector {n} is not a retained nonzero mode")
    direction = np.array([-ny, nx], dtype=float) / np.hypot(nx, ny)
    coeffs = np.zeros(grid.shape(), dtype=complex)
    plus = (nx % grid.N, ny % grid.N)
    minus = (-nx % grid.N, -ny % grid.N)
    if kind == "cos":
        a, b = 0.5, 0.5
    elif kind == "sin":
        a, b = -0.5j, 0.5j
    else:
        raise ValueError(f"kind must be 'cos' or 'sin', got {kind!r}")
    for comp in range(2):
        coeffs[comp][plus] += a * direction[comp]
        coeffs[comp][minus] += b * direction[comp]
    mode = SpectralField(grid, coeffs)
    return mode / (grid.L * np.sqrt(np.sum(np.abs(coeffs) ** 2)))


def lowest_wavevectors(grid, count):
    """
    (nx, ny, kind) of the `count` lowest divergence-free Fourier modes,
    ordered by |n|², then lexicographically, cosine before sine.
    """
    half = grid.N // 2
    wavevectors = sorted(
        (nx * nx + ny * ny, nx, ny)
        for nx in range(0, half)
        for ny in range(-half + 1, half)
        if nx > 0 or ny > 0
    )
    labels = [(nx, ny, kind) for _, nx, ny in wavevectors for kind in ("cos", "sin")]
    if len(labels) < count:
        raise ValueError(f"grid N={grid.N} has fewer than {count} divergence-free modes")
    return labels[:count]


def lowest_modes(grid, count):
    return [fourier_mode(grid, (nx, ny), kind) for nx, ny, kind in lowest_wavevectors(grid, count)]


def mode_wavenumber_squared(grid, count):
    """|k|² of each of the `count` lowest modes, matching lowest_modes order."""
    return np.array([grid.lambda1 * (nx * nx + ny * ny) for nx, ny, _ in lowest_wavevectors(grid, count)])


def field_to_bytes(u):
    """CBF1 encoding: header then little-endian complex128 coefficients, C order."""
    header = np.array([(CBF1_MAGIC, u.grid.N, u.grid.L)], dtype=CBF1_HEADER)
    return header.tobytes() + np.ascontiguousarray(u.coeffs, dtype="<c16").tobytes()


def field_from_bytes(payload, pad_factor=2):
    if len(payload) < CBF1_HEADER.itemsize:
        raise ValueError("truncated CBF1 payload")
    header = np.frombuffer(payload[:CBF1_HEADER.itemsize], dtype=CBF1_HEADER)[0]
    if bytes(header["magic"]) != CBF1_MAGIC:
        raise ValueError(f"bad magic {bytes(header['magic'])!r}, expected {CBF1_MAGIC!r}")
    grid = GridSpec(int(header["N"]), float(header["L"]), pad_factor)
    body = np.frombuffer(payload[CBF1_HEADER.itemsize:], dtype="<c16")
    if body.size != 2 * grid.N * grid.N:
        raise ValueError(f"expected {2 * grid.N * grid.N} coefficients, found {body.size}")
    return SpectralField(grid, body.reshape(grid.shape()))


def save_field(u, path):
    with open(path, "wb") as f:
        f.write(field_to_bytes(u))


def load_field(path, pad_factor=2):
    with open(path, "rb") as f:
        return field_from_bytes(f.read(), pad_factor=pad_factor)
