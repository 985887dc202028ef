import numpy as np
import pytest

from cbf_operators import norm
from spectral_field import (
    GridError,
    GridMismatchError,
    SpectralField,
    field_from_bytes,
    field_to_bytes,
    fourier_mode,
    load_field,
    lowest_wavevectors,
    make_grid,
    mode_wavenumber_squared,
    project_divfree,
    random_divfree_field,
    save_field,
    taylor_green,
    to_spectral,
    transform,
)


@pytest.fixture
def grid():
    return make_grid(16)


@pytest.mark.parametrize("N", [7, 6, 0, 15])
def test_make_grid_rejects_bad_resolution(N):
    with pytest.raises(GridError):
        make_grid(N)


def test_make_grid_rejects_bad_period_and_padding():
    with pytest.raises(GridError):
        make_grid(16, L=0.0)
    with pytest.raises(GridError):
        make_grid(16, pad_factor=0)


def test_grid_constants():
    grid = make_grid(32, L=np.pi)
    assert grid.M == 64
    assert grid.lambda1 == pytest.approx(4.0)
    assert make_grid(16) == make_grid(16)
    assert make_grid(16) != make_grid(16, pad_factor=3)


def test_constant_maps_to_zero_mode(grid):
    values = np.full((2, 16, 16), 3.0)
    u = transform(grid, values)
    assert u.coeffs[0, 0, 0] == pytest.approx(3.0)
    assert np.abs(u.coeffs[:, 1:, :]).max() < 1e-14


def test_transform_round_trip_of_smooth_field(grid):
    X, Y = grid.coordinates
    values = np.stack([np.sin(Y) + 0.5 * np.cos(2 * X), np.cos(3 * X) * np.sin(Y)])
    u = transform(grid, values)
    assert np.allclose(u.physical(), values, atol=1e-13)
    padded = u.physical(padded=True)
    Xp, Yp = grid.padded_coordinates
    assert np.allclose(padded[0], np.sin(Yp) + 0.5 * np.cos(2 * Xp), atol=1e-13)


def test_to_spectral_rejects_wrong_shape(grid):
    with pytest.raises(GridMismatchError):
        to_spectral(grid, np.zeros((2, 8, 8)))


def test_projection_removes_gradients(grid):
    X, Y = grid.coordinates
    # ∇(cos x sin 2y)
    grad = np.stack([-np.sin(X) * np.sin(2 * Y), 2 * np.cos(X) * np.cos(2 * Y)])
    projected = project_divfree(transform(grid, grad))
    assert np.abs(projected.coeffs).max() < 1e-14


def test_projection_is_idempotent_and_divergence_free(grid):
    rng = np.random.Generator(np.random.Philox(1))
    raw = transform(grid, rng.standard_normal((2, 16, 16)))
    once = project_divfree(raw)
    twice = project_divfree(once)
    assert once.divergence_residual() < 1e-14
    assert np.abs(once.coeffs - twice.coeffs).max() < 1e-15
    assert once.check_invariants(1e-12)


def test_projection_of_raw_array_needs_grid(grid):
    with pytest.raises(GridMismatchError):
        project_divfree(np.zeros((2, 16, 16)))


def test_random_field_is_deterministic_and_normalized(grid):
    a = random_divfree_field(grid, seed=42, amplitude=2.5)
    b = random_divfree_field(grid, seed=42, amplitude=2.5)
    c = random_divfree_field(grid, seed=43, amplitude=2.5)
    assert np.array_equal(a.coeffs, b.coeffs)
    assert not np.array_equal(a.coeffs, c.coeffs)
    assert norm(a) == pytest.approx(2.5, rel=1e-12)
    assert a.check_invariants(1e-12)


def test_random_field_band_limit(grid):
    u = random_divfree_field(grid, seed=0, kmax=2)
    excited = np.abs(u.coeffs).max(axis=0) > 0
    assert np.all(grid.nx[excited] ** 2 + grid.ny[excited] ** 2 <= 4)
    assert not random_divfree_field(grid, seed=0, amplitude=0.0).coeffs.any()


def test_taylor_green_norm(grid):
    u = taylor_green(grid)
    assert norm(u) ** 2 == pytest.approx(2 * np.pi ** 2, rel=1e-12)
    assert u.check_invariants(1e-12)


def test_lowest_modes_order_and_normalization(grid):
    labels = lowest_wavevectors(grid, 6)
    assert labels[:4] == [(0, 1, "cos"), (0, 1, "sin"), (1, 0, "cos"), (1, 0, "sin")]
    assert list(mode_wavenumber_squared(grid, 6)) == [1.0, 1.0, 1.0, 1.0, 2.0, 2.0]
    for nx, ny, kind in labels:
        mode = fourier_mode(grid, (nx, ny), kind)
        assert norm(mode) == pytest.approx(1.0, rel=1e-12)
        assert mode.check_invariants(1e-12)


def test_fourier_mode_rejects_nyquist(grid):
    with pytest.raises(ValueError):
        fourier_mode(grid, (8, 0))
    with pytest.raises(ValueError):
        fourier_mode(grid, (0, 0))


def test_field_arithmetic_and_grid_mismatch(grid):
    u = taylor_green(grid)
    assert np.allclose((2.0 * u - u).coeffs, u.coeffs)
    assert np.allclose((u / 2.0 + u / 2.0).coeffs, u.coeffs)
    other = taylor_green(make_grid(32))
    with pytest.raises(GridMismatchError):
        u + other


def test_coefficients_are_read_only(grid):
    u = taylor_green(grid)
    with pytest.raises(ValueError):
        u.coeffs[0, 1, 1] = 1.0


def test_cbf1_round_trip(tmp_path, grid):
    u = random_divfree_field(grid, seed=9)
    path = tmp_path / "u.cbf"
    save_field(u, path)
    loaded = load_field(path)
    assert loaded.grid == grid
    assert np.array_equal(loaded.coeffs, u.coeffs)
    payload = path.read_bytes()
    assert payload[:4] == b"CBF1"
    assert len(payload) == 4 + 4 + 8 + 16 * 2 * 16 * 16


def test_cbf1_rejects_bad_payloads(grid):
    payload = field_to_bytes(taylor_green(grid))
    with pytest.raises(ValueError):
        field_from_bytes(b"XXXX" + payload[4:])
    with pytest.raises(ValueError):
        field_from_bytes(payload[:-16])
    with pytest.raises(ValueError):
        field_from_bytes(payload[:10])


def test_zeros_field(grid):
    z = SpectralField.zeros(grid)
    assert norm(z) == 0.0
    assert z.divergence_residual() == 0.0
