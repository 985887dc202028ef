import numpy as np
import pytest

from cbf_operators import (
    NORM_H,
    NORM_V,
    NORM_VDUAL,
    NormKind,
    apply_A,
    bilinear_B,
    cbf_rhs,
    damping_C,
    damping_C_prime,
    inequality_table,
    inner,
    ladyzhenskaya_ratio,
    norm,
    shifted_norm,
    tangent_generator,
)
from cbf_params import PhysParams
from spectral_field import (
    GridMismatchError,
    SpectralField,
    fourier_mode,
    make_grid,
    random_divfree_field,
    taylor_green,
    transform,
)


@pytest.fixture
def grid():
    return make_grid(16)


def shear(grid):
    X, Y = grid.coordinates
    return transform(grid, np.stack([np.sin(Y), np.zeros_like(Y)]))


def test_norms_of_a_single_shear_mode(grid):
    u = shear(grid)
    assert norm(u, NORM_H) ** 2 == pytest.approx(2 * np.pi ** 2, rel=1e-12)
    assert norm(u, NORM_V) ** 2 == pytest.approx(2 * np.pi ** 2, rel=1e-12)
    assert norm(u, NORM_VDUAL) ** 2 == pytest.approx(2 * np.pi ** 2, rel=1e-12)
    assert norm(u, NormKind.lp(2)) == pytest.approx(norm(u), rel=1e-12)
    # ∫ sin⁴ over the cell = 2π · 3π/4
    assert norm(u, NormKind.lp(4)) ** 4 == pytest.approx(1.5 * np.pi ** 2, rel=1e-12)


def test_norm_kind_validation():
    with pytest.raises(ValueError):
        NormKind.lp(1.5)
    with pytest.raises(ValueError):
        NormKind.lp(np.inf)
    with pytest.raises(ValueError):
        NormKind("H", 2.0)
    with pytest.raises(ValueError):
        NormKind("W")


def test_stokes_operator_multiplier(grid):
    mode = fourier_mode(grid, (1, 2), "sin")
    assert np.allclose(apply_A(mode).coeffs, 5.0 * mode.coeffs)
    assert inner(apply_A(mode), mode) == pytest.approx(norm(mode, NORM_V) ** 2, rel=1e-13)


def test_convection_is_skew(grid):
    u = random_divfree_field(grid, seed=1)
    v = random_divfree_field(grid, seed=2)
    assert abs(inner(bilinear_B(u, v), v)) < 1e-12 * norm(u, NORM_V) * norm(v, NORM_V) ** 2


def test_taylor_green_is_steady_for_euler(grid):
    u = taylor_green(grid)
    assert norm(bilinear_B(u, u)) < 1e-13


def test_convection_rejects_mixed_grids(grid):
    with pytest.raises(GridMismatchError):
        bilinear_B(taylor_green(grid), taylor_green(make_grid(32)))


@pytest.mark.parametrize("r", [1, 2, 3])
def test_damping_duality(grid, r):
    u = random_divfree_field(grid, seed=5)
    lr = norm(u, NormKind.lp(r + 1)) ** (r + 1)
    assert inner(damping_C(u, r), u) == pytest.approx(lr, rel=1e-12)


def test_linear_damping_is_identity_on_divergence_free_fields(grid):
    u = random_divfree_field(grid, seed=6)
    assert np.allclose(damping_C(u, 1).coeffs, u.coeffs, atol=1e-15)


@pytest.mark.parametrize("r,tol", [(2, 1e-5), (3, 1e-7)])
def test_damping_derivative_matches_finite_difference(grid, r, tol):
    u = random_divfree_field(grid, seed=7)
    xi = random_divfree_field(grid, seed=8)
    eps = 1e-6
    fd = (damping_C(u + eps * xi, r) - damping_C(u - eps * xi, r)) / (2 * eps)
    exact = damping_C_prime(u, xi, r)
    assert norm(fd - exact) <= tol * norm(exact)


@pytest.mark.parametrize("r", [1, 2, 3])
def test_damping_is_monotone(grid, r):
    u = random_divfree_field(grid, seed=11)
    v = random_divfree_field(grid, seed=12)
    assert inner(damping_C(u, r) - damping_C(v, r), u - v) >= -1e-12


def test_unsupported_exponent_cites_supported_set(grid):
    with pytest.raises(ValueError, match=r"supported set \{1, 2, 3\}"):
        damping_C(taylor_green(grid), 4)


def test_rhs_and_linearization_at_rest(grid):
    params = PhysParams(mu=0.01, alpha=0.1, beta=0.5)
    zero = SpectralField.zeros(grid)
    assert norm(cbf_rhs(zero, params, zero)) == 0.0
    xi = taylor_green(grid)
    expected = -(0.01 * 2.0 + 0.1 + 0.5) * xi
    assert norm(tangent_generator(zero, xi, params) - expected) < 1e-13


def test_shifted_norm(grid):
    u = random_divfree_field(grid, seed=3)
    expected = 0.2 * norm(u, NORM_V) ** 2 + 0.5 * 0.4 * norm(u) ** 2
    assert shifted_norm(u, 0.2, 0.4) ** 2 == pytest.approx(expected, rel=1e-12)


def test_inequality_ratios(grid):
    fields = [random_divfree_field(grid, seed=s) for s in range(4)]
    table = inequality_table(fields)
    assert list(table.columns) == ["ladyzhenskaya", "agmon", "gagliardo_nirenberg_p6", "b_bound"]
    assert len(table) == 4
    assert (table["ladyzhenskaya"] <= 1.0).all()
    assert (table > 0).all().all()
    assert ladyzhenskaya_ratio(shear(grid)) < 1.0
