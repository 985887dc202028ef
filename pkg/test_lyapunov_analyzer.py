import logging

import numpy as np
import pytest

from cbf_integrator import StepperConfig, integrate
from cbf_operators import NORM_VDUAL, norm
from cbf_params import ForcingSpec, PhysParams, realize_forcing
from lyapunov_analyzer import (
    DimensionReport,
    TangentEnsemble,
    calibrate_kappa,
    dimension_bounds,
    dimension_report,
    evolve_ensemble_qr,
    exponents,
    ky_dimension,
    projected_dissipation,
    trace_average,
    trace_dimension,
    trace_fractal_bound,
    trace_q_m,
)
from spectral_field import (
    SpectralField,
    lowest_modes,
    make_grid,
    mode_wavenumber_squared,
    random_divfree_field,
    taylor_green,
)

FROZEN = PhysParams(mu=0.01, alpha=0.1, beta=0.5, r=1)
FORCED = PhysParams(mu=0.05, alpha=0.1, beta=0.2, r=3, forcing=ForcingSpec("kolmogorov", amplitude=0.5))
FORCED_CONFIG = StepperConfig(dt=0.005, t_end=2.0)


@pytest.fixture(scope="module")
def grid():
    return make_grid(16)


@pytest.fixture(scope="module")
def frozen_ensemble(grid):
    zero = SpectralField.zeros(grid)
    return evolve_ensemble_qr(zero, FROZEN, 6, 2.0, t_ortho=0.5, config=StepperConfig(dt=0.01, t_end=2.0))


def test_frozen_zero_exponents_match_closed_form(grid, frozen_ensemble):
    expected = -(0.01 * mode_wavenumber_squared(grid, 6) + 0.1 + 0.5)
    assert np.allclose(exponents(frozen_ensemble), np.sort(expected)[::-1], atol=1e-8, rtol=0.0)


def test_exponent_sum_equals_trace_average(frozen_ensemble):
    total = np.sum(exponents(frozen_ensemble))
    assert abs(total - trace_average(frozen_ensemble)[-1]) < 1e-6


@pytest.fixture(scope="module")
def forced_start(grid):
    return random_divfree_field(grid, seed=2)


@pytest.fixture(scope="module")
def forced_ensemble(forced_start):
    return evolve_ensemble_qr(forced_start, FORCED, 3, 2.0, t_ortho=0.1, config=FORCED_CONFIG)


def test_exponent_sum_equals_trace_average_on_a_forced_run(forced_ensemble):
    total = np.sum(exponents(forced_ensemble))
    mean = trace_average(forced_ensemble)[-1]
    assert abs(total - mean) <= 1e-6 * max(1.0, abs(mean))


def test_exponents_do_not_depend_on_the_qr_interval(forced_start, forced_ensemble):
    sparse = evolve_ensemble_qr(forced_start, FORCED, 3, 2.0, t_ortho=0.2, config=FORCED_CONFIG)
    assert sparse.qr_events == forced_ensemble.qr_events // 2
    assert np.allclose(exponents(sparse), exponents(forced_ensemble), atol=1e-8, rtol=0.0)


def test_ensemble_stays_orthonormal(frozen_ensemble):
    assert frozen_ensemble.orthonormality_error() < 1e-10
    assert frozen_ensemble.qr_events == 4
    assert frozen_ensemble.t_accum == pytest.approx(2.0)
    assert len(frozen_ensemble.exponent_history) == 4


def test_trace_numbers_of_the_frozen_state(frozen_ensemble):
    q = trace_q_m(frozen_ensemble)
    assert list(q.columns) == ["t"] + [f"q_{k}" for k in range(1, 7)]
    final = q.iloc[-1, 1:].to_numpy(dtype=float)
    assert np.all(np.diff(final) < 0)
    assert final[0] == pytest.approx(-0.61, abs=1e-10)
    assert trace_dimension(final) == 1


def test_trace_q_m_averages_over_the_second_half():
    times = np.linspace(0.0, 4.0, 41)
    ens = TangentEnsemble(m=2, vectors=[], log_r_sums=np.zeros(2), trace_times=list(times),
                          trace_values=[np.array([1.0 - 0.5 * t, 2.0 - t]) for t in times])
    q = trace_q_m(ens).set_index("t")
    # a linear trace averages to its value at 3t/4
    for t in (2.0, 4.0):
        row = q.loc[q.index[np.argmin(np.abs(q.index - t))]]
        assert row["q_1"] == pytest.approx(1.0 - 0.375 * t, abs=1e-12)
        assert row["q_2"] == pytest.approx(2.0 - 0.75 * t, abs=1e-12)


def test_taylor_green_direction_decays_at_the_exact_rate(grid):
    u0 = 0.5 * taylor_green(grid)
    ens = evolve_ensemble_qr(u0, FROZEN, 1, 1.0, t_ortho=0.25, config=StepperConfig(dt=0.01, t_end=1.0),
                             initial_vectors=[u0 / norm(u0)])
    assert exponents(ens)[0] == pytest.approx(-(2 * 0.01 + 0.1 + 0.5), abs=1e-8)


def test_rank_loss_is_reinitialized(grid, caplog):
    mode = lowest_modes(grid, 1)[0]
    with caplog.at_level(logging.WARNING, logger="lyapunov_analyzer"):
        ens = evolve_ensemble_qr(SpectralField.zeros(grid), FROZEN, 2, 0.1, t_ortho=0.05,
                                 config=StepperConfig(dt=0.01, t_end=0.1), initial_vectors=[mode, mode])
    assert ens.reinit_events and ens.reinit_events[0]["vector"] == 1
    assert "rank loss" in caplog.text
    assert ens.orthonormality_error() < 1e-10


def test_ensemble_size_limits(grid):
    zero = SpectralField.zeros(grid)
    with pytest.raises(ValueError):
        evolve_ensemble_qr(zero, FROZEN, 0, 1.0)
    with pytest.raises(ValueError):
        evolve_ensemble_qr(zero, FROZEN, 65, 1.0)
    with pytest.raises(ValueError):
        evolve_ensemble_qr(zero, FROZEN, 2, 1.0, initial_vectors=lowest_modes(grid, 3))


def test_ky_dimension():
    assert ky_dimension([1.0, -2.0]) == (pytest.approx(1.5), False)
    assert ky_dimension([0.5, 0.1, -0.3, -1.0]) == (pytest.approx(3.3), False)
    assert ky_dimension([0.5, 0.3, -1.0]) == (pytest.approx(2.8), False)
    assert ky_dimension([-1.0, -2.0]) == (0.0, False)
    assert ky_dimension([1.0, 0.5]) == (2.0, True)
    with pytest.raises(ValueError):
        ky_dimension([])
    with pytest.raises(ValueError):
        ky_dimension([-1.0, 1.0])


def test_trace_fractal_bound():
    q = np.array([0.5, -0.1, -1.0])
    assert trace_dimension(q) == 2
    assert trace_fractal_bound(q) == pytest.approx(2 * (1 + 0.5 / 0.1))
    assert trace_dimension([0.1, 0.2]) is None
    assert trace_fractal_bound([0.1, 0.2]) is None


def test_dimension_bounds_grashof_form():
    params = PhysParams(mu=0.2)
    bounds = dimension_bounds(params, f_norm_vdual=0.3, kappa_tilde=2.0, lambda1=1.0)
    g = 0.3 / 0.2 ** 2
    assert bounds["grashof"] == pytest.approx(g)
    assert bounds["reynolds"] == pytest.approx(np.sqrt(g))
    assert bounds["dim_H_bound"] == pytest.approx(bounds["dim_H_grashof"])
    assert bounds["dim_F_bound"] == pytest.approx(bounds["dim_F_grashof"])
    assert bounds["dim_H_grashof"] == pytest.approx(1 + 2.0 * g ** 2)
    assert bounds["flux_bound"] == pytest.approx(0.3 ** 2 / 0.2)
    with pytest.raises(ValueError):
        dimension_bounds(params, 0.3, kappa_tilde=0.0)


def test_calibrated_kappa_makes_both_bounds_hold():
    params = PhysParams(mu=0.1)
    f = 0.05
    kappa = calibrate_kappa(d_ky=7.3, trace_dim=9, params=params, f_norm_vdual=f)
    bounds = dimension_bounds(params, f, kappa)
    assert bounds["dim_F_bound"] >= 7.3
    assert np.ceil(bounds["dim_H_bound"]) >= 9
    smaller = dimension_bounds(params, f, 0.5 * kappa)
    assert smaller["dim_F_bound"] < 7.3 or np.ceil(smaller["dim_H_bound"]) < 9


def test_projected_dissipation_at_rest(grid):
    phis = lowest_modes(grid, 4)
    value = projected_dissipation(SpectralField.zeros(grid), phis, FROZEN)
    assert value == pytest.approx(-4 * (0.01 + 0.1 + 0.5))


def test_dimension_report_of_a_stable_run(grid):
    params = PhysParams(mu=0.1, alpha=0.1, beta=0.5, r=3, forcing=ForcingSpec("taylor_green", amplitude=0.02))
    u0 = 0.1 * taylor_green(grid)
    config = StepperConfig(dt=0.02, t_end=4.0)
    ens = evolve_ensemble_qr(u0, params, 3, 4.0, t_ortho=0.2, config=config)
    _, record = integrate(u0, params, config)
    f_norm = norm(realize_forcing(params.forcing, grid), NORM_VDUAL)
    report = dimension_report(ens, record, params, f_norm_vdual=f_norm)
    assert isinstance(report, DimensionReport)
    assert np.all(report.exponents < 0)
    assert report.d_ky == 0.0
    frame = report.to_frame()
    assert {"d_ky", "lyapunov_1", "q_3", "grashof", "dim_F_bound"} <= set(frame["quantity"])
