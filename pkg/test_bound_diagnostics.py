import logging

import numpy as np
import pytest

from bound_diagnostics import (
    REPORT_COLUMNS,
    BoundReport,
    absorbing_ball_check,
    absorbing_ball_radius,
    absorbing_entry_time,
    absorbing_radius_from_norm,
    alpha_gronwall_check,
    dissipation_flux_check,
    energy_audit_richardson,
    fit_loglog_slope,
    frechet_remainder_check,
    frechet_theta_bound,
    gronwall_envelope_check,
    gronwall_step_flags,
    limsup_energy_check,
    lipschitz_pair_check,
    operator_identity_reports,
    shifted_norm_check,
    time_average_dissipation,
    trend_slope,
    window_dissipation_check,
)
from cbf_integrator import RunRecord, StepperConfig, integrate
from cbf_operators import NORM_VDUAL, norm
from cbf_params import ForcingSpec, PhysParams, realize_forcing
from spectral_field import SpectralField, lowest_modes, make_grid, random_divfree_field, taylor_green

FORCED = PhysParams(mu=0.5, alpha=0.1, beta=0.2, r=3, forcing=ForcingSpec("kolmogorov", amplitude=0.5))


@pytest.fixture(scope="module")
def grid():
    return make_grid(16)


@pytest.fixture(scope="module")
def forced_record(grid):
    m1, _ = absorbing_ball_radius(FORCED, grid)
    u0 = random_divfree_field(grid, seed=21, amplitude=3.0 * m1, kmax=4)
    _, record = integrate(u0, FORCED, StepperConfig(dt=0.05, t_end=30.0, record_every=10))
    return record


def test_bound_report_fields():
    ok = BoundReport("x", 1.0, 2.0, "anchor", 0.0)
    assert ok.passed and ok.margin == 1.0
    assert BoundReport("x", 2.0, 1.0).passed is False
    assert BoundReport("x", 1.0 + 1e-9, 1.0, tolerance=1e-8).passed
    assert BoundReport("x", float("nan"), 1.0).passed is False
    assert list(ok.to_row()) == list(REPORT_COLUMNS)
    assert ok.summary_line().startswith("[PASS] x")


def test_slope_fits():
    x = np.array([0.1, 0.05, 0.025])
    assert fit_loglog_slope(x, 3.0 * x ** 2) == pytest.approx(2.0)
    assert trend_slope([4.0, 3.0, 2.0, 1.0]) == pytest.approx(-1.0)


def test_absorbing_radius_formula():
    m1, m1_alpha = absorbing_radius_from_norm(mu=0.5, lambda1=2.0, f_norm_vdual=3.0, alpha=0.25)
    assert m1 == pytest.approx(3.0 / 0.5)
    assert m1_alpha == pytest.approx(np.sqrt(2.0 / 0.125) * 3.0)
    assert absorbing_radius_from_norm(1.0, 1.0, 1.0)[1] == np.inf


def test_energy_bounds_hold_on_a_forced_run(forced_record):
    for report in (
        gronwall_envelope_check(forced_record),
        gronwall_step_flags(forced_record),
        alpha_gronwall_check(forced_record),
        time_average_dissipation(forced_record),
        window_dissipation_check(forced_record, theta=1.0),
        dissipation_flux_check(forced_record),
        limsup_energy_check(forced_record),
        absorbing_ball_check(forced_record),
    ):
        assert report.passed, report.summary_line()


def test_absorbing_entry_time(forced_record):
    meta = forced_record.meta
    radius = min(absorbing_radius_from_norm(meta["mu"], meta["lambda1"], meta["f_vdual"], meta["alpha"]))
    t_b = absorbing_entry_time(forced_record, radius)
    assert t_b is not None and 0.0 < t_b < 30.0
    assert absorbing_entry_time(forced_record, 0.0) is None


def test_alpha_envelope_needs_darcy_damping(grid):
    _, record = integrate(taylor_green(grid), PhysParams(mu=0.1), StepperConfig(dt=0.05, t_end=0.5))
    with pytest.raises(ValueError):
        alpha_gronwall_check(record)


def test_time_average_dissipation_rejects_empty_record():
    empty = RunRecord.empty({"mu": 1.0, "h0": 0.0, "f_vdual": 0.0})
    with pytest.raises(ValueError):
        time_average_dissipation(empty)


def test_energy_audit_is_third_order(grid):
    params = PhysParams(mu=0.1, alpha=0.05, forcing=ForcingSpec("kolmogorov"))
    u0 = random_divfree_field(grid, seed=2, kmax=3)
    report, residuals, records = energy_audit_richardson(u0, params, StepperConfig(dt=0.02, t_end=1.0), levels=3)
    assert report.passed, report.summary_line()
    assert len(residuals) == 3 and residuals[0] > residuals[1] > residuals[2]
    assert [r.meta["dt"] for r in records] == pytest.approx([0.02, 0.01, 0.005])


@pytest.mark.parametrize("sharp", [False, True])
def test_lipschitz_pair(grid, sharp):
    u0 = random_divfree_field(grid, seed=3)
    v0 = u0 + random_divfree_field(grid, seed=4, amplitude=1e-3)
    report = lipschitz_pair_check(u0, v0, FORCED, 2.0, StepperConfig(dt=0.02, t_end=2.0), sharp=sharp)
    assert report.passed, report.summary_line()
    # t=0, where gap and bound coincide, is not a candidate
    assert report.margin > 0
    tightest = float(report.note.split(",")[0].split("=")[1])
    assert 0.0 < tightest <= 2.0


def test_lipschitz_pair_needs_a_step(grid):
    u0 = random_divfree_field(grid, seed=3)
    with pytest.raises(ValueError):
        lipschitz_pair_check(u0, 2.0 * u0, FORCED, 0.0, StepperConfig(dt=0.02, t_end=0.0))


@pytest.mark.parametrize("r", [1, 2, 3])
def test_frechet_remainder_is_quadratic(grid, r):
    params = PhysParams(mu=0.05, alpha=0.05, beta=0.3, r=r, forcing=ForcingSpec("kolmogorov", amplitude=0.5))
    u0 = random_divfree_field(grid, seed=5)
    xi0 = random_divfree_field(grid, seed=6)
    eps = [1e-2, 5e-3, 2.5e-3, 1.25e-3]
    report, remainders = frechet_remainder_check(u0, xi0, params, 0.5, eps, StepperConfig(dt=0.02, t_end=0.5))
    assert report.passed, report.summary_line()
    assert np.all(np.diff(remainders) < 0)


def test_frechet_slope_ignores_direction_scale(grid):
    params = PhysParams(mu=0.05, alpha=0.05, beta=0.3, r=3, forcing=ForcingSpec("kolmogorov", amplitude=0.5))
    u0 = random_divfree_field(grid, seed=5)
    xi0 = random_divfree_field(grid, seed=6)
    eps = [1e-2, 5e-3, 2.5e-3, 1.25e-3]
    config = StepperConfig(dt=0.02, t_end=0.5)
    unit, unit_rem = frechet_remainder_check(u0, xi0, params, 0.5, eps, config)
    double, double_rem = frechet_remainder_check(u0, 2.0 * xi0, params, 0.5, eps, config)
    assert unit.passed and double.passed, (unit.summary_line(), double.summary_line())
    assert fit_loglog_slope(eps, double_rem) == pytest.approx(fit_loglog_slope(eps, unit_rem), abs=0.05)
    # doubling the direction quadruples the quadratic remainder
    assert double_rem[-1] / unit_rem[-1] == pytest.approx(4.0, rel=0.05)


def test_frechet_linear_regime(grid):
    params = PhysParams(mu=0.01, alpha=0.1, beta=0.5, r=1)
    zero = SpectralField.zeros(grid)
    report, _ = frechet_remainder_check(zero, taylor_green(grid), params, 0.5, [1e-2, 1e-3],
                                        StepperConfig(dt=0.02, t_end=0.5))
    assert report.passed
    assert "linear regime" in report.note


def test_frechet_theta_bound(grid):
    params = PhysParams(mu=0.2, alpha=0.1, beta=0.5, r=3)
    u0 = random_divfree_field(grid, seed=7, amplitude=0.5)
    v0 = u0 + random_divfree_field(grid, seed=8, amplitude=1e-2)
    report = frechet_theta_bound(u0, v0, params, 0.5, StepperConfig(dt=0.02, t_end=0.5))
    assert report.passed
    with pytest.raises(ValueError):
        frechet_theta_bound(u0, v0, PhysParams(mu=0.2, r=1), 0.5)


def test_frechet_theta_overflow_is_flagged(grid, caplog):
    params = PhysParams(mu=0.01, alpha=0.1, beta=0.5, r=3)
    u0 = random_divfree_field(grid, seed=7, amplitude=0.5)
    v0 = u0 + random_divfree_field(grid, seed=8, amplitude=1e-2)
    with caplog.at_level(logging.WARNING, logger="bound_diagnostics"):
        report = frechet_theta_bound(u0, v0, params, 0.1, StepperConfig(dt=0.01, t_end=0.1))
    assert np.isinf(report.right)
    assert report.note.startswith("vacuous")
    assert "vacuous" in caplog.text


@pytest.mark.parametrize("r", [1, 2, 3])
def test_operator_identities(grid, r):
    reports = operator_identity_reports(grid, PhysParams(mu=0.1, beta=0.5, r=r), count=10, seed=3)
    assert len(reports) == 10
    failed = [report.summary_line() for report in reports if not report.passed]
    assert not failed


def test_forcing_norm_matches_metadata(grid, forced_record):
    f = realize_forcing(FORCED.forcing, grid)
    assert forced_record.meta["f_vdual"] == pytest.approx(norm(f, NORM_VDUAL))


def test_shifted_norm_coercivity(grid):
    params = PhysParams(mu=0.2, alpha=0.4)
    report = shifted_norm_check(random_divfree_field(grid, seed=9), params)
    assert report.passed and report.margin > 0
    # the lowest shell attains the Poincaré constant
    tight = shifted_norm_check(lowest_modes(grid, 1)[0], params)
    assert tight.passed
    assert tight.margin == pytest.approx(0.0, abs=1e-12)
