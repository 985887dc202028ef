"""
Experiment runners behind the `cbf` command.

run_command() dispatches on the experiment name, prints a phase-by-phase
console trace, writes every artifact through output_writer and returns the
exit status (0 iff no bound report failed) with the written paths.
"""

import logging
import math
import os
from dataclasses import replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from bound_diagnostics import (
    BoundReport,
    absorbing_ball_check,
    absorbing_ball_radius,
    absorbing_entry_time,
    alpha_gronwall_check,
    dissipation_flux_check,
    energy_audit_richardson,
    frechet_remainder_check,
    frechet_theta_bound,
    gronwall_envelope_check,
    gronwall_step_flags,
    limsup_energy_check,
    lipschitz_pair_check,
    operator_identity_reports,
    shifted_norm_check,
    time_average_dissipation,
    window_dissipation_check,
)
from cbf_integrator import integrate
from cbf_operators import NORM_H, NORM_VDUAL, inequality_table, norm, shifted_norm
from cbf_params import realize_forcing, scale_forcing_to_grashof
from expanding_domains import cutoff_chi, run_semicontinuity_ladder
from lyapunov_analyzer import (
    calibrate_kappa,
    dimension_report,
    evolve_ensemble_qr,
    projected_dissipation,
    trace_average,
    trace_q_m,
)
from output_writer import write_outputs
from spectral_field import SpectralField, load_field, random_divfree_field, taylor_green

logger = logging.getLogger(__name__)

# default ladder radii as fractions of L; the largest keeps χ at R/2 inside the cell
LADDER_FRACTIONS = (0.1, 0.2, 0.3, 0.4)
EXPONENT_SUM_TOLERANCE = 1e-6
PROJECTED_TRACE_TOLERANCE = 1e-8
CUTOFF_GRADIENT_BOUND = 12.0
CUTOFF_GRID_SLACK = 0.5


def _banner(text):
    print(f"\n{'=' * 80}")
    print(text)
    print(f"{'=' * 80}\n")


def _phase(number, title):
    print(f"{number}. {title}")
    print("-" * 40)


def resolve_params(config):
    """Physical parameters with the forcing rescaled to the configured Grashof number, if any."""
    params = config.params
    if config.grashof is not None:
        forcing = scale_forcing_to_grashof(params.forcing, config.grid, params.mu, config.grashof)
        params = replace(params, forcing=forcing)
    return params


def initial_field(config, grid, seed):
    settings = config.experiment
    if settings.init == "zero":
        return SpectralField.zeros(grid)
    if settings.init == "taylor_green":
        return taylor_green(grid, settings.init_amplitude)
    if settings.init == "file":
        u0 = load_field(settings.init_path, pad_factor=grid.pad_factor)
        if u0.grid != grid:
            raise ValueError(f"initial field {settings.init_path} holds N={u0.grid.N}, expected {grid.N}")
        return u0
    return random_divfree_field(grid, seed, settings.init_spectrum, settings.init_amplitude, settings.init_kmax)


def _energy_reports(record, params, theta=None):
    reports = [
        gronwall_envelope_check(record),
        gronwall_step_flags(record),
        time_average_dissipation(record, params),
    ]
    if params.alpha > 0:
        reports.append(alpha_gronwall_check(record))
    if theta is not None and record.t_end >= theta:
        reports.append(window_dissipation_check(record, theta))
    return reports


def _meta_summary(record, prefix=""):
    return {f"{prefix}{key}": float(value) for key, value in sorted(record.meta.items())}


# --- experiments ------------------------------------------------------------------

def run_simulate(config, context):
    grid, params, forcing, u0 = context["grid"], context["params"], context["forcing"], context["u0"]
    _phase(2, "Integration Phase")
    u, record = integrate(u0, params, config.stepper, forcing=forcing, progress=context["progress"])
    print(f"Integrated to t={record.t_end:.6g} in {int(record.column('step')[-1])} steps\n")

    _phase(3, "Bound Check Phase")
    reports = _energy_reports(record, params, config.experiment.theta)
    summary = _meta_summary(record)
    summary.update({"final_norm_H": norm(u), "final_divergence": u.divergence_residual()})
    return dict(records={"run": record}, reports=reports, summary=summary, fields={"initial": u0, "final": u})


def run_energy_audit(config, context):
    params, forcing, u0 = context["params"], context["forcing"], context["u0"]
    levels = config.experiment.audit_levels
    _phase(2, "Energy Audit Phase")
    report, residuals, records = energy_audit_richardson(u0, params, config.stepper, levels, forcing)
    for record, residual in zip(records, residuals):
        print(f"dt={record.meta['dt']:.6g}: max step residual {residual:.6g}")
    print()

    _phase(3, "Bound Check Phase")
    finest = records[-1]
    reports = [report] + _energy_reports(finest, params, config.experiment.theta)
    summary = {f"max_step_residual_{level}": float(r) for level, r in enumerate(residuals)}
    summary.update({f"dt_{level}": float(rec.meta["dt"]) for level, rec in enumerate(records)})
    summary.update(_meta_summary(finest))
    return dict(records={f"level{level}": rec for level, rec in enumerate(records)},
                reports=reports, summary=summary)


def _absorbing_trial(u0, params, stepper, forcing):
    _, record = integrate(u0, params, stepper, forcing=forcing)
    return record


def run_absorbing(config, context):
    grid, params, forcing, seed = context["grid"], context["params"], context["forcing"], context["seed"]
    settings = config.experiment
    m1, m1_alpha = absorbing_ball_radius(params, grid, forcing)
    radius = min(m1, m1_alpha)
    top = settings.radius_factor * radius if radius > 0 else settings.init_amplitude
    amplitudes = np.linspace(top / settings.trials, top, settings.trials)
    starts = [random_divfree_field(grid, seed + i, settings.init_spectrum, a, settings.init_kmax)
              for i, a in enumerate(amplitudes)]

    _phase(2, "Initial Condition Sweep Phase")
    print(f"Absorbing radius M1={m1:.6g} (Darcy-driven {m1_alpha:.6g}); {settings.trials} trials up to {top:.6g}")
    records = Parallel(n_jobs=context["n_jobs"], prefer="threads")(
        delayed(_absorbing_trial)(u0, params, config.stepper, forcing)
        for u0 in tqdm(starts, disable=not context["progress"], desc="Trials")
    )
    print()

    _phase(3, "Bound Check Phase")
    reports, rows = [], []
    for i, record in enumerate(records):
        trial = [gronwall_envelope_check(record), gronwall_step_flags(record), absorbing_ball_check(record)]
        if params.alpha > 0:
            trial.append(alpha_gronwall_check(record))
        reports.extend(replace(r, note=f"trial {i}: {r.note}") for r in trial)
        t_b = absorbing_entry_time(record, radius)
        rows.append({"trial": i, "h0": record.meta["h0"], "entry_time": np.nan if t_b is None else t_b,
                     "final_norm_H": record.column("norm_H")[-1]})
    table = pd.DataFrame(rows, columns=["trial", "h0", "entry_time", "final_norm_H"])
    summary = {"M1": m1, "M1_alpha": m1_alpha, "max_entry_time": float(table["entry_time"].max())}
    return dict(records={f"trial{i:02d}": rec for i, rec in enumerate(records)}, reports=reports,
                summary=summary, tables={"absorbing_trials": table})


def run_frechet(config, context):
    grid, params, forcing, u0, seed = (context[k] for k in ("grid", "params", "forcing", "u0", "seed"))
    settings = config.experiment
    horizon = config.stepper.t_end
    xi0 = random_divfree_field(grid, seed + 1, settings.init_spectrum, 1.0, settings.init_kmax)
    v0 = u0 + settings.pair_distance * xi0
    r_values = settings.r_values or (params.r,)

    reports, rows = [], []
    for number, r in enumerate(r_values, start=2):
        _phase(number, f"Differentiability Phase (r={r})")
        member = replace(params, r=r)
        report, remainders = frechet_remainder_check(u0, xi0, member, horizon, settings.eps_ladder,
                                                     config.stepper, forcing)
        reports.append(replace(report, note=f"r={r}: {report.note}"))
        rows.extend({"r": r, "eps": eps, "remainder": rem} for eps, rem in zip(settings.eps_ladder, remainders))
        for sharp in (False, True):
            pair = lipschitz_pair_check(u0, v0, member, horizon, config.stepper, forcing, sharp=sharp)
            reports.append(replace(pair, note=f"r={r}: {pair.note}"))
        if r == 3 and member.beta > 0:
            reports.append(frechet_theta_bound(u0, v0, member, horizon, config.stepper, forcing))
        print(report.summary_line())
        print()

    table = pd.DataFrame(rows, columns=["r", "eps", "remainder"])
    summary = {"horizon": horizon, "pair_distance": settings.pair_distance, "xi_norm_H": norm(xi0)}
    return dict(records={}, reports=reports, summary=summary, tables={"frechet_remainders": table})


def run_lyapunov(config, context):
    grid, params, forcing, u0, seed = (context[k] for k in ("grid", "params", "forcing", "u0", "seed"))
    settings = config.experiment
    horizon = config.stepper.t_end

    _phase(2, "Tangent Ensemble Phase")
    ensemble = evolve_ensemble_qr(u0, params, settings.ensemble_size, horizon, settings.t_ortho,
                                  config.stepper, forcing=forcing, seed=seed, progress=context["progress"])
    _, record = integrate(u0, params, config.stepper, forcing=forcing)
    print(f"{ensemble.qr_events} QR events, {len(ensemble.reinit_events)} reinitializations\n")

    _phase(3, "Dimension Estimate Phase")
    f_vdual = norm(forcing, NORM_VDUAL)
    report = dimension_report(ensemble, record, params, f_vdual, config.kappa_tilde, grid.lambda1)
    exponent_sum = float(np.sum(report.exponents))
    trace_mean = float(trace_average(ensemble)[-1])
    print(f"Kaplan-Yorke dimension {report.d_ky:.6g}; exponent sum {exponent_sum:.6g}\n")

    bounds = report.bounds
    reports = [
        BoundReport("exponent_sum_identity", abs(exponent_sum - trace_mean), 0.0,
                    "exponent sum equals time-averaged trace",
                    EXPONENT_SUM_TOLERANCE * max(1.0, abs(trace_mean)), f"trace mean {trace_mean:.6g}"),
        BoundReport("ensemble_orthonormality", ensemble.orthonormality_error(), 0.0,
                    "orthonormal tangent basis after QR", 1e-10),
        BoundReport("kaplan_yorke_dimension", report.d_ky, bounds["dim_F_bound"],
                    "fractal dimension bound", 0.0, f"kappa_tilde={config.kappa_tilde:g}"),
    ]
    if report.trace_dimension is not None:
        reports.append(BoundReport("trace_dimension", report.trace_dimension, math.ceil(bounds["dim_H_bound"]),
                                   "Hausdorff dimension bound", 0.0, f"kappa_tilde={config.kappa_tilde:g}"))
    if record.t_end > 0:
        reports.append(dissipation_flux_check(record))

    # the final QR keeps the span, so both traces cover the same subspace
    trace_final = float(ensemble.trace_values[-1][-1])
    projected = projected_dissipation(ensemble.base, ensemble.vectors, params)
    reports.append(BoundReport("projected_dissipation", trace_final, projected,
                               "trace without the radial part of C'",
                               PROJECTED_TRACE_TOLERANCE * max(1.0, abs(projected)), f"m={ensemble.m}"))
    try:
        kappa = calibrate_kappa(report.d_ky, report.trace_dimension, params, f_vdual, grid.lambda1)
    except ValueError as exc:
        logger.warning("kappa_tilde not calibrated: %s", exc)
        kappa = float("nan")
    print(f"Smallest kappa_tilde consistent with the estimates: {kappa:.6g}\n")

    history = pd.DataFrame(np.vstack(ensemble.exponent_history),
                           columns=[f"lambda_{i + 1}" for i in range(ensemble.m)])
    history.insert(0, "qr_event", np.arange(1, len(history) + 1))
    summary = report.to_frame()
    summary = pd.concat([summary, pd.DataFrame([
        {"quantity": "exponent_sum", "value": exponent_sum},
        {"quantity": "trace_average", "value": trace_mean},
        {"quantity": "trace_final", "value": trace_final},
        {"quantity": "projected_dissipation_final", "value": projected},
        {"quantity": "kappa_tilde", "value": config.kappa_tilde},
        {"quantity": "kappa_tilde_calibrated", "value": kappa},
    ])], ignore_index=True)
    return dict(records={"base": record}, reports=reports, summary=summary,
                tables={"lyapunov_q_m": trace_q_m(ensemble, record), "lyapunov_convergence": history},
                fields={"initial": u0, "final": ensemble.base})


def run_semicontinuity(config, context):
    grid, params, u0, seed = context["grid"], context["params"], context["u0"], context["seed"]
    settings = config.experiment
    radii = settings.ladder_radii or tuple(f * grid.L for f in LADDER_FRACTIONS)

    _phase(2, "Subdomain Ladder Phase")
    print(f"Radii {', '.join(f'{R:.4g}' for R in radii)}; {settings.snapshots} snapshots after t={settings.transient:g}")
    table, reports = run_semicontinuity_ladder(params, grid, radii, u0, settings.transient, settings.snapshots,
                                               settings.spacing, config.stepper, seed, settings.epsilon,
                                               context["n_jobs"])
    print()

    _phase(3, "Cutoff Check Phase")
    chi = cutoff_chi(grid, radii[0] / 2.0)
    reports.append(BoundReport("cutoff_gradient", chi.max_gradient() * chi.R, CUTOFF_GRADIENT_BOUND,
                               "cutoff gradient bound", CUTOFF_GRID_SLACK, f"R={chi.R:.6g}"))
    summary = {f"semidistance_{int(row.m)}": float(row.semidistance) for row in table.itertuples()}
    summary["epsilon"] = settings.epsilon
    return dict(records={}, reports=reports, summary=summary, tables={"ladder": table})


def run_verify(config, context):
    grid, params, forcing, u0, seed = (context[k] for k in ("grid", "params", "forcing", "u0", "seed"))
    settings = config.experiment
    reports = []
    number = 2
    for r in settings.r_values or (params.r,):
        _phase(number, f"Operator Identity Phase (r={r})")
        reports.extend(operator_identity_reports(grid, replace(params, r=r), settings.verify_samples, seed))
        print(f"{settings.verify_samples} random fields checked\n")
        number += 1

    _phase(number, "Trajectory Bound Phase")
    u, record = integrate(u0, params, config.stepper, forcing=forcing, progress=context["progress"])
    reports.extend(_energy_reports(record, params, settings.theta))
    reports.append(shifted_norm_check(u, params))
    if record.t_end > 0 and len(record) > 2:
        reports.append(limsup_energy_check(record))
    radius = grid.L / 8.0
    chi = cutoff_chi(grid, radius)
    reports.append(BoundReport("cutoff_gradient", chi.max_gradient() * radius, CUTOFF_GRADIENT_BOUND,
                               "cutoff gradient bound", CUTOFF_GRID_SLACK, f"R={radius:.6g}"))
    reports.append(BoundReport("cutoff_invariants", 0.0 if chi.check_invariants(grid) else 1.0, 0.0,
                               "cutoff support and range", 0.0, f"R={radius:.6g}"))
    print()

    samples = [random_divfree_field(grid, seed + 10007 + i, settings.init_spectrum, 1.0) for i in range(8)]
    summary = _meta_summary(record)
    summary["final_norm_H"] = norm(u, NORM_H)
    summary["final_shifted_norm"] = shifted_norm(u, params.mu, params.alpha)
    return dict(records={"run": record}, reports=reports, summary=summary,
                tables={"inequality_ratios": inequality_table(samples)})


RUNNERS = {
    "simulate": run_simulate,
    "energy-audit": run_energy_audit,
    "absorbing": run_absorbing,
    "frechet": run_frechet,
    "lyapunov": run_lyapunov,
    "semicontinuity": run_semicontinuity,
    "verify": run_verify,
}


def run_command(config, n_jobs=1, progress=False):
    """
    Run the configured experiment and write its artifacts.
    Returns (exit status, list of written paths); status is 1 when any
    bound report fails and 0 otherwise.
    """
    settings = config.experiment
    _banner(f"CBF experiment '{settings.name}' - N={config.grid.N}, seed={settings.seed}")

    _phase(1, "Setup Phase")
    grid = config.grid
    params = resolve_params(config)
    forcing = realize_forcing(params.forcing, grid)
    u0 = initial_field(config, grid, settings.seed)
    print(f"mu={params.mu:g}, alpha={params.alpha:g}, beta={params.beta:g}, r={params.r}, "
          f"forcing={params.forcing.kind} (|f|_V'={norm(forcing, NORM_VDUAL):.6g})")
    print(f"Initial field |u0|_H={norm(u0):.6g}\n")
    context = dict(grid=grid, params=params, forcing=forcing, u0=u0, seed=settings.seed,
                   n_jobs=n_jobs, progress=progress)

    result = RUNNERS[settings.name](config, context)
    reports = result["reports"]

    os.makedirs(settings.output, exist_ok=True)
    written = write_outputs(result.get("records", {}), reports, settings.output,
                            fields=result.get("fields"), summary=result.get("summary"),
                            tables=result.get("tables"))
    print("Artifacts written:")
    for path in written:
        print(f"- {path}")

    print("\nBound Reports:")
    for report in reports:
        print(report.summary_line())
    failed = [report.name for report in reports if not report.passed]

    _banner(f"Experiment complete: {len(reports) - len(failed)}/{len(reports)} reports passed")
    if failed:
        logger.warning("failed bound reports: %s", ", ".join(failed))
    return (1 if failed else 0), written
