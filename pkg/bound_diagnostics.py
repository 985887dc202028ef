"""
Checks of the energy, absorbing-set, Lipschitz and differentiability
estimates along computed trajectories. Each check returns a BoundReport
evaluated from recorded data.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.linear_model import LinearRegression

from cbf_integrator import (
    GRONWALL_SLACK,
    IFRK3Stepper,
    StepperConfig,
    integrate,
    integrate_with_tangent,
)
from cbf_operators import (
    NORM_V,
    NORM_VDUAL,
    NormKind,
    apply_A,
    b_bound_ratio,
    bilinear_B,
    damping_C,
    damping_C_prime,
    inner,
    ladyzhenskaya_ratio,
    norm,
    shifted_norm,
)
from cbf_params import realize_forcing
from spectral_field import project_divfree, random_divfree_field, transform

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("name", "left", "right", "margin", "tolerance", "passed", "anchor", "note")
ROUNDOFF_FLOOR = 1e3 * np.finfo(float).eps


@dataclass(frozen=True)
class BoundReport:
    """
    Outcome of one inequality check left <= right (+ tolerance).
    anchor names the estimate being checked.
    """

    name: str
    left: float
    right: float
    anchor: str = ""
    tolerance: float = 0.0
    note: str = ""
    margin: float = field(init=False)
    passed: bool = field(init=False)

    def __post_init__(self):
        left, right = float(self.left), float(self.right)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        object.__setattr__(self, "margin", right - left)
        passed = bool(np.isfinite(left) and not np.isnan(right) and left <= right + self.tolerance)
        object.__setattr__(self, "passed", passed)

    def to_row(self):
        return {name: getattr(self, name) for name in REPORT_COLUMNS}

    def summary_line(self):
        status = "PASS" if self.passed else "FAIL"
        line = (f"[{status}] {self.name}: {self.left:.6g} <= {self.right:.6g}"
                f" (margin {self.margin:.3g}, tol {self.tolerance:.1g}) {self.anchor}")
        if self.note:
            line += f" - {self.note}"
        return line


def fit_loglog_slope(x, y):
    """Least-squares slope of log y against log x."""
    x = np.log(np.asarray(x, dtype=float)).reshape(-1, 1)
    y = np.log(np.asarray(y, dtype=float))
    return float(LinearRegression().fit(x, y).coef_[0])


def trend_slope(values):
    """Least-squares slope of values against their index."""
    values = np.asarray(values, dtype=float)
    index = np.arange(len(values), dtype=float).reshape(-1, 1)
    return float(LinearRegression().fit(index, values).coef_[0])


# --- absorbing set -----------------------------------------------------------

def absorbing_radius_from_norm(mu, lambda1, f_norm_vdual, alpha=0.0):
    """
    (M₁, M₁^α): M₁ = (1/μ)√(2/λ₁)‖f‖_V' and the Darcy-driven radius
    √(2/(μα))‖f‖_V' (inf when α = 0).
    """
    m1 = np.sqrt(2.0 / lambda1) * f_norm_vdual / mu
    m1_alpha = np.sqrt(2.0 / (mu * alpha)) * f_norm_vdual if alpha > 0 else np.inf
    return float(m1), float(m1_alpha)


def absorbing_ball_radius(params, grid, forcing=None):
    f = realize_forcing(params.forcing, grid) if forcing is None else forcing
    return absorbing_radius_from_norm(params.mu, grid.lambda1, norm(f, NORM_VDUAL), params.alpha)


def absorbing_entry_time(record, radius, tolerance=GRONWALL_SLACK):
    """
    First recorded time after which ‖u‖_H stays within radius, or None if
    the trajectory is still outside at the last record.
    """
    norms = record.column("norm_H")
    inside = norms <= radius + tolerance
    if not len(norms) or not inside[-1]:
        return None
    outside = np.flatnonzero(~inside)
    start = 0 if not len(outside) else outside[-1] + 1
    return float(record.times[start])


def absorbing_ball_check(record, tolerance=GRONWALL_SLACK):
    """‖u(t)‖_H <= M₁ for all recorded t >= t_B, t_B measured empirically."""
    meta = record.meta
    m1, m1_alpha = absorbing_radius_from_norm(meta["mu"], meta["lambda1"], meta["f_vdual"], meta["alpha"])
    radius = min(m1, m1_alpha)
    t_b = absorbing_entry_time(record, radius, tolerance)
    norms = record.column("norm_H")
    if t_b is None:
        return BoundReport("absorbing_ball", norms[-1], radius, "absorbing ball radius M1",
                           tolerance, "trajectory never entered the ball")
    tail = norms[record.times >= t_b]
    return BoundReport("absorbing_ball", tail.max(), radius, "absorbing ball radius M1",
                       tolerance, f"t_B={t_b:.6g}")


def gronwall_envelope_check(record, tolerance=GRONWALL_SLACK):
    """‖u(t)‖² <= ‖u₀‖² e^(-μλ₁t) + ‖f‖²_V'/(μ²λ₁) at every recorded time."""
    meta = record.meta
    t = record.times
    h2 = record.column("norm_H") ** 2
    envelope = (meta["h0"] ** 2 * np.exp(-meta["mu"] * meta["lambda1"] * t)
                + meta["f_vdual"] ** 2 / (meta["mu"] ** 2 * meta["lambda1"]))
    worst = int(np.argmax(h2 - envelope))
    return BoundReport("gronwall_envelope", h2[worst], envelope[worst],
                       "Gronwall energy envelope", tolerance, f"worst at t={t[worst]:.6g}")


def gronwall_step_flags(record):
    """Count of recorded intervals in which some step left the envelope."""
    flags = record.column("gronwall_ok").astype(bool)
    return BoundReport("gronwall_every_step", int((~flags).sum()), 0, "Gronwall energy envelope",
                       0.0, f"{len(flags)} recorded intervals")


def alpha_gronwall_check(record, tolerance=GRONWALL_SLACK):
    """Darcy-driven envelope ‖u₀‖² e^(-αt) + ‖f‖²_V'/(μα), for α > 0."""
    meta = record.meta
    if meta["alpha"] <= 0:
        raise ValueError("the Darcy-driven envelope needs alpha > 0")
    t = record.times
    h2 = record.column("norm_H") ** 2
    envelope = (meta["h0"] ** 2 * np.exp(-meta["alpha"] * t)
                + meta["f_vdual"] ** 2 / (meta["mu"] * meta["alpha"]))
    worst = int(np.argmax(h2 - envelope))
    return BoundReport("alpha_gronwall_envelope", h2[worst], envelope[worst],
                       "Darcy-driven energy envelope", tolerance, f"worst at t={t[worst]:.6g}")


def limsup_energy_check(record, tail_fraction=0.5, tolerance=GRONWALL_SLACK):
    """
    Tail maximum of ‖u‖² against ‖f‖²_V'/(μ²λ₁); the decaying initial term
    at the start of the tail is allowed as extra tolerance.
    """
    meta = record.meta
    t = record.times
    start = t[-1] * (1.0 - tail_fraction)
    tail = record.column("norm_H")[t >= start] ** 2
    limit = meta["f_vdual"] ** 2 / (meta["mu"] ** 2 * meta["lambda1"])
    transient = meta["h0"] ** 2 * np.exp(-meta["mu"] * meta["lambda1"] * start)
    return BoundReport("limsup_energy", tail.max(), limit, "asymptotic energy bound",
                       tolerance + transient, f"tail from t={start:.6g}")


# --- dissipation -------------------------------------------------------------

def _dissipation_integral(record):
    meta = record.meta
    return (meta["mu"] * record.column("int_V2") + meta["alpha"] * record.column("int_H2")
            + meta["beta"] * record.column("int_Lr1"))


def time_average_dissipation(record, params=None, tolerance=GRONWALL_SLACK):
    """
    (1/t)∫₀ᵗ[μ‖u‖_V² + α‖u‖² + β‖u‖_{L^{r+1}}^{r+1}] <= ‖u₀‖²/t + ‖f‖²_V'/μ,
    checked at every recorded t > 0; the tightest time is reported.
    """
    if not len(record):
        raise ValueError("time-average dissipation needs a nonempty record")
    meta = record.meta
    mu = params.mu if params is not None else meta["mu"]
    t = record.times
    positive = t > 0
    if not positive.any():
        raise ValueError("record covers no positive time")
    t = t[positive]
    left = _dissipation_integral(record)[positive] / t
    right = meta["h0"] ** 2 / t + meta["f_vdual"] ** 2 / mu
    worst = int(np.argmin(right - left))
    return BoundReport("time_average_dissipation", left[worst], right[worst],
                       "time-averaged dissipation bound", tolerance, f"tightest at t={t[worst]:.6g}")


def window_dissipation_check(record, theta, tolerance=GRONWALL_SLACK):
    """
    μ∫_t^{t+θ}‖u‖_V² + 2β∫_t^{t+θ}‖u‖_{L^{r+1}}^{r+1} <= ‖u(t)‖² + θ‖f‖²_V'/μ
    over every recorded window of length at least θ.
    """
    meta = record.meta
    t = record.times
    int_v2 = record.column("int_V2")
    int_lr = record.column("int_Lr1")
    h2 = record.column("norm_H") ** 2
    worst = None
    for i in range(len(t)):
        later = np.flatnonzero(t >= t[i] + theta - 1e-12)
        if not len(later):
            break
        j = later[0]
        width = t[j] - t[i]
        left = meta["mu"] * (int_v2[j] - int_v2[i]) + 2.0 * meta["beta"] * (int_lr[j] - int_lr[i])
        right = h2[i] + width * meta["f_vdual"] ** 2 / meta["mu"]
        if worst is None or right - left < worst[1] - worst[0]:
            worst = (left, right, t[i])
    if worst is None:
        raise ValueError(f"record shorter than the window theta={theta}")
    return BoundReport("window_dissipation", worst[0], worst[1], "windowed energy inequality",
                       tolerance, f"tightest window from t={worst[2]:.6g}")


def dissipation_flux_check(record, tolerance=GRONWALL_SLACK):
    """
    Empirical flux μλ₁⟨‖u‖_V²⟩ over [T/2, T] against λ₁(‖f‖²_V'/μ + ‖u(T/2)‖²/(T/2)).
    """
    meta = record.meta
    t = record.times
    half = t[-1] / 2.0
    i = int(np.searchsorted(t, half))
    span = t[-1] - t[i]
    if span <= 0:
        raise ValueError("record too short for a dissipation flux estimate")
    int_v2 = record.column("int_V2")
    flux = meta["mu"] * meta["lambda1"] * (int_v2[-1] - int_v2[i]) / span
    h2 = record.column("norm_H")[i] ** 2
    bound = meta["lambda1"] * (meta["f_vdual"] ** 2 / meta["mu"] + h2 / span)
    return BoundReport("dissipation_flux", flux, bound, "energy dissipation flux bound", tolerance,
                       f"averaged over [{t[i]:.6g}, {t[-1]:.6g}]")


# --- energy law --------------------------------------------------------------

def energy_audit_richardson(u0, params, config, levels=3, forcing=None, order_tolerance=0.3):
    """
    Rerun with dt, dt/2, dt/4, ... and fit the order of the largest per-step
    energy residual; it should be 3 for the trapezoid-in-time energy law.
    Returns (report, residuals, records).
    """
    dts, residuals, records = [], [], []
    for level in range(levels):
        scale = 2 ** level
        cfg = replace(config, dt=config.dt / scale, record_every=config.record_every * scale)
        _, record = integrate(u0, params, cfg, forcing=forcing)
        dts.append(cfg.dt)
        residuals.append(record.meta["max_step_residual"])
        records.append(record)
    floor = ROUNDOFF_FLOOR * max(record.meta["h0"] ** 2 for record in records)
    if min(residuals) <= floor:
        logger.warning("energy residuals reach the roundoff floor %.3g", floor)
        return (BoundReport("energy_law_order", 0.0, 0.0, "discrete energy equality", 0.0,
                            "residuals at roundoff; order not measurable"), residuals, records)
    order = fit_loglog_slope(dts, residuals)
    report = BoundReport("energy_law_order", abs(order - 3.0), order_tolerance,
                         "discrete energy equality", 0.0, f"observed order {order:.4f}")
    return report, residuals, records


# --- Lipschitz dependence ----------------------------------------------------

def lipschitz_pair_check(u0, v0, params, t, config=None, forcing=None, sharp=False, tolerance=GRONWALL_SLACK):
    """
    ‖S(t)u₀ - S(t)v₀‖ <= ‖u₀ - v₀‖ exp{(1/μ²)(‖u₀‖² + t‖f‖²_V'/μ)} at every
    recorded time. With sharp=True the exponent is (1/μ)∫₀ᵗ‖u‖_V² along the
    computed trajectory.
    """
    grid = u0.grid
    if config is None:
        config = StepperConfig(dt=1e-2, t_end=t)
    else:
        config = replace(config, t_end=t)
    stepper = IFRK3Stepper.from_config(grid, params, config, forcing)
    f_vdual = norm(stepper.forcing, NORM_VDUAL)
    w0 = norm(u0 - v0)
    h0_sq = norm(u0) ** 2
    mu = params.mu

    u, v = u0, v0
    int_v2 = 0.0
    v2_old = norm(u, NORM_V) ** 2
    worst = None
    for step in range(1, config.n_steps + 1):
        # one substep count for both members keeps their clocks aligned
        count = max(stepper.substeps(u, config.dt), stepper.substeps(v, config.dt))
        for _ in range(count):
            u, _ = stepper.step(u, config.dt / count)
            v, _ = stepper.step(v, config.dt / count)
        v2_new = norm(u, NORM_V) ** 2
        int_v2 += 0.5 * config.dt * (v2_old + v2_new)
        v2_old = v2_new
        if step % config.record_every and step != config.n_steps:
            continue
        time = step * config.dt
        if sharp:
            bound = w0 * np.exp(int_v2 / mu)
        else:
            bound = w0 * np.exp((h0_sq + time * f_vdual ** 2 / mu) / mu ** 2)
        gap = norm(u - v)
        if worst is None or bound - gap < worst[1] - worst[0]:
            worst = (gap, bound, time)
    if worst is None:
        raise ValueError(f"horizon t={t} covers no time step")
    name = "lipschitz_pair_sharp" if sharp else "lipschitz_pair"
    return BoundReport(name, worst[0], worst[1], "Lipschitz dependence on initial data", tolerance,
                       f"tightest at t={worst[2]:.6g}, |u0-v0|={w0:.6g}")


# --- differentiability -------------------------------------------------------

def frechet_remainders(u0, xi0, params, t, eps_ladder, config=None, forcing=None):
    """
    ‖S(t)(u₀+εξ₀) - S(t)u₀ - εΛ(t;u₀)ξ₀‖_H for each ε, plus the scale of S(t)u₀.
    """
    config = StepperConfig(dt=1e-2, t_end=t) if config is None else replace(config, t_end=t)
    base, (lin,), _ = integrate_with_tangent(u0, [xi0], params, config, forcing=forcing)
    remainders = []
    for eps in eps_ladder:
        perturbed, _ = integrate(u0 + eps * xi0, params, config, forcing=forcing)
        remainders.append(norm(perturbed - base - eps * lin))
    scale = max(norm(base), max(abs(e) for e in eps_ladder) * norm(lin), 1e-300)
    return np.array(remainders), scale


def frechet_remainder_check(u0, xi0, params, t, eps_ladder, config=None, forcing=None,
                            slope_target=2.0, slope_tolerance=0.1):
    """
    Fit log remainder against log ε and check the slope is 2 ± 0.1. Points
    at the roundoff floor are flagged and dropped; a ladder that sits
    entirely on the floor is the linear regime and passes.
    """
    eps = np.asarray(eps_ladder, dtype=float)
    remainders, scale = frechet_remainders(u0, xi0, params, t, eps, config, forcing)
    floor = ROUNDOFF_FLOOR * scale
    usable = remainders > floor
    if (~usable).any():
        logger.info("Frechet ladder: %d of %d points at the roundoff floor %.3g dropped",
                    int((~usable).sum()), len(eps), floor)
    anchor = "quadratic remainder of the linearized flow"
    if usable.sum() < 2:
        return BoundReport("frechet_remainder_slope", 0.0, slope_tolerance, anchor, 0.0,
                           f"linear regime: max remainder {remainders.max():.3g} at roundoff"), remainders
    slope = fit_loglog_slope(eps[usable], remainders[usable])
    note = f"slope {slope:.4f} over {int(usable.sum())} points"
    return BoundReport("frechet_remainder_slope", abs(slope - slope_target), slope_tolerance,
                       anchor, 0.0, note), remainders


def frechet_theta_bound(u0, v0, params, t, config=None, forcing=None):
    """
    Explicit remainder constant for r = 3:
    ‖S(t)v₀ - S(t)u₀ - Λ(t;u₀)(v₀-u₀)‖ <= ϑ(t)‖v₀-u₀‖² with
    ϑ(t) = (2/μ)√(1+36β²) exp{(2/μ² + μ/(4β))(‖u₀‖² + ‖v₀‖² + t‖f‖²_V'/μ)}.
    """
    if params.r != 3 or params.beta <= 0:
        raise ValueError("the explicit remainder constant needs r = 3 and beta > 0")
    config = StepperConfig(dt=1e-2, t_end=t) if config is None else replace(config, t_end=t)
    w0 = v0 - u0
    base, (lin,), record = integrate_with_tangent(u0, [w0], params, config, forcing=forcing)
    other, _ = integrate(v0, params, config, forcing=forcing)
    remainder = norm(other - base - lin)
    mu, beta = params.mu, params.beta
    f2 = record.meta["f_vdual"] ** 2
    exponent = (2.0 / mu ** 2 + mu / (4.0 * beta)) * (norm(u0) ** 2 + norm(v0) ** 2 + t * f2 / mu)
    with np.errstate(over="ignore"):
        theta = (2.0 / mu) * np.sqrt(1.0 + 36.0 * beta ** 2) * np.exp(exponent)
    bound = theta * norm(w0) ** 2
    note = f"theta={theta:.6g}"
    if not np.isfinite(bound):
        logger.warning("remainder constant overflows (exponent %.6g); the bound is vacuous", exponent)
        note = f"vacuous: theta overflows, exponent {exponent:.6g}"
    return BoundReport("frechet_theta_bound", remainder, bound, "explicit remainder constant",
                       GRONWALL_SLACK, note)


def shifted_norm_check(u, params, tolerance=1e-12):
    """
    Poincaré lower bound for the shifted norm of a zero-mean field:
    (μλ₁ + α/2)‖u‖² <= ⟨⟨u, u⟩⟩.
    """
    lambda1 = u.grid.lambda1
    left = (params.mu * lambda1 + 0.5 * params.alpha) * norm(u) ** 2
    right = shifted_norm(u, params.mu, params.alpha) ** 2
    return BoundReport("shifted_norm_coercivity", left, right, "Poincare bound for the shifted norm",
                       tolerance * max(right, 1.0), f"lambda1={lambda1:.6g}")


# --- operator identities -----------------------------------------------------

def operator_identity_reports(grid, params, count=1000, seed=0, spectrum=1.0):
    """
    Operator identities and inequalities over `count` random fields:
    ⟨Au,u⟩ = ‖u‖_V², skew-symmetry of B, ⟨C(u),u⟩ = ‖u‖_{L^{r+1}}^{r+1},
    monotonicity of C, linearity of C', projection idempotence and
    self-adjointness, Poincaré, the B bound and Ladyzhenskaya.
    """
    r = params.r
    worst = dict(A=0.0, skew=0.0, C=0.0, mono=np.inf, Cprime=0.0, idem=0.0, adjoint=0.0,
                 poincare=-np.inf, bbound=0.0, lady=0.0)
    for i in range(count):
        u = random_divfree_field(grid, seed + 3 * i, spectrum, 1.0)
        v = random_divfree_field(grid, seed + 3 * i + 1, spectrum, 1.0)
        w = random_divfree_field(grid, seed + 3 * i + 2, spectrum, 1.0)
        v_norm2 = norm(v, NORM_V) ** 2
        u_v2 = norm(u, NORM_V) ** 2

        worst["A"] = max(worst["A"], abs(inner(apply_A(u), u) - u_v2) / u_v2)
        skew = abs(inner(bilinear_B(u, v), v)) / (norm(u, NORM_V) * v_norm2)
        worst["skew"] = max(worst["skew"], skew)
        lr = norm(u, NormKind.lp(r + 1)) ** (r + 1)
        worst["C"] = max(worst["C"], abs(inner(damping_C(u, r), u) - lr) / lr)
        worst["mono"] = min(worst["mono"], inner(damping_C(u, r) - damping_C(v, r), u - v))
        combo = damping_C_prime(u, 2.0 * v - 0.5 * w, r)
        split = 2.0 * damping_C_prime(u, v, r) - 0.5 * damping_C_prime(u, w, r)
        worst["Cprime"] = max(worst["Cprime"], norm(combo - split) / max(norm(combo), 1e-300))

        # unprojected random samples for the projection checks
        rng = np.random.Generator(np.random.Philox(seed + 3 * i))
        raw = transform(grid, rng.standard_normal(grid.shape()))
        other = transform(grid, rng.standard_normal(grid.shape()))
        once = project_divfree(raw)
        worst["idem"] = max(worst["idem"], norm(project_divfree(once) - once) / norm(once))
        lhs = inner(project_divfree(raw), other)
        rhs = inner(raw, project_divfree(other))
        worst["adjoint"] = max(worst["adjoint"], abs(lhs - rhs) / (norm(raw) * norm(other)))

        worst["poincare"] = max(worst["poincare"], norm(u) ** 2 - u_v2 / grid.lambda1)
        worst["bbound"] = max(worst["bbound"], b_bound_ratio(u))
        worst["lady"] = max(worst["lady"], ladyzhenskaya_ratio(u))

    c_tol = 1e-8 if r == 2 else 1e-12
    note = f"{count} random fields"
    return [
        BoundReport("stokes_energy_identity", worst["A"], 0.0, "<Au,u> = |u|_V^2", 1e-13, note),
        BoundReport("convection_skew_symmetry", worst["skew"], 0.0, "<B(u,v),v> = 0", 1e-10, note),
        BoundReport("damping_duality", worst["C"], 0.0, "<C(u),u> = |u|_{L^{r+1}}^{r+1}", c_tol, note),
        BoundReport("damping_monotonicity", -worst["mono"], 0.0, "monotonicity of C", 1e-12, note),
        BoundReport("damping_derivative_linearity", worst["Cprime"], 0.0, "linearity of C'(u)", 1e-12, note),
        BoundReport("projection_idempotence", worst["idem"], 0.0, "P o P = P", 1e-12, note),
        BoundReport("projection_self_adjoint", worst["adjoint"], 0.0, "<Pf,g> = <f,Pg>", 1e-12, note),
        BoundReport("poincare_inequality", worst["poincare"], 0.0, "Poincare inequality", 1e-12, note),
        BoundReport("convection_bound", worst["bbound"], 1.0, "|B(u,u)|_V' bound", 1e-8, note),
        BoundReport("ladyzhenskaya_inequality", worst["lady"], 1.0, "Ladyzhenskaya inequality", 1e-12, note),
    ]
