"""
Integrating-factor SSP-RK3 time stepping for the CBF system and its
linearization.

The diagonal part μ|k|² + α (plus β when r = 1 and damping is folded) is
integrated exactly through E(h) = exp(-L_k h); convection and the remaining
damping are explicit. The tangent map applies the same stages to the
linearized equation around the stored base stages, so it is the exact
derivative of the discrete step.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from cbf_operators import (
    NORM_H,
    NORM_VDUAL,
    apply_A,
    bilinear_B,
    cbf_rhs,
    convection_coeffs,
    damping_C,
    damping_coeffs,
    damping_prime_coeffs,
    inner_coeffs,
    lp_coeffs,
    norm,
)
from cbf_params import ForcingSpec, realize_forcing
from spectral_field import GridMismatchError, GridSpec, SpectralField

logger = logging.getLogger(__name__)

SCHEMES = ("IFRK3",)
CFL_POLICIES = ("halve", "error")
GRONWALL_SLACK = 1e-6

RECORD_COLUMNS = (
    "t",
    "step",
    "norm_H",
    "norm_V",
    "norm_Lr1",
    "energy_residual",
    "gronwall_ok",
    "alpha_gronwall_ok",
    "int_H2",
    "int_V2",
    "int_Lr1",
    "int_work",
)


class CFLError(RuntimeError):
    """Time step exceeds the CFL limit and the policy forbids subdividing it."""


class StageMismatchError(ValueError):
    """Tangent step called with base stages from another grid or step size."""


@dataclass(frozen=True)
class StepperConfig:
    dt: float
    t_end: float
    cfl: float = 0.5
    scheme: str = "IFRK3"
    record_every: int = 10
    cfl_policy: str = "halve"
    fold_damping: bool = True
    max_halvings: int = 12

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.t_end < 0:
            raise ValueError(f"t_end must be >= 0, got {self.t_end}")
        if not 0 < self.cfl <= 1:
            raise ValueError(f"cfl must lie in (0, 1], got {self.cfl}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; supported: {SCHEMES}")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ValueError(f"record_every must be a positive integer, got {self.record_every}")
        if self.cfl_policy not in CFL_POLICIES:
            raise ValueError(f"cfl_policy must be one of {CFL_POLICIES}, got {self.cfl_policy!r}")

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))


@dataclass(frozen=True, eq=False)
class StageValues:
    """Base-trajectory states entering the three stages of one step."""

    grid: GridSpec
    dt: float
    stages: Tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass
class RunRecord:
    """
    Recorded trajectory: one row per recorded time plus run metadata.

    The int_* columns are cumulative trapezoid integrals over every step
    (∫‖u‖_H², ∫‖u‖_V², ∫‖u‖_{L^{r+1}}^{r+1}, ∫⟨f,u⟩), so every bound
    check can be replayed from the CSV alone.
    """

    series: pd.DataFrame
    meta: Dict[str, float]
    snapshots: List[Tuple[float, SpectralField]] = field(default_factory=list)

    def __len__(self):
        return len(self.series)

    @property
    def times(self):
        return self.series["t"].to_numpy()

    def column(self, name):
        return self.series[name].to_numpy()

    @property
    def t_end(self):
        if not len(self):
            raise ValueError("empty record")
        return float(self.times[-1])

    def validate(self):
        missing = [c for c in RECORD_COLUMNS if c not in self.series.columns]
        if missing:
            raise ValueError(f"record is missing columns {missing}")
        times = self.times
        if len(times) > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("record times are not strictly increasing")
        return self

    def to_frame(self):
        return self.series.loc[:, list(RECORD_COLUMNS)].copy()

    @classmethod
    def from_frame(cls, frame, meta):
        return cls(frame.reset_index(drop=True), dict(meta)).validate()

    @classmethod
    def empty(cls, meta=None):
        return cls(pd.DataFrame(columns=list(RECORD_COLUMNS)), dict(meta or {}))


class IFRK3Stepper:
    """
    One CBF system on one grid. Holds the realized forcing, the linear
    multiplier and a cache of integrating factors per step size.
    """

    def __init__(self, grid, params, forcing=None, fold_damping=True, cfl=0.5,
                 cfl_policy="halve", max_halvings=12):
        self.grid = grid
        self.params = params
        self.forcing = realize_forcing(params.forcing, grid) if forcing is None else forcing
        if self.forcing.grid != grid:
            raise GridMismatchError("forcing and stepper grids differ")
        self.folded = bool(fold_damping) and params.r == 1
        self.beta_explicit = 0.0 if self.folded else params.beta
        self.linear = params.mu * grid.k2 + params.alpha + (params.beta if self.folded else 0.0)
        self.cfl = cfl
        self.cfl_policy = cfl_policy
        self.max_halvings = max_halvings
        self._factors = {}

    @classmethod
    def from_config(cls, grid, params, config, forcing=None):
        return cls(grid, params, forcing, config.fold_damping, config.cfl,
                   config.cfl_policy, config.max_halvings)

    def factors(self, dt):
        if dt not in self._factors:
            self._factors[dt] = (
                np.exp(-self.linear * dt),
                np.exp(-self.linear * dt / 2.0),
                np.exp(self.linear * dt / 2.0),
            )
        return self._factors[dt]

    def nonlinear_term(self, c):
        out = self.forcing.coeffs - convection_coeffs(self.grid, c, c)
        if self.beta_explicit:
            out = out - self.beta_explicit * damping_coeffs(self.grid, c, self.params.r)
        return out

    def tangent_term(self, c, x):
        out = -convection_coeffs(self.grid, x, c) - convection_coeffs(self.grid, c, x)
        if self.beta_explicit:
            out = out - self.beta_explicit * damping_prime_coeffs(self.grid, c, x, self.params.r)
        return out

    def _rk3(self, x0, dt, rhs):
        e_full, e_half, e_back = self.factors(dt)
        x1 = e_full * (x0 + dt * rhs(0, x0))
        x2 = 0.75 * e_half * x0 + 0.25 * e_back * (x1 + dt * rhs(1, x1))
        x3 = e_full * x0 / 3.0 + (2.0 / 3.0) * e_half * (x2 + dt * rhs(2, x2))
        return x3, (x0, x1, x2)

    def step(self, u, dt):
        """Advance u by dt. Returns the new state and the base stages."""
        if u.grid != self.grid:
            raise GridMismatchError("state lives on a different grid")
        new, stages = self._rk3(u.coeffs, dt, lambda i, x: self.nonlinear_term(x))
        return SpectralField(self.grid, new), StageValues(self.grid, dt, stages)

    def tangent(self, xi, stage_values):
        """Advance ξ through the step whose base stages are given."""
        if not isinstance(stage_values, StageValues) or stage_values.grid != self.grid:
            raise StageMismatchError("stage values were not produced on this grid")
        if xi.grid != self.grid:
            raise StageMismatchError("tangent vector lives on a different grid")
        stages = stage_values.stages
        new, _ = self._rk3(xi.coeffs, stage_values.dt, lambda i, x: self.tangent_term(stages[i], x))
        return SpectralField(self.grid, new)

    def cfl_limit(self, u):
        return self.cfl * self.grid.dx / max(1.0, u.max_speed())

    def substeps(self, u, dt):
        """Number of equal substeps needed to respect the CFL limit."""
        limit = self.cfl_limit(u)
        if dt <= limit:
            return 1
        if self.cfl_policy == "error":
            raise CFLError(f"dt={dt:.6g} exceeds the CFL limit {limit:.6g}")
        count = 1
        for _ in range(self.max_halvings):
            count *= 2
            if dt / count <= limit:
                logger.warning("CFL: dt=%.6g split into %d substeps (limit %.6g)", dt, count, limit)
                return count
        raise CFLError(f"dt={dt:.6g} still exceeds the CFL limit {limit:.6g} after {self.max_halvings} halvings")

    def advance(self, u, dt):
        """Advance by dt, subdividing per the CFL policy; returns (u, [stages])."""
        count = self.substeps(u, dt)
        history = []
        for _ in range(count):
            u, stages = self.step(u, dt / count)
            history.append(stages)
        return u, history


def step_nonlinear(u, params, dt, forcing=None, fold_damping=True, cfl=0.5, cfl_policy="halve"):
    """IFRK3 step of the CBF system over dt, split into substeps per the CFL policy."""
    stepper = IFRK3Stepper(u.grid, params, forcing, fold_damping, cfl, cfl_policy)
    return stepper.advance(u, dt)[0]


def step_tangent(xi, u_stage_values, params, dt, forcing=None, fold_damping=True):
    """Single IFRK3 step of the linearized system around stored base stages."""
    if not isinstance(u_stage_values, StageValues):
        raise StageMismatchError("base stages must come from a nonlinear step")
    if not np.isclose(u_stage_values.dt, dt, rtol=1e-14, atol=0.0):
        raise StageMismatchError(f"stages were computed for dt={u_stage_values.dt}, not dt={dt}")
    stepper = IFRK3Stepper(xi.grid, params, forcing, fold_damping)
    return stepper.tangent(xi, u_stage_values)


def manufactured_forcing(u_star, params):
    """
    Forcing f = μAu* + B(u*,u*) + αu* + βC(u*) that makes u* an equilibrium.
    """
    f = params.mu * apply_A(u_star) + bilinear_B(u_star, u_star) + params.alpha * u_star
    if params.beta:
        f = f + params.beta * damping_C(u_star, params.r)
    return ForcingSpec(kind="explicit", amplitude=1.0, values=f)


def steady_residual(u, params, forcing):
    """‖F(u)‖_H for a realized forcing field."""
    return norm(cbf_rhs(u, params, forcing), NORM_H)


class _EnergyLedger:
    """Per-step energy bookkeeping for one trajectory."""

    def __init__(self, stepper, u0):
        p = stepper.params
        grid = stepper.grid
        self.stepper = stepper
        self.f_vdual = norm(stepper.forcing, NORM_VDUAL)
        self.h0_sq = norm(u0) ** 2
        self.absorb = self.f_vdual ** 2 / (p.mu ** 2 * grid.lambda1)
        self.absorb_alpha = self.f_vdual ** 2 / (p.mu * p.alpha) if p.alpha > 0 else np.inf
        self.totals = dict(int_H2=0.0, int_V2=0.0, int_Lr1=0.0, int_work=0.0)
        self.max_step_residual = 0.0
        self.state = self.measure(u0)

    def measure(self, u):
        grid, p = self.stepper.grid, self.stepper.params
        c = u.coeffs
        h2 = inner_coeffs(grid, c, c)
        v2 = inner_coeffs(grid, c, c, grid.k2)
        lr1 = lp_coeffs(grid, c, p.r + 1) ** (p.r + 1)
        work = inner_coeffs(grid, self.stepper.forcing.coeffs, c)
        dissipation = p.mu * v2 + p.alpha * h2 + p.beta * lr1 - work
        return dict(H2=h2, V2=v2, Lr1=lr1, work=work, D=dissipation)

    def advance(self, u_new, dt):
        new = self.measure(u_new)
        old = self.state
        residual = 0.5 * (new["H2"] - old["H2"]) + 0.5 * dt * (old["D"] + new["D"])
        for key, name in (("H2", "int_H2"), ("V2", "int_V2"), ("Lr1", "int_Lr1"), ("work", "int_work")):
            self.totals[name] += 0.5 * dt * (old[key] + new[key])
        self.max_step_residual = max(self.max_step_residual, abs(residual))
        self.state = new
        return residual

    def envelopes(self, t):
        p = self.stepper.params
        grid = self.stepper.grid
        h2 = self.state["H2"]
        ok = h2 <= self.h0_sq * np.exp(-p.mu * grid.lambda1 * t) + self.absorb + GRONWALL_SLACK
        if p.alpha > 0:
            ok_alpha = h2 <= self.h0_sq * np.exp(-p.alpha * t) + self.absorb_alpha + GRONWALL_SLACK
        else:
            ok_alpha = True
        return bool(ok), bool(ok_alpha)


def integrate(u0, params, config, forcing=None, tangents=None, snapshot_times=None,
              progress=False, on_step=None):
    """
    Integrate from u0 to config.t_end.

    Returns (u_final, record) or, when tangent vectors are given,
    (u_final, tangents_final, record). on_step(step, t, u, stage_history,
    tangents) is called after every step.
    """
    grid = u0.grid
    stepper = IFRK3Stepper.from_config(grid, params, config, forcing)
    ledger = _EnergyLedger(stepper, u0)
    dt = config.dt
    n_steps = config.n_steps
    snapshot_steps = set()
    if snapshot_times is not None:
        snapshot_steps = {int(round(t / dt)) for t in snapshot_times}

    rows = []
    snapshots = []
    interval_residual = 0.0
    interval_ok = [True, True]
    xis = list(tangents) if tangents is not None else None

    def record(step, t, u):
        nonlocal interval_residual, interval_ok
        rows.append({
            "t": t,
            "step": step,
            "norm_H": np.sqrt(ledger.state["H2"]),
            "norm_V": np.sqrt(ledger.state["V2"]),
            "norm_Lr1": ledger.state["Lr1"] ** (1.0 / (params.r + 1)),
            "energy_residual": interval_residual,
            "gronwall_ok": interval_ok[0],
            "alpha_gronwall_ok": interval_ok[1],
            **ledger.totals,
        })
        interval_residual = 0.0
        interval_ok = [True, True]

    u = u0
    record(0, 0.0, u)
    if 0 in snapshot_steps:
        snapshots.append((0.0, u))

    for step in tqdm(range(1, n_steps + 1), disable=not progress, desc="Integrating"):
        count = stepper.substeps(u, dt)
        history = []
        for _ in range(count):
            u, stages = stepper.step(u, dt / count)
            history.append(stages)
            interval_residual += ledger.advance(u, dt / count)
            if xis is not None:
                xis = [stepper.tangent(xi, stages) for xi in xis]
        t = step * dt
        ok, ok_alpha = ledger.envelopes(t)
        interval_ok = [interval_ok[0] and ok, interval_ok[1] and ok_alpha]
        if on_step is not None:
            on_step(step, t, u, history, xis)
        if step % config.record_every == 0 or step == n_steps:
            record(step, t, u)
        if step in snapshot_steps:
            snapshots.append((t, u))

    if not all(row["gronwall_ok"] for row in rows):
        logger.warning("Gronwall envelope violated at some recorded times")

    meta = {
        "mu": params.mu,
        "alpha": params.alpha,
        "beta": params.beta,
        "r": params.r,
        "lambda1": grid.lambda1,
        "L": grid.L,
        "N": grid.N,
        "dt": dt,
        "h0": float(np.sqrt(ledger.h0_sq)),
        "f_vdual": ledger.f_vdual,
        "f_h": norm(stepper.forcing, NORM_H),
        "max_step_residual": ledger.max_step_residual,
    }
    run = RunRecord(pd.DataFrame(rows, columns=list(RECORD_COLUMNS)), meta, snapshots).validate()
    if xis is not None:
        return u, xis, run
    return u, run


def integrate_with_tangent(u0, tangents, params, config, forcing=None, progress=False):
    """Co-integrate the base trajectory and a list of tangent vectors."""
    return integrate(u0, params, config, forcing=forcing, tangents=tangents, progress=progress)
