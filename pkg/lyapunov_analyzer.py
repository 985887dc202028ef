"""
Lyapunov spectrum, Kaplan-Yorke dimension and trace numbers of the CBF
semigroup.

Tangent vectors are co-integrated with the base trajectory and
re-orthonormalized every t_ortho by modified Gram-Schmidt in the H inner
product. Between QR events the trace of F'(u) over the span of the
(non-orthonormal) vectors is evaluated through their Gram matrix, for every
nested prefix of the ensemble.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid
from tqdm import tqdm

from cbf_integrator import IFRK3Stepper, StepperConfig
from cbf_operators import NORM_V, convection_coeffs, inner, inner_coeffs, norm, tangent_generator_coeffs
from cbf_params import grashof_number
from spectral_field import SpectralField, lowest_modes, random_divfree_field

logger = logging.getLogger(__name__)

MAX_ENSEMBLE = 64
RANK_TOLERANCE = 1e-10


@dataclass
class TangentEnsemble:
    """
    m tangent fields, orthonormal in H right after each QR event, with the
    accumulated log diagonals of R and the running trace integrals.
    """

    m: int
    vectors: List[SpectralField]
    log_r_sums: np.ndarray
    t_accum: float = 0.0
    q_m_accum: Optional[np.ndarray] = None
    trace_times: List[float] = field(default_factory=list)
    trace_values: List[np.ndarray] = field(default_factory=list)
    exponent_history: List[np.ndarray] = field(default_factory=list)
    reinit_events: List[dict] = field(default_factory=list)
    qr_events: int = 0
    base: Optional[SpectralField] = None

    def __post_init__(self):
        if self.q_m_accum is None:
            self.q_m_accum = np.zeros(self.m)

    def gram(self):
        return np.array([[inner(a, b) for b in self.vectors] for a in self.vectors])

    def orthonormality_error(self):
        return float(np.abs(self.gram() - np.eye(self.m)).max())


@dataclass
class DimensionReport:
    exponents: np.ndarray
    d_ky: float
    saturated: bool
    q_m: np.ndarray
    trace_dimension: Optional[int]
    trace_fractal_bound: Optional[float]
    bounds: dict
    grashof: float
    flux: float

    def to_frame(self):
        rows = [{"quantity": f"lyapunov_{i + 1}", "value": value} for i, value in enumerate(self.exponents)]
        rows += [{"quantity": f"q_{i + 1}", "value": value} for i, value in enumerate(self.q_m)]
        rows += [
            {"quantity": "d_ky", "value": self.d_ky},
            {"quantity": "d_ky_saturated", "value": float(self.saturated)},
            {"quantity": "trace_dimension",
             "value": float("nan") if self.trace_dimension is None else float(self.trace_dimension)},
            {"quantity": "trace_fractal_bound",
             "value": float("nan") if self.trace_fractal_bound is None else self.trace_fractal_bound},
            {"quantity": "grashof", "value": self.grashof},
            {"quantity": "dissipation_flux", "value": self.flux},
        ]
        rows += [{"quantity": key, "value": value} for key, value in self.bounds.items()]
        return pd.DataFrame(rows)


def _orthonormalize(vectors, grid, spare_modes, seed, t):
    """
    Modified Gram-Schmidt in H. A vector that collapses onto the span of
    its predecessors is replaced by the next spare mode (or a seeded random
    field once the spares are used up) and its log R entry is 0.
    Returns (orthonormal list, log diagonals, reinit events).
    """
    q = []
    logs = np.zeros(len(vectors))
    events = []
    for j, vec in enumerate(vectors):
        original = math.sqrt(max(inner(vec, vec), 0.0))
        candidate = vec
        attempt = 0
        while True:
            work = candidate.coeffs.copy()
            for basis in q:
                work = work - inner_coeffs(grid, work, basis.coeffs) * basis.coeffs
            size = math.sqrt(max(inner_coeffs(grid, work, work), 0.0))
            reference = original if attempt == 0 else 1.0
            if size > RANK_TOLERANCE * max(reference, 1e-300) and size > 0:
                break
            attempt += 1
            if spare_modes:
                candidate = spare_modes.pop(0)
                source = "spare mode"
            else:
                candidate = random_divfree_field(grid, seed + 7919 * attempt + j, amplitude=1.0)
                source = "random field"
            logger.warning("QR rank loss at t=%.6g: vector %d reinitialized from a %s", t, j, source)
            events.append({"t": t, "vector": j, "source": source})
        if attempt == 0:
            logs[j] = math.log(size)
        q.append(SpectralField(grid, work / size))
    return q, logs, events


def _traces(grid, u_coeffs, vectors, params):
    """Tr(F'(u) restricted to span(ξ₁..ξ_k)) for k = 1..m, via the Gram matrix."""
    m = len(vectors)
    images = [tangent_generator_coeffs(grid, u_coeffs, v.coeffs, params) for v in vectors]
    gram = np.empty((m, m))
    action = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            gram[i, j] = inner_coeffs(grid, vectors[i].coeffs, vectors[j].coeffs)
            action[i, j] = inner_coeffs(grid, vectors[i].coeffs, images[j])
    out = np.empty(m)
    for k in range(1, m + 1):
        out[k - 1] = np.trace(np.linalg.solve(gram[:k, :k], action[:k, :k]))
    return out


def evolve_ensemble_qr(u0, params, m, t_total, t_ortho=0.1, config=None, initial_vectors=None,
                       forcing=None, seed=0, progress=False):
    """
    Co-integrate u0 and m tangent vectors for t_total, re-orthonormalizing
    every t_ortho. Initial vectors default to the m lowest Fourier modes.
    """
    if not 1 <= m <= MAX_ENSEMBLE:
        raise ValueError(f"ensemble size must lie in [1, {MAX_ENSEMBLE}], got {m}")
    grid = u0.grid
    config = config or StepperConfig(dt=1e-2, t_end=t_total)
    dt = config.dt
    n_steps = int(round(t_total / dt))
    steps_per_qr = max(1, int(round(t_ortho / dt)))
    stepper = IFRK3Stepper.from_config(grid, params, config, forcing)

    spares = lowest_modes(grid, min(m + 8, (grid.N - 2) * grid.N))
    if initial_vectors is None:
        initial_vectors, spares = spares[:m], spares[m:]
    elif len(initial_vectors) != m:
        raise ValueError(f"expected {m} initial vectors, got {len(initial_vectors)}")
    vectors, _, events = _orthonormalize(list(initial_vectors), grid, spares, seed, 0.0)
    ensemble = TangentEnsemble(m=m, vectors=vectors, log_r_sums=np.zeros(m), reinit_events=events)

    u = u0
    last_trace = _traces(grid, u.coeffs, ensemble.vectors, params)
    ensemble.trace_times.append(0.0)
    ensemble.trace_values.append(last_trace)
    for step in tqdm(range(1, n_steps + 1), disable=not progress, desc="Tangent ensemble"):
        u, history = stepper.advance(u, dt)
        vecs = ensemble.vectors
        for stages in history:
            vecs = [stepper.tangent(v, stages) for v in vecs]
        ensemble.vectors = vecs
        t = step * dt
        trace = _traces(grid, u.coeffs, ensemble.vectors, params)
        ensemble.q_m_accum = ensemble.q_m_accum + 0.5 * dt * (last_trace + trace)
        last_trace = trace
        ensemble.trace_times.append(t)
        ensemble.trace_values.append(trace)
        if step % steps_per_qr == 0 or step == n_steps:
            ensemble.vectors, logs, events = _orthonormalize(ensemble.vectors, grid, spares, seed + step, t)
            ensemble.log_r_sums = ensemble.log_r_sums + logs
            ensemble.reinit_events.extend(events)
            ensemble.qr_events += 1
            ensemble.t_accum = t
            ensemble.exponent_history.append(ensemble.log_r_sums / t)
    ensemble.base = u
    return ensemble


def exponents(ens):
    """Lyapunov exponents log_r_sums / t_accum, sorted descending."""
    if ens.t_accum <= 0:
        raise ValueError("ensemble has not been evolved (t_accum = 0)")
    return np.sort(ens.log_r_sums / ens.t_accum)[::-1]


def ky_dimension(exps):
    """
    Kaplan-Yorke dimension. Returns (d, saturated); saturated is True when
    every partial sum is nonnegative and d is capped at m.
    """
    exps = np.asarray(exps, dtype=float)
    if not exps.size:
        raise ValueError("Kaplan-Yorke dimension needs at least one exponent")
    if np.any(np.diff(exps) > 0):
        raise ValueError("exponents must be sorted in descending order")
    if exps[0] < 0:
        return 0.0, False
    partial = np.cumsum(exps)
    negative = np.flatnonzero(partial < 0)
    if not len(negative):
        return float(exps.size), True
    j = int(negative[0])
    return float(j + partial[j - 1] / abs(exps[j])), False


def trace_q_m(ens, record=None):
    """
    Running q_{m'}(t), m' = 1..m: mean of the trace over [t/2, t]. When a
    RunRecord is given the series is restricted to its time span.
    """
    times = np.asarray(ens.trace_times)
    values = np.vstack(ens.trace_values)
    cumulative = cumulative_trapezoid(values, times, axis=0, initial=0)
    rows = []
    for i, t in enumerate(times):
        if t <= 0:
            continue
        start = np.array([np.interp(t / 2.0, times, cumulative[:, k]) for k in range(values.shape[1])])
        rows.append([t, *((cumulative[i] - start) / (t / 2.0))])
    frame = pd.DataFrame(rows, columns=["t"] + [f"q_{k + 1}" for k in range(values.shape[1])])
    if record is not None and len(record):
        frame = frame[frame["t"] <= record.t_end + 1e-12].reset_index(drop=True)
    return frame


def trace_average(ens):
    """(1/t)∫₀ᵗ Tr(F'(u)∘Q_m) over the whole run, per prefix."""
    if ens.t_accum <= 0:
        raise ValueError("ensemble has not been evolved (t_accum = 0)")
    return ens.q_m_accum / ens.trace_times[-1]


def trace_dimension(q_final):
    """Smallest m' with q_{m'} < 0, or None."""
    negative = np.flatnonzero(np.asarray(q_final) < 0)
    return int(negative[0]) + 1 if len(negative) else None


def trace_fractal_bound(q_final):
    """m(1 + max_j (q_j)₊ / |q_m|) at the smallest m with q_m < 0."""
    q_final = np.asarray(q_final, dtype=float)
    m = trace_dimension(q_final)
    if m is None:
        return None
    peak = max(float(np.max(q_final[:m])), 0.0)
    return m * (1.0 + peak / abs(q_final[m - 1]))


def projected_dissipation(u, phis, params):
    """
    Σⱼ{-μ‖φⱼ‖_V² - α - β‖|u|^((r-1)/2) φⱼ‖² - ⟨B(φⱼ,u),φⱼ⟩} for orthonormal φⱼ,
    the trace without the (r-1)(u·φ)²|u|^(r-3) part of C'.
    """
    grid = u.grid
    up = u.physical(padded=True)
    weight = np.sqrt(up[0] ** 2 + up[1] ** 2) ** (params.r - 1)
    total = 0.0
    for phi in phis:
        pp = phi.physical(padded=True)
        damping = (grid.L / grid.M) ** 2 * float(np.sum(weight * (pp[0] ** 2 + pp[1] ** 2)))
        convect = inner_coeffs(grid, convection_coeffs(grid, phi.coeffs, u.coeffs), phi.coeffs)
        total += -params.mu * norm(phi, NORM_V) ** 2 - params.alpha - params.beta * damping - convect
    return total


def dimension_bounds(params, f_norm_vdual, kappa_tilde=1.0, lambda1=1.0):
    """
    Dimension bounds and flux bound in terms of ‖f‖_V':
    dim_H <= 1 + κ̃‖f‖²/(μ⁴λ₁), dim_F <= 2(1 + 2κ̃‖f‖²/(μ⁴λ₁⁴)),
    ℰ <= λ₁‖f‖²/μ, together with the Grashof forms 1 + κ̃G² and 2(1 + 2κ̃G²).
    """
    if not kappa_tilde > 0:
        raise ValueError(f"kappa_tilde must be positive, got {kappa_tilde}")
    mu = params.mu
    f2 = f_norm_vdual ** 2
    g = grashof_number(f_norm_vdual, mu, lambda1)
    return {
        "dim_H_bound": 1.0 + kappa_tilde * f2 / (mu ** 4 * lambda1),
        "dim_F_bound": 2.0 * (1.0 + 2.0 * kappa_tilde * f2 / (mu ** 4 * lambda1 ** 4)),
        "flux_bound": lambda1 * f2 / mu,
        "grashof": float(g),
        "reynolds": float(np.sqrt(g)),
        "dim_H_grashof": 1.0 + kappa_tilde * g ** 2,
        "dim_F_grashof": 2.0 * (1.0 + 2.0 * kappa_tilde * g ** 2),
    }


def dissipation_flux(record):
    """Empirical flux μλ₁ ⟨‖u‖_V²⟩ over the whole record."""
    meta = record.meta
    return float(meta["mu"] * meta["lambda1"] * record.column("int_V2")[-1] / record.t_end)


def calibrate_kappa(d_ky, trace_dim, params, f_norm_vdual, lambda1=1.0, minimum=1e-6):
    """
    Smallest κ̃ with d_KY <= dim_F bound and trace dimension <= ceil(dim_H bound).
    """
    mu = params.mu
    f2 = f_norm_vdual ** 2
    needs = [minimum]
    if d_ky > 2.0:
        if f2 == 0:
            raise ValueError("no kappa_tilde makes the bounds hold with zero forcing")
        needs.append((d_ky / 2.0 - 1.0) * mu ** 4 * lambda1 ** 4 / (2.0 * f2))
    if trace_dim is not None and trace_dim > 2:
        if f2 == 0:
            raise ValueError("no kappa_tilde makes the bounds hold with zero forcing")
        needs.append((trace_dim - 2) * mu ** 4 * lambda1 / f2 * (1.0 + 1e-9))
    return float(max(needs))


def dimension_report(ens, record, params, f_norm_vdual, kappa_tilde=1.0, lambda1=1.0):
    exps = exponents(ens)
    d_ky, saturated = ky_dimension(exps)
    q_frame = trace_q_m(ens)
    q_final = q_frame.iloc[-1, 1:].to_numpy(dtype=float) if len(q_frame) else np.full(ens.m, np.nan)
    bounds = dimension_bounds(params, f_norm_vdual, kappa_tilde, lambda1)
    return DimensionReport(
        exponents=exps,
        d_ky=d_ky,
        saturated=saturated,
        q_m=q_final,
        trace_dimension=trace_dimension(q_final),
        trace_fractal_bound=trace_fractal_bound(q_final),
        bounds=bounds,
        grashof=bounds["grashof"],
        flux=dissipation_flux(record) if record is not None and len(record) > 1 else float("nan"),
    )
