"""
Run configuration: a strict INI-style text format with [grid], [physics],
[stepper] and [experiment] sections.

Unknown sections or keys, duplicate keys, type mismatches and invalid
values are rejected with the offending line number. Floats accept plain
literals and multiples of pi ("2*pi", "pi/2").
"""

import math
import re
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

from cbf_integrator import CFL_POLICIES, SCHEMES, StepperConfig
from cbf_params import FORCING_KINDS, SUPPORTED_R, ForcingSpec, PhysParams
from spectral_field import GridError, GridSpec

EXPERIMENTS = ("simulate", "energy-audit", "absorbing", "frechet", "lyapunov", "semicontinuity", "verify")
INIT_KINDS = ("random", "zero", "taylor_green", "file")
REQUIRED_SECTIONS = ("grid", "physics", "stepper")

_PI_MULTIPLE = re.compile(
    r"^(?:(?P<coef>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*\*\s*)?pi"
    r"(?:\s*/\s*(?P<div>(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?))?$"
)


class ConfigError(ValueError):
    """Invalid configuration text. `lines` holds the cited line numbers."""

    def __init__(self, message, *lines):
        self.lines = tuple(n for n in lines if n is not None)
        if self.lines:
            where = " and ".join(f"line {n}" for n in self.lines)
            message = f"{where}: {message}"
        super().__init__(message)


# --- value parsers --------------------------------------------------------------

def _parse_float(text):
    try:
        return float(text)
    except ValueError:
        pass
    match = _PI_MULTIPLE.match(text.strip())
    if not match:
        raise ValueError(f"expected a number, got {text!r}")
    coef = float(match.group("coef")) if match.group("coef") else 1.0
    div = float(match.group("div")) if match.group("div") else 1.0
    if div == 0:
        raise ValueError("division by zero")
    return coef * math.pi / div


def _parse_int(text):
    try:
        return int(text, 10)
    except ValueError:
        raise ValueError(f"expected an integer, got {text!r}") from None


def _parse_bool(text):
    lowered = text.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _parse_str(text):
    if not text:
        raise ValueError("empty value")
    return text


def _parse_optional_float(text):
    return None if text.lower() == "none" else _parse_float(text)


def _parse_optional_int(text):
    return None if text.lower() == "none" else _parse_int(text)


def _parse_optional_str(text):
    return None if text.lower() == "none" else text


def _parse_float_list(text):
    if not text.strip():
        return ()
    return tuple(_parse_float(item.strip()) for item in text.split(","))


def _parse_int_list(text):
    if not text.strip():
        return ()
    return tuple(_parse_int(item.strip()) for item in text.split(","))


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {text!r}")
        return text
    return parse


def _positive(parse):
    def checked(text):
        value = parse(text)
        if value is not None and not value > 0:
            raise ValueError(f"must be positive, got {value}")
        return value
    return checked


def _nonnegative(parse):
    def checked(text):
        value = parse(text)
        if value is not None and value < 0:
            raise ValueError(f"must be >= 0, got {value}")
        return value
    return checked


def _exponent(text):
    value = _parse_int(text)
    if value not in SUPPORTED_R:
        raise ValueError(f"r = {value} is not supported; supported set {{1, 2, 3}}")
    return value


# (parser, default); a default of _REQUIRED marks a mandatory key
_REQUIRED = object()

SCHEMA = {
    "grid": {
        "N": (_parse_int, _REQUIRED),
        "L": (_positive(_parse_float), 2.0 * math.pi),
        "pad": (_positive(_parse_int), 2),
    },
    "physics": {
        "mu": (_positive(_parse_float), _REQUIRED),
        "alpha": (_nonnegative(_parse_float), 0.0),
        "beta": (_nonnegative(_parse_float), 0.0),
        "r": (_exponent, 1),
        "kappa_tilde": (_positive(_parse_float), 1.0),
        "forcing": (_choice([k for k in FORCING_KINDS if k != "explicit"]), "zero"),
        "forcing_amplitude": (_nonnegative(_parse_float), 1.0),
        "forcing_wavenumber": (_positive(_parse_int), 1),
        "forcing_width": (_positive(_parse_float), 0.08),
        "forcing_seed": (_nonnegative(_parse_int), 0),
        "forcing_path": (_parse_optional_str, None),
        "forcing_mask_radius": (_nonnegative(_parse_optional_float), None),
        "grashof": (_positive(_parse_optional_float), None),
    },
    "stepper": {
        "dt": (_positive(_parse_float), _REQUIRED),
        "t_end": (_nonnegative(_parse_float), _REQUIRED),
        "cfl": (_positive(_parse_float), 0.5),
        "scheme": (_choice(SCHEMES), "IFRK3"),
        "record_every": (_positive(_parse_int), 10),
        "cfl_policy": (_choice(CFL_POLICIES), "halve"),
        "fold_damping": (_parse_bool, True),
        "max_halvings": (_nonnegative(_parse_int), 12),
    },
    "experiment": {
        "name": (_choice(EXPERIMENTS), "simulate"),
        "seed": (_nonnegative(_parse_int), 0),
        "output": (_parse_str, "output"),
        "init": (_choice(INIT_KINDS), "random"),
        "init_amplitude": (_nonnegative(_parse_float), 1.0),
        "init_spectrum": (_parse_float, 2.0),
        "init_kmax": (_positive(_parse_optional_int), None),
        "init_path": (_parse_optional_str, None),
        "ensemble_size": (_positive(_parse_int), 8),
        "t_ortho": (_positive(_parse_float), 0.1),
        "eps_ladder": (_parse_float_list, (1e-2, 5e-3, 2.5e-3, 1.25e-3, 6.25e-4)),
        "r_values": (_parse_int_list, ()),
        "trials": (_positive(_parse_int), 10),
        "radius_factor": (_positive(_parse_float), 10.0),
        "ladder_radii": (_parse_float_list, ()),
        "transient": (_nonnegative(_parse_float), 10.0),
        "snapshots": (_positive(_parse_int), 8),
        "spacing": (_positive(_parse_float), 1.0),
        "epsilon": (_positive(_parse_float), 1e-2),
        "verify_samples": (_positive(_parse_int), 1000),
        "theta": (_positive(_parse_float), 1.0),
        "pair_distance": (_positive(_parse_float), 1e-3),
        "audit_levels": (_positive(_parse_int), 3),
    },
}


@dataclass(frozen=True)
class ExperimentSettings:
    """
    Experiment selection plus the knobs every experiment runner reads.
    Settings irrelevant to the selected experiment are ignored.
    """

    name: str = "simulate"
    seed: int = 0
    output: str = "output"
    init: str = "random"
    init_amplitude: float = 1.0
    init_spectrum: float = 2.0
    init_kmax: Optional[int] = None
    init_path: Optional[str] = None
    ensemble_size: int = 8
    t_ortho: float = 0.1
    eps_ladder: Tuple[float, ...] = (1e-2, 5e-3, 2.5e-3, 1.25e-3, 6.25e-4)
    r_values: Tuple[int, ...] = ()
    trials: int = 10
    radius_factor: float = 10.0
    ladder_radii: Tuple[float, ...] = ()
    transient: float = 10.0
    snapshots: int = 8
    spacing: float = 1.0
    epsilon: float = 1e-2
    verify_samples: int = 1000
    theta: float = 1.0
    pair_distance: float = 1e-3
    audit_levels: int = 3


@dataclass(frozen=True)
class RunConfig:
    grid: GridSpec
    params: PhysParams
    stepper: StepperConfig
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    kappa_tilde: float = 1.0
    grashof: Optional[float] = None

    @property
    def seed(self):
        return self.experiment.seed

    @property
    def output(self):
        return self.experiment.output

    def with_overrides(self, experiment=None, seed=None, output=None):
        changes = {}
        if experiment is not None:
            if experiment not in EXPERIMENTS:
                raise ConfigError(f"unknown experiment {experiment!r}; expected one of {', '.join(EXPERIMENTS)}")
            changes["name"] = experiment
        if seed is not None:
            if seed < 0:
                raise ConfigError(f"seed must be >= 0, got {seed}")
            changes["seed"] = seed
        if output is not None:
            changes["output"] = output
        return replace(self, experiment=replace(self.experiment, **changes))


# --- parsing --------------------------------------------------------------------

def _scan(text):
    """Split text into {section: {key: (raw value, line)}} plus section header lines."""
    sections = {}
    headers = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            name = line[1:-1].strip()
            if name not in SCHEMA:
                raise ConfigError(f"unknown section [{name}]; expected one of {', '.join(SCHEMA)}", lineno)
            if name in headers:
                raise ConfigError(f"section [{name}] appears twice", headers[name], lineno)
            headers[name] = lineno
            sections[name] = {}
            current = name
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if current is None:
            raise ConfigError("key outside of any section", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA[current]:
            raise ConfigError(f"unknown key {key!r} in [{current}]", lineno)
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r} in [{current}]", sections[current][key][1], lineno)
        sections[current][key] = (value, lineno)
    return sections, headers


def _section_values(name, entries, header_line):
    values, lines = {}, {}
    for key, (parse, default) in SCHEMA[name].items():
        if key in entries:
            raw, lineno = entries[key]
            try:
                values[key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}", lineno) from None
            lines[key] = lineno
        elif default is _REQUIRED:
            raise ConfigError(f"missing required key {key!r} in [{name}]", header_line)
        else:
            values[key] = default
            lines[key] = header_line
    return values, lines


def parse_config(text):
    """
    Parse configuration text into a validated RunConfig.

    Defaults: pad=2, L=2π, cfl=0.5, kappa_tilde=1, record_every=10,
    cfl_policy=halve, fold_damping=true, alpha=beta=0, r=1, forcing=zero.
    """
    sections, headers = _scan(text)
    for name in REQUIRED_SECTIONS:
        if name not in sections:
            raise ConfigError(f"missing section [{name}]")

    g, g_lines = _section_values("grid", sections["grid"], headers["grid"])
    p, p_lines = _section_values("physics", sections["physics"], headers["physics"])
    s, s_lines = _section_values("stepper", sections["stepper"], headers["stepper"])
    e, e_lines = _section_values("experiment", sections.get("experiment", {}), headers.get("experiment"))

    try:
        grid = GridSpec(g["N"], g["L"], g["pad"])
    except GridError as exc:
        raise ConfigError(f"[grid] {exc}", g_lines["N"]) from None

    try:
        forcing = ForcingSpec(
            kind=p["forcing"],
            amplitude=p["forcing_amplitude"],
            wavenumber=p["forcing_wavenumber"],
            width=p["forcing_width"],
            seed=p["forcing_seed"],
            path=p["forcing_path"],
            mask_radius=p["forcing_mask_radius"],
        )
    except ValueError as exc:
        raise ConfigError(f"[physics] {exc}", p_lines["forcing"]) from None
    params = PhysParams(mu=p["mu"], alpha=p["alpha"], beta=p["beta"], r=p["r"], forcing=forcing)

    try:
        stepper = StepperConfig(
            dt=s["dt"],
            t_end=s["t_end"],
            cfl=s["cfl"],
            scheme=s["scheme"],
            record_every=s["record_every"],
            cfl_policy=s["cfl_policy"],
            fold_damping=s["fold_damping"],
            max_halvings=s["max_halvings"],
        )
    except ValueError as exc:
        raise ConfigError(f"[stepper] {exc}", s_lines["cfl"]) from None

    for value in e["r_values"]:
        if value not in SUPPORTED_R:
            raise ConfigError(f"[experiment] r_values: r = {value} is not supported; supported set {{1, 2, 3}}",
                              e_lines["r_values"])
    if e["init"] == "file" and not e["init_path"]:
        raise ConfigError("[experiment] init = file needs init_path", e_lines["init"])
    if any(b <= a for a, b in zip(e["ladder_radii"], e["ladder_radii"][1:])):
        raise ConfigError("[experiment] ladder_radii must be strictly increasing", e_lines["ladder_radii"])
    if any(eps <= 0 for eps in e["eps_ladder"]):
        raise ConfigError("[experiment] eps_ladder entries must be positive", e_lines["eps_ladder"])

    return RunConfig(
        grid=grid,
        params=params,
        stepper=stepper,
        experiment=ExperimentSettings(**e),
        kappa_tilde=p["kappa_tilde"],
        grashof=p["grashof"],
    )


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


# --- rendering ------------------------------------------------------------------

def _render_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_render_value(v) for v in value)
    return str(value)


def render_config(config):
    """Text form of a RunConfig with every key explicit; parses back to an equal config."""
    forcing = config.params.forcing
    if forcing.kind == "explicit":
        raise ConfigError("explicit forcing values cannot be rendered as text")
    blocks = {
        "grid": {"N": config.grid.N, "L": config.grid.L, "pad": config.grid.pad_factor},
        "physics": {
            "mu": float(config.params.mu),
            "alpha": float(config.params.alpha),
            "beta": float(config.params.beta),
            "r": config.params.r,
            "kappa_tilde": float(config.kappa_tilde),
            "forcing": forcing.kind,
            "forcing_amplitude": float(forcing.amplitude),
            "forcing_wavenumber": forcing.wavenumber,
            "forcing_width": float(forcing.width),
            "forcing_seed": forcing.seed,
            "forcing_path": forcing.path,
            "forcing_mask_radius": None if forcing.mask_radius is None else float(forcing.mask_radius),
            "grashof": None if config.grashof is None else float(config.grashof),
        },
        "stepper": {
            "dt": float(config.stepper.dt),
            "t_end": float(config.stepper.t_end),
            "cfl": float(config.stepper.cfl),
            "scheme": config.stepper.scheme,
            "record_every": config.stepper.record_every,
            "cfl_policy": config.stepper.cfl_policy,
            "fold_damping": config.stepper.fold_damping,
            "max_halvings": config.stepper.max_halvings,
        },
        "experiment": {key: getattr(config.experiment, key) for key in SCHEMA["experiment"]},
    }
    lines = []
    for section, values in blocks.items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if isinstance(value, tuple) and value and key in ("eps_ladder", "ladder_radii"):
                value = tuple(float(v) for v in value)
            elif key in ("init_amplitude", "init_spectrum", "t_ortho", "radius_factor", "transient",
                         "spacing", "epsilon", "theta", "pair_distance"):
                value = float(value)
            lines.append(f"{key} = {_render_value(value)}")
        lines.append("")
    return "\n".join(lines)
