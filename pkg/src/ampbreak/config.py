"""Experiment configuration: TOML files with documented defaults.

Every field has a default except ``experiment`` and ``seed``.  Validation
errors carry the line of the offending key when it can be located.
"""

from __future__ import annotations

import copy
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .lattice import RECIPES

__all__ = [
    "EXPERIMENTS",
    "DEFAULTS",
    "WORKERS_ENV",
    "ConfigError",
    "ExperimentConfig",
    "ValidationReport",
    "parse_mass",
    "format_mass",
    "load_config",
    "validate_config",
    "config_from_dict",
]

WORKERS_ENV = "AMPBREAK_WORKERS"

EXPERIMENTS = {
    "uniform-oracle": "MC moments of the uniform mode against 1/(1 - q lam t)",
    "straight-oracle": "MC moments without kinetic term against prod_j (1 - q lam mu_j)^-1",
    "slope-lemma2": "growth slope of ln|E|^q in ||s||^2 against q lam H, per mass and potential",
    "mu-optimize": "mu_opt by separable and path search, mu_straight, lambda_q at several probes",
    "g-support": "mollified distribution g and its support against [a, b]",
    "fk-crosscheck": "Feynman-Kac path average against the spectral solver at imaginary mass",
    "prop1-sweep": "lambda sweep across lambda_q for several masses with stability diagnostics",
    "prop2-joint": "nested moments over potential and coefficients across lambda_q",
}

# per-experiment overrides of the global defaults below
_EXPERIMENT_DEFAULTS: dict[str, dict[str, Any]] = {
    "uniform-oracle": {"modes.recipe": "uniform", "run.masses": ["1"]},
    "straight-oracle": {"modes.recipe": "plane-wave-pair", "run.masses": ["inf"]},
    "slope-lemma2": {"modes.recipe": "moving-hotspot", "grid.points": [128],
                     "time.n_steps": 4000, "run.masses": ["1", "i", "1+i"],
                     "potential.kind": "frozen-gaussian"},
    "mu-optimize": {"modes.recipe": "moving-hotspot"},
    "g-support": {"modes.recipe": "plane-wave-pair", "grid.points": [128],
                  "time.n_steps": 1000, "run.masses": ["i"],
                  "potential.kind": "frozen-gaussian"},
    "fk-crosscheck": {"modes.recipe": "moving-hotspot", "run.masses": ["i"],
                      "potential.kind": "frozen-gaussian"},
    "prop1-sweep": {"modes.recipe": "moving-hotspot", "run.masses": ["1", "i", "1+2i"],
                    "run.lam_fractions": [0.5, 0.8, 0.95, 1.05, 1.25],
                    "run.n_samples": 2000, "run.tilt": "auto"},
    "prop2-joint": {"modes.recipe": "moving-hotspot", "run.masses": ["i"],
                    "potential.kind": "time-dependent-gaussian",
                    "run.lam_fractions": [0.8, 1.2], "run.tilt": "auto"},
}

# dotted key -> (default, description with units)
DEFAULTS: dict[str, tuple[Any, str]] = {
    "grid.dim": (1, "torus dimension (1 to 3)"),
    "grid.side_lengths": ([1.0], "torus side lengths, length units"),
    "grid.points": ([64], "grid points per axis (even)"),
    "time.t_end": (1.0, "final time, time units"),
    "time.n_steps": (200, "number of solver steps (dt = t_end / n_steps)"),
    "modes.recipe": ("uniform", "modal recipe name"),
    "modes.params": ({}, "recipe keyword parameters"),
    "potential.kind": ("zero", "zero | frozen-gaussian | time-dependent-gaussian"),
    "potential.correlation_length": (0.1, "Gaussian correlation length, length units"),
    "potential.correlation_time": (None, "correlation time, time units (default: the length)"),
    "potential.amplitude": (1.0, "standard deviation of rho, inverse time units"),
    "potential.seed": (0, "seed offset of the potential realization"),
    "run.masses": (["1"], "complex masses as strings, e.g. '1', 'i', '1+2i', 'inf'"),
    "run.q": ([1], "moment orders"),
    "run.lam": ("auto", "coupling list, or 'auto' for lam_fractions times lambda_q"),
    "run.lam_fractions": ([0.2, 0.5, 0.8], "multiples of lambda_q used when lam = 'auto'"),
    "run.n_samples": (10000, "Monte Carlo samples per estimate"),
    "run.n_outer": (20, "outer potential realizations (prop2-joint)"),
    "run.n_inner": (500, "inner coefficient samples per realization (prop2-joint)"),
    "run.tilt": ("off", "importance tilt beta in [0,1), 'auto' or 'off'"),
    "run.chunk_size": (1000, "samples per RNG chunk"),
    "run.probes": ("auto", "probe points, or 'auto' for 5 points incl. the hotspot endpoint"),
    "run.gains": ([2000.0, 4000.0, 8000.0, 16000.0, 32000.0],
                  "slope fit targets lam ||s||^2 mu, natural-log units"),
    "run.n_potentials": (3, "potential realizations for slope-lemma2"),
    "run.delta": (0.08, "mollifier width on the u axis (g-support)"),
    "run.n_eta": (512, "eta grid size (g-support)"),
    "run.fk_paths": (10000, "Brownian paths (fk-crosscheck)"),
    "run.restarts": (10, "annealing restarts (mu-optimize)"),
    "run.knots": (32, "path knots (mu-optimize)"),
    "run.workers": (1, f"worker threads; ${WORKERS_ENV} sets the default"),
    "output.dir": (None, "output directory (default: runs/<experiment>)"),
}

_SECTIONS = {"grid", "time", "modes", "potential", "run", "output"}
_POTENTIALS = {"zero", "frozen-gaussian", "time-dependent-gaussian"}


class ConfigError(ValueError):
    """Configuration problem; ``messages`` lists every issue found."""

    def __init__(self, messages: list[str]):
        self.messages = list(messages)
        super().__init__("\n".join(self.messages))


def parse_mass(text) -> complex:
    """``'1'``, ``'i'``, ``'1+2i'``, ``'2i'`` or ``'inf'`` (no kinetic term)."""
    if isinstance(text, (int, float, complex)) and not isinstance(text, bool):
        return complex(text)
    t = str(text).strip().lower().replace(" ", "")
    if t in ("inf", "infinity"):
        return complex(float("inf"), 0.0)
    t = re.sub(r"(?<![0-9.])i", "1i", t).replace("i", "j")
    return complex(t)


def format_mass(m: complex) -> str:
    m = complex(m)
    if m.real == float("inf"):
        return "inf"
    re_, im = m.real, m.imag
    if im == 0:
        return f"{re_:g}"
    if re_ == 0:
        return f"{im:g}i"
    return f"{re_:g}{im:+g}i"


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    values: dict[str, Any]
    defaulted: list[str] = field(default_factory=list)
    source: str | None = None

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def masses(self) -> list[complex]:
        return [parse_mass(m) for m in self.values["run.masses"]]

    @property
    def out_dir(self) -> Path:
        d = self.values["output.dir"]
        return Path(d) if d else Path("runs") / self.experiment

    def resolved(self) -> dict:
        """Nested dict of the merged configuration, as recorded in manifests."""
        out: dict[str, Any] = {"experiment": self.experiment, "seed": self.seed}
        for key, val in self.values.items():
            sec, name = key.split(".", 1)
            out.setdefault(sec, {})[name] = val
        return out

    def with_overrides(self, *, seed=None, workers=None, out=None) -> "ExperimentConfig":
        c = copy.deepcopy(self)
        if seed is not None:
            c.seed = int(seed)
        if workers is not None:
            c.values["run.workers"] = int(workers)
            if "run.workers" in c.defaulted:
                c.defaulted.remove("run.workers")
        if out is not None:
            c.values["output.dir"] = str(out)
            if "output.dir" in c.defaulted:
                c.defaulted.remove("output.dir")
        return c


def _line_of(text: str | None, section: str | None, key: str) -> str:
    if not text:
        return ""
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            continue
        if re.match(rf"^{re.escape(key)}\s*=", s) and current == section:
            return f"line {no}: "
    return ""


def _default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError([f"environment variable {WORKERS_ENV}={env!r} is not an integer"])
    return 1


def _check_types(values: dict, text: str | None, errs: list[str]) -> None:
    def err(key, msg):
        sec, name = key.split(".", 1)
        errs.append(f"{_line_of(text, sec, name)}{key}: {msg}")

    def posint(key, v):
        if not (isinstance(v, int) and not isinstance(v, bool) and v > 0):
            err(key, f"expected a positive integer, got {v!r}")
            return False
        return True

    def posnum(key, v):
        if not (isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0):
            err(key, f"expected a positive number, got {v!r}")
            return False
        return True

    dim = values["grid.dim"]
    if posint("grid.dim", dim) and dim > 3:
        err("grid.dim", f"dim {dim} exceeds supported scope d<=3")
    for key in ("grid.side_lengths", "grid.points"):
        v = values[key]
        if not isinstance(v, list) or len(v) != dim:
            err(key, f"expected a list with {dim} entries, got {v!r}")
    for v in values["grid.side_lengths"] if isinstance(values["grid.side_lengths"], list) else []:
        posnum("grid.side_lengths", v)
    for v in values["grid.points"] if isinstance(values["grid.points"], list) else []:
        if posint("grid.points", v) and v % 2:
            err("grid.points", f"point counts must be even, got {v}")
    posnum("time.t_end", values["time.t_end"])
    posint("time.n_steps", values["time.n_steps"])
    if values["modes.recipe"] not in RECIPES:
        err("modes.recipe", f"unknown recipe {values['modes.recipe']!r}; known: {sorted(RECIPES)}")
    if not isinstance(values["modes.params"], dict):
        err("modes.params", "expected a table")
    if values["potential.kind"] not in _POTENTIALS:
        err("potential.kind", f"unknown potential kind {values['potential.kind']!r}")
    posnum("potential.correlation_length", values["potential.correlation_length"])
    if values["potential.correlation_time"] is not None:
        posnum("potential.correlation_time", values["potential.correlation_time"])
    if not isinstance(values["potential.amplitude"], (int, float)):
        err("potential.amplitude", "expected a number")
    if not isinstance(values["potential.seed"], int):
        err("potential.seed", "expected an integer")
    masses = values["run.masses"]
    if not isinstance(masses, list) or not masses:
        err("run.masses", "expected a nonempty list")
    else:
        for m in masses:
            try:
                mm = parse_mass(m)
            except ValueError:
                err("run.masses", f"cannot parse mass {m!r}")
                continue
            if mm == 0 or mm.imag < 0:
                err("run.masses", f"mass {m!r} must be nonzero with Im(m) >= 0")
    qs = values["run.q"]
    if not isinstance(qs, list) or not qs:
        err("run.q", "expected a nonempty list")
    else:
        for q in qs:
            posint("run.q", q)
    lam = values["run.lam"]
    if lam != "auto":
        if not isinstance(lam, list) or not lam or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) and v >= 0 for v in lam):
            err("run.lam", "expected 'auto' or a list of nonnegative numbers")
    fr = values["run.lam_fractions"]
    if not isinstance(fr, list) or not fr or not all(isinstance(v, (int, float)) and v >= 0 for v in fr):
        err("run.lam_fractions", "expected a list of nonnegative numbers")
    for key in ("run.n_samples", "run.n_inner"):
        if posint(key, values[key]) and values[key] < 100:
            err(key, "must be at least 100")
    for key in ("run.n_outer", "run.chunk_size", "run.n_potentials", "run.n_eta",
                "run.restarts", "run.knots", "run.workers"):
        posint(key, values[key])
    if posint("run.fk_paths", values["run.fk_paths"]) and values["run.fk_paths"] < 100:
        err("run.fk_paths", "must be at least 100")
    tilt = values["run.tilt"]
    if not (tilt in ("auto", "off") or (isinstance(tilt, (int, float)) and 0 <= tilt < 1)):
        err("run.tilt", "expected 'auto', 'off' or a number in [0, 1)")
    probes = values["run.probes"]
    if probes != "auto":
        if not isinstance(probes, list) or not probes or not all(
                isinstance(p, list) and len(p) == dim for p in probes):
            err("run.probes", f"expected 'auto' or a list of points with {dim} coordinates")
    gains = values["run.gains"]
    if not isinstance(gains, list) or len(gains) < 4 or any(
            not isinstance(g, (int, float)) for g in gains) or any(
            b <= a for a, b in zip(gains, gains[1:])):
        err("run.gains", "expected at least 4 strictly increasing numbers")
    posnum("run.delta", values["run.delta"])
    d = values["output.dir"]
    if d is not None and not isinstance(d, str):
        err("output.dir", "expected a path string")


def config_from_dict(raw: dict, text: str | None = None, source: str | None = None) -> ExperimentConfig:
    """Merge ``raw`` (nested sections) with the defaults and validate."""
    errs: list[str] = []
    exp = raw.get("experiment")
    if exp is None:
        errs.append("experiment: missing (one of " + ", ".join(EXPERIMENTS) + ")")
    elif exp not in EXPERIMENTS:
        errs.append(f"{_line_of(text, None, 'experiment')}experiment: unknown experiment {exp!r}")
    seed = raw.get("seed")
    if seed is None:
        errs.append("seed: missing; a master seed is mandatory")
    elif not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errs.append(f"{_line_of(text, None, 'seed')}seed: expected a nonnegative integer")
    for key in raw:
        if key not in ("experiment", "seed") and key not in _SECTIONS:
            errs.append(f"{_line_of(text, None, key)}{key}: unknown top-level key")
    values: dict[str, Any] = {}
    defaulted: list[str] = []
    overrides = _EXPERIMENT_DEFAULTS.get(exp, {}) if isinstance(exp, str) else {}
    known = set(DEFAULTS)
    for sec in _SECTIONS:
        tab = raw.get(sec, {})
        if not isinstance(tab, dict):
            errs.append(f"{sec}: expected a table")
            continue
        for name in tab:
            if f"{sec}.{name}" not in known:
                errs.append(f"{_line_of(text, sec, name)}{sec}.{name}: unknown key")
    for key, (default, _) in DEFAULTS.items():
        sec, name = key.split(".", 1)
        tab = raw.get(sec, {})
        if isinstance(tab, dict) and name in tab:
            values[key] = tab[name]
        else:
            if key == "run.workers":
                try:
                    values[key] = _default_workers()
                except ConfigError as e:
                    errs.extend(e.messages)
                    values[key] = 1
            else:
                values[key] = copy.deepcopy(overrides.get(key, default))
            defaulted.append(key)
    if not errs:
        _check_types(values, text, errs)
    if errs:
        raise ConfigError(errs)
    return ExperimentConfig(exp, int(seed), values, defaulted, source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError([f"{path}: {e}"]) from None
    return config_from_dict(raw, text, str(path))


@dataclass
class ValidationReport:
    ok: bool
    errors: list[str]
    defaulted: list[tuple[str, Any, str]]

    def to_text(self) -> str:
        lines = ["valid" if self.ok else "invalid"]
        lines += [f"error: {e}" for e in self.errors]
        if self.defaulted:
            lines.append(f"{len(self.defaulted)} defaulted fields:")
            lines += [f"  {k} = {v!r}  # {d}" for k, v, d in self.defaulted]
        return "\n".join(lines)


def validate_config(path) -> ValidationReport:
    """Check a config file; lists every field that fell back to its default."""
    try:
        cfg = load_config(path)
    except ConfigError as e:
        return ValidationReport(False, e.messages, [])
    rows = [(k, cfg.values[k], DEFAULTS[k][1]) for k in cfg.defaulted]
    return ValidationReport(True, [], rows)
