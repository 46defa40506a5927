"""Named experiments.  Each writes CSVs into an output directory plus a manifest.

Every stochastic step draws its seed from the master seed and the position
of the step in the experiment (mass index, q, lambda index, ...), so outputs
do not depend on the worker count or on which experiments ran before.
"""

from __future__ import annotations

import platform
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import EXPERIMENTS, ExperimentConfig, config_from_dict, format_mass
from .evolve import feynman_kac_psi, solve_amplifier, solve_psi
from .export import read_manifest, sha256_file, write_csv, write_manifest
from .lattice import (PotentialSpec, make_time_grid, make_torus_grid, synthesize_modal_set,
                      synthesize_potential)
from .moments import (exact_moment_straight, g_support_numeric, growth_slope, mc_moment,
                      mc_moment_joint)
from .spectrum import (constant_path, gamma_field, gram_along_path, h_direction, optimize_mu)

__all__ = ["run_experiment", "replay", "ReplayResult", "default_probes", "task_seed"]

MANIFEST = "manifest.json"

UNITS = {
    "length": "torus side-length units of grid.side_lengths",
    "time": "units of time.t_end",
    "lambda": "inverse (driver intensity x time); the driver has unit mean intensity",
    "mu": "time units (integrated intensity)",
    "mass": "dimensionless complex coefficient of the kinetic term (i/2m) Laplacian",
    "rho": "inverse time units",
    "log values": "natural logarithm",
}


def task_seed(master: int, *path: int) -> int:
    """Deterministic 64-bit seed for the task at ``path`` under ``master``."""
    return int(np.random.SeedSequence([master, *path]).generate_state(1, np.uint64)[0])


def default_probes(grid, recipe: str, params: dict, t: float, count: int = 5) -> list[np.ndarray]:
    """``count`` grid points spread along axis 0, the first at the hotspot track end (or origin)."""
    L = np.array(grid.side_lengths)
    start = np.zeros(grid.dim)
    if recipe == "moving-hotspot":
        v = params.get("velocity")
        v = np.eye(grid.dim)[0] if v is None else np.atleast_1d(np.asarray(v, float))
        c0 = np.atleast_1d(np.asarray(params.get("center", np.zeros(grid.dim)), float))
        start = (c0 + v * t) % L
    pts = []
    for k in range(count):
        p = start.copy()
        p[0] = (p[0] + k * L[0] / count) % L[0]
        pts.append(grid.coordinates(grid.nearest_index(p)))
    return pts


@dataclass
class _Context:
    cfg: ExperimentConfig
    out: Path
    grid: object
    tg: object
    modal: object
    probes: list
    workers: int
    files: list = field(default_factory=list)
    derived: dict = field(default_factory=dict)

    def csv(self, name, header, rows):
        write_csv(self.out / name, header, rows)
        self.files.append(name)

    def text(self, name, body: str):
        (self.out / name).write_text(body)
        self.files.append(name)

    def potential(self, kind=None, seed_offset: int = 0):
        c = self.cfg
        kind = kind or c["potential.kind"]
        spec = PotentialSpec(kind, c["potential.correlation_length"],
                             c["potential.correlation_time"], c["potential.amplitude"],
                             c["potential.seed"] + seed_offset)
        return synthesize_potential(self.grid, self.tg, spec)

    def potential_spec(self):
        c = self.cfg
        return PotentialSpec(c["potential.kind"], c["potential.correlation_length"],
                             c["potential.correlation_time"], c["potential.amplitude"],
                             c["potential.seed"])

    def potentials(self):
        """``[(label, field)]``: zero and, if configured, realizations of the potential."""
        out = [("zero", None)]
        if self.cfg["potential.kind"] != "zero":
            n = self.cfg["run.n_potentials"] if self.cfg.experiment == "slope-lemma2" else 1
            out += [(f"{self.cfg['potential.kind']}#{k}", self.potential(seed_offset=k))
                    for k in range(n)]
        return out

    def mu_hat(self, probe) -> float:
        rep = optimize_mu(gamma_field(self.modal), probe, method="separable",
                          seed=task_seed(self.cfg.seed, 9000))
        return rep.mu_opt

    def lambdas(self, q: int, mu: float) -> list[float]:
        lam = self.cfg["run.lam"]
        if lam == "auto":
            return [f / (q * mu) for f in self.cfg["run.lam_fractions"]]
        return [float(v) for v in lam]

    @property
    def tilt(self):
        t = self.cfg["run.tilt"]
        return None if t == "off" else t


def _probe_str(p) -> str:
    return " ".join(repr(float(v)) for v in np.atleast_1d(p))


def _dir_str(d) -> str:
    return " ".join(f"{complex(z).real!r}{complex(z).imag:+}j" for z in d)


def _uniform_oracle(ctx: _Context):
    c = ctx.cfg
    x = ctx.probes[0]
    t = ctx.tg.t_end
    mu = ctx.mu_hat(x)
    ctx.derived["mu_hat"] = mu
    rows = []
    for im, m in enumerate(c.masses):
        pot = ctx.potential()
        # uniform mode: E = exp(lam |s|^2 t) u with u the lam = 0 solution
        u0 = solve_amplifier(ctx.modal, np.zeros(ctx.modal.M), pot, 0.0, m)
        log_u = float(u0.log_abs()[ctx.grid.nearest_index(x)])
        for q in c["run.q"]:
            for il, lam in enumerate(ctx.lambdas(q, mu)):
                est = mc_moment(q, lam, m, ctx.modal, pot, x, c["run.n_samples"],
                                task_seed(c.seed, 1, im, q, il), mu_hat=mu, tilt=ctx.tilt,
                                chunk_size=c["run.chunk_size"], workers=ctx.workers)
                qlt = q * lam * t
                oracle = np.exp(q * log_u) / (1 - qlt) if qlt < 1 else np.inf
                z = (est.mean - oracle) / est.std_error if est.std_error > 0 and np.isfinite(oracle) else np.nan
                rows.append([format_mass(m), q, lam, lam * t, est.mean, est.std_error, oracle,
                             z, est.diverged_flag, est.tilt, est.tail_index])
    ctx.csv("uniform_oracle.csv", ["mass", "q", "lambda", "lambda_t", "mc_mean", "std_error",
                                   "oracle", "z_score", "diverged_flag", "tilt", "tail_index"], rows)


def _straight_oracle(ctx: _Context):
    c = ctx.cfg
    x = ctx.probes[0]
    G = gram_along_path(gamma_field(ctx.modal), constant_path(x, ctx.tg.t_end))
    ev = np.linalg.eigvalsh(G)[::-1]
    mu1 = float(ev[0])
    ctx.derived["mu_straight_probe"] = mu1
    ctx.derived["gram_eigenvalues"] = [float(v) for v in ev]
    pot = ctx.potential()
    rows = []
    for q in c["run.q"]:
        for il, lam in enumerate(ctx.lambdas(q, mu1)):
            est = mc_moment(q, lam, np.inf, ctx.modal, pot, x, c["run.n_samples"],
                            task_seed(c.seed, 2, q, il), mu_hat=mu1, tilt=ctx.tilt,
                            chunk_size=c["run.chunk_size"], workers=ctx.workers)
            cq = q * lam * mu1
            exact = exact_moment_straight(q, lam, ctx.modal, x) if cq < 1 else np.inf
            z = (est.mean - exact) / est.std_error if est.std_error > 0 and np.isfinite(exact) else np.nan
            rows.append([q, lam, cq, est.mean, est.std_error, exact, z, est.diverged_flag, est.tilt])
    ctx.csv("straight_oracle.csv", ["q", "lambda", "q_lambda_mu1", "mc_mean", "std_error",
                                    "exact", "z_score", "diverged_flag", "tilt"], rows)


def _directions(ctx: _Context, probe) -> list[np.ndarray]:
    M = ctx.modal.M
    rep = optimize_mu(gamma_field(ctx.modal), probe, method="separable",
                      seed=task_seed(ctx.cfg.seed, 9000))
    dirs = [np.asarray(rep.best_direction, dtype=complex)]
    if M > 1:
        dirs += [np.eye(M, dtype=complex)[n] for n in range(M)]
    return dirs


def _slope_lemma2(ctx: _Context):
    c = ctx.cfg
    x = ctx.probes[0]
    gm = gamma_field(ctx.modal)
    mu = ctx.mu_hat(x)
    ctx.derived["mu_hat"] = mu
    lam = 1.0 if c["run.lam"] == "auto" else float(c["run.lam"][0])
    radii = np.sqrt(np.asarray(c["run.gains"], float) / (lam * mu))
    dirs = _directions(ctx, x)
    Hs = [h_direction(gm, d).value for d in dirs]
    fits, series, summary = [], [], []
    for im, m in enumerate(c.masses):
        for label, pot in ctx.potentials():
            best = -np.inf
            for k, (d, H) in enumerate(zip(dirs, Hs)):
                for q in c["run.q"]:
                    f = growth_slope(d, radii, q, lam, m, ctx.modal, pot, x, H=H)
                    best = max(best, f.H_fit)
                    fits.append([format_mass(m), label, k, _dir_str(d), q, lam, f.slope,
                                 f.slope_full, f.r2, f.target, H, f.relative_error, f.flagged])
                    series += [[format_mass(m), label, k, q, r, r * r, v]
                               for r, v in zip(radii, f.log_values)]
            for q in c["run.q"]:
                lq, ls = 1 / (q * mu), 1 / (q * best)
                summary.append([format_mass(m), label, q, lq, ls, (ls - lq) / lq])
    ctx.csv("slope_fits.csv", ["mass", "potential", "direction_index", "direction", "q", "lambda",
                               "slope", "slope_full", "r2", "target", "H", "relative_error",
                               "flagged"], fits)
    ctx.csv("slope_series.csv", ["mass", "potential", "direction_index", "q", "radius",
                                 "radius_squared", "log_abs_E_q"], series)
    ctx.csv("lambda_slope.csv", ["mass", "potential", "q", "lambda_q", "lambda_q_slope",
                                 "relative_gap"], summary)


def _mu_optimize(ctx: _Context):
    c = ctx.cfg
    gm = gamma_field(ctx.modal)
    rows, sweep = [], []
    first = None
    for k, x in enumerate(ctx.probes):
        rep = optimize_mu(gm, x, method="both", q=tuple(c["run.q"]), knots=c["run.knots"],
                          restarts=c["run.restarts"], seed=task_seed(c.seed, 4, k),
                          workers=ctx.workers)
        first = first or rep
        straight = float(rep.mu_straight[ctx.grid.nearest_index(x)])
        rows.append([k, _probe_str(x), rep.mu_path, rep.mu_separable, rep.mu_opt, straight,
                     rep.mu_straight_max, rep.path_gap, rep.path_converged])
        sweep += [[k, q, lq] for q, lq in rep.lambda_q.items()]
        ctx.text(f"report_probe{k}.txt", rep.to_text())
    ctx.derived["mu_hat"] = first.mu_opt
    ctx.csv("mu_optimize.csv", ["probe_index", "probe", "mu_path", "mu_separable", "mu_opt",
                                "mu_straight_probe", "mu_straight_max", "path_gap",
                                "path_converged"], rows)
    ctx.csv("lambda_q.csv", ["probe_index", "q", "lambda_q"], sweep)
    tt = np.linspace(0, ctx.tg.t_end, 4 * len(first.best_path.knot_times))
    pos = first.best_path.positions(tt) % np.array(ctx.grid.side_lengths)
    ctx.csv("best_path_probe0.csv", ["time"] + [f"x{a}" for a in range(ctx.grid.dim)],
            [[t] + list(p) for t, p in zip(tt, pos)])
    flat = first.mu_straight.ravel()
    coords = [ctx.grid.coordinates(np.unravel_index(i, ctx.grid.shape)) for i in range(flat.size)]
    ctx.csv("mu_straight_field.csv", [f"x{a}" for a in range(ctx.grid.dim)] + ["mu_straight"],
            [list(p) + [v] for p, v in zip(coords, flat)])


def _g_support(ctx: _Context):
    c = ctx.cfg
    x = ctx.probes[0]
    d = np.eye(ctx.modal.M, dtype=complex)[0]
    delta = c["run.delta"]
    eta_max = 3 * 2 * np.pi / delta
    rows, curves = [], []
    for im, m in enumerate(c.masses):
        for label, pot in ctx.potentials():
            r = g_support_numeric(ctx.modal, d, m, pot, eta_max, c["run.n_eta"], delta, x)
            rows.append([format_mass(m), label, r.a, r.b, delta, eta_max, r.outside_mass,
                         r.left_edge, r.right_edge, r.right_edge_error / delta])
            curves += [[format_mass(m), label, u, g.real, g.imag, abs(g)]
                       for u, g in zip(r.u[::4], r.g[::4])]
    ctx.csv("g_support.csv", ["mass", "potential", "a", "b", "delta", "eta_max", "outside_mass",
                              "left_edge", "right_edge", "right_edge_error_over_delta"], rows)
    ctx.csv("g_curves.csv", ["mass", "potential", "u", "g_re", "g_im", "g_abs"], curves)


def _fk_crosscheck(ctx: _Context):
    c = ctx.cfg
    x = ctx.probes[0]
    pot = ctx.potential()
    d = np.eye(ctx.modal.M, dtype=complex)[0]
    idx = ctx.grid.nearest_index(x)
    rows = []
    for im, m in enumerate(c.masses):
        if m.real != 0 or m.imag <= 0:
            raise ValueError(f"fk-crosscheck needs purely imaginary masses, got {format_mass(m)}")
        gamma = m.imag
        for ik, (y, kappa) in enumerate([(1.0, 0.0), (1.0, 1.0)]):
            h = None if kappa == 0 else (lambda a, k=kappa: np.exp(-k * a))
            fk = feynman_kac_psi(pot, x, gamma, y, n_paths=c["run.fk_paths"],
                                 rng=task_seed(c.seed, 6, im, ik), h=h,
                                 modal_set=ctx.modal, direction=d)
            ps = solve_psi(ctx.modal, d, -1j * kappa, pot, m, potential_scale=-1j * y)
            spec = complex(ps.physical()[idx])
            rows.append([format_mass(m), y, kappa, fk.mean, fk.std_error, spec.real, spec.imag,
                         (fk.mean - spec.real) / fk.std_error if fk.std_error > 0 else np.nan])
    ctx.csv("fk_crosscheck.csv", ["mass", "y", "kappa", "fk_mean", "fk_std_error",
                                  "spectral_re", "spectral_im", "z_score"], rows)


def _prop1_sweep(ctx: _Context):
    c = ctx.cfg
    x = ctx.probes[0]
    mu = ctx.mu_hat(x)
    ctx.derived["mu_hat"] = mu
    for im, m in enumerate(c.masses):
        for ip, (label, pot) in enumerate(ctx.potentials()):
            rows = []
            for q in c["run.q"]:
                lq = 1 / (q * mu)
                for il, lam in enumerate(ctx.lambdas(q, mu)):
                    est = mc_moment(q, lam, m, ctx.modal, pot, x, c["run.n_samples"],
                                    task_seed(c.seed, 7, im, ip, q, il), mu_hat=mu,
                                    tilt=ctx.tilt, chunk_size=c["run.chunk_size"],
                                    workers=ctx.workers)
                    rel = est.std_error / est.mean if est.mean > 0 and np.isfinite(est.mean) else np.nan
                    rows.append([q, lam, lam / lq, q * lam * mu, est.log_mean, est.std_error, rel,
                                 est.tail_index, est.running_variation(), est.tilt,
                                 est.diverged_flag])
            name = f"prop1_sweep_m={format_mass(m)}_rho={label.replace('#', '')}.csv"
            ctx.csv(name, ["q", "lambda", "lambda_over_lambda_q", "q_lambda_mu_hat", "log_mean",
                           "std_error", "relative_std_error", "tail_index",
                           "running_variation", "tilt", "diverged_flag"], rows)


def _prop2_joint(ctx: _Context):
    c = ctx.cfg
    x = ctx.probes[0]
    mu = ctx.mu_hat(x)
    ctx.derived["mu_hat"] = mu
    spec = ctx.potential_spec()
    rows, running = [], []
    for im, m in enumerate(c.masses):
        for q in c["run.q"]:
            for il, lam in enumerate(ctx.lambdas(q, mu)):
                est = mc_moment_joint(q, lam, m, ctx.modal, spec, x, c["run.n_outer"],
                                      c["run.n_inner"], task_seed(c.seed, 8, im, q, il),
                                      mu_hat=mu, tilt=ctx.tilt, chunk_size=c["run.chunk_size"],
                                      workers=ctx.workers)
                rows.append([format_mass(m), q, lam, q * lam * mu, est.mean, est.std_error,
                             est.running_variation(), est.n_outer, c["run.n_inner"], est.tilt,
                             est.diverged_flag])
                running += [[format_mass(m), q, lam, k + 1, v]
                            for k, v in enumerate(est.running_mean)]
    ctx.csv("prop2_joint.csv", ["mass", "q", "lambda", "q_lambda_mu_hat", "mean", "std_error",
                                "running_variation", "n_outer", "n_inner", "tilt",
                                "diverged_flag"], rows)
    ctx.csv("prop2_running_mean.csv", ["mass", "q", "lambda", "outer_index", "running_mean"],
            running)


_RUNNERS = {
    "uniform-oracle": _uniform_oracle,
    "straight-oracle": _straight_oracle,
    "slope-lemma2": _slope_lemma2,
    "mu-optimize": _mu_optimize,
    "g-support": _g_support,
    "fk-crosscheck": _fk_crosscheck,
    "prop1-sweep": _prop1_sweep,
    "prop2-joint": _prop2_joint,
}
assert set(_RUNNERS) == set(EXPERIMENTS)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Run ``cfg`` and return the output directory holding CSVs and ``manifest.json``."""
    out = Path(out_dir) if out_dir is not None else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    grid = make_torus_grid(cfg["grid.dim"], cfg["grid.side_lengths"], cfg["grid.points"])
    tg = make_time_grid(cfg["time.t_end"], cfg["time.n_steps"])
    modal = synthesize_modal_set(grid, tg, cfg["modes.recipe"], **cfg["modes.params"])
    probes = cfg["run.probes"]
    if probes == "auto":
        probes = default_probes(grid, cfg["modes.recipe"], cfg["modes.params"], tg.t_end)
    else:
        probes = [grid.coordinates(grid.nearest_index(p)) for p in probes]
    ctx = _Context(cfg, out, grid, tg, modal, probes, cfg["run.workers"])
    _RUNNERS[cfg.experiment](ctx)
    if "mu_hat" in ctx.derived:
        ctx.derived["lambda_q"] = {str(q): 1 / (q * ctx.derived["mu_hat"]) for q in cfg["run.q"]}
    ctx.derived["probes"] = [[float(v) for v in p] for p in probes]
    manifest = {
        "artifact": "ampbreak",
        "artifact_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "config": cfg.resolved(),
        "defaulted_fields": list(cfg.defaulted),
        "derived": ctx.derived,
        "units": UNITS,
        "wall_clock_seconds": round(time.perf_counter() - t0, 3),
        "files": {name: sha256_file(out / name) for name in ctx.files},
    }
    write_manifest(out / MANIFEST, manifest)
    return out


def _config_from_manifest(manifest: dict) -> ExperimentConfig:
    raw = dict(manifest["config"])
    return config_from_dict(raw, source="manifest")


@dataclass
class ReplayResult:
    out_dir: Path
    mismatches: list[tuple[str, str]]

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def to_text(self) -> str:
        if self.ok:
            return f"replay into {self.out_dir}: all files byte-identical"
        lines = [f"replay into {self.out_dir}: {len(self.mismatches)} mismatch(es)"]
        lines += [f"mismatch: {name}: {why}" for name, why in self.mismatches]
        return "\n".join(lines)


def replay(manifest_path, out_dir=None, *, workers: int | None = None) -> ReplayResult:
    """Re-run the configuration recorded in a manifest and compare checksums.

    Regenerated files are compared with the manifest checksums, and the files
    next to the manifest (the original run) are compared as well, so both a
    nondeterministic rerun and an edited output are reported by name.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST
    manifest = read_manifest(manifest_path)
    cfg = _config_from_manifest(manifest)
    if workers is not None:
        cfg = cfg.with_overrides(workers=workers)
    src = manifest_path.parent
    out = Path(out_dir) if out_dir is not None else src / "replay"
    if out.resolve() == src.resolve():
        raise ValueError("replay output directory must differ from the original run")
    if out.exists():
        if out_dir is not None and any(out.iterdir()) and not (out / MANIFEST).exists():
            raise ValueError(f"refusing to overwrite non-empty directory {out} that holds no run")
        shutil.rmtree(out)
    run_experiment(cfg, out)
    mismatches = []
    for name, digest in manifest["files"].items():
        new = out / name
        if not new.exists():
            mismatches.append((name, "not regenerated"))
            continue
        if sha256_file(new) != digest:
            mismatches.append((name, "regenerated file differs from manifest checksum"))
        orig = src / name
        if not orig.exists():
            mismatches.append((name, "original file missing"))
        elif sha256_file(orig) != digest:
            mismatches.append((name, "original file differs from manifest checksum"))
    return ReplayResult(out, mismatches)
