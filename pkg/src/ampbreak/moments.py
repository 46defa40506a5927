"""Monte Carlo moments of the amplified field and the associated checks.

A finite sample never diverges, so "divergent" is a convention here:
``diverged_flag`` is ``q * lam * mu_hat >= 1`` with ``mu_hat`` from the
separable optimizer.  The empirical diagnostics (running mean, Hill tail
index of the ``|E|^q`` samples) are reported alongside.

Sampling loops are split into fixed-size chunks, each with its own RNG
stream spawned from the master seed, so results do not depend on the number
of workers.  All accumulation is done on log values with ``logsumexp``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .evolve import check_mass, solve_amplifier, solve_psi
from .lattice import (ModalSet, PotentialField, PotentialSpec, sample_gaussian_batch,
                      synthesize_potential)
from .spectrum import (CriticalCouplingReport, constant_path, critical_coupling, gamma_field,
                       gram_along_path, h_direction, optimize_mu, support_endpoints)

__all__ = [
    "MomentEstimate",
    "SlopeFit",
    "GSupportReport",
    "DivergentMomentError",
    "mc_moment",
    "mc_moment_joint",
    "exact_moment_straight",
    "growth_slope",
    "estimate_lambda_q",
    "g_support_numeric",
    "auto_tilt",
    "hill_tail_index",
]


class DivergentMomentError(ArithmeticError):
    """The requested moment is infinite (``q lam mu_1 >= 1``)."""


@dataclass
class MomentEstimate:
    """Sample estimate of ``<|E(x,t)|^q>``.

    ``log_mean`` is always finite for finite samples; ``mean`` is
    ``exp(log_mean)`` and may be ``inf`` for astronomically large moments.
    """

    q: int
    lam: float
    n_samples: int
    log_mean: float
    std_error: float
    diverged_flag: bool
    criterion: str
    mu_hat: float
    tilt: float = 0.0
    running_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tail_index: float | None = None
    n_outer: int | None = None

    @property
    def mean(self) -> float:
        with np.errstate(over="ignore"):
            return float(np.exp(self.log_mean))

    def running_variation(self, tail_fraction: float = 0.5) -> float:
        """Relative spread (max - min) / final of the running mean over its last part."""
        rm = np.asarray(self.running_mean)
        if rm.size < 2:
            return 0.0
        tail = rm[int(np.floor(rm.size * (1 - tail_fraction))):]
        return float((tail.max() - tail.min()) / abs(rm[-1]))

    def csv_row(self) -> dict:
        return {"q": self.q, "lambda": repr(self.lam), "n_samples": self.n_samples,
                "mean": repr(self.mean), "log_mean": repr(self.log_mean),
                "std_error": repr(self.std_error), "diverged_flag": self.diverged_flag,
                "mu_hat": repr(self.mu_hat), "tilt": repr(self.tilt),
                "tail_index": "" if self.tail_index is None else repr(self.tail_index)}


def _log_stats(logv: np.ndarray) -> tuple[float, float]:
    n = logv.size
    lm1 = float(logsumexp(logv) - np.log(n))
    if n < 2:
        return lm1, 0.0
    lm2 = float(logsumexp(2 * logv) - np.log(n))
    rel = max(np.expm1(lm2 - 2 * lm1), 0.0)
    with np.errstate(over="ignore"):
        se = float(np.exp(lm1) * np.sqrt(rel / (n - 1)))
    return lm1, se


def _running_mean(logv: np.ndarray, n_points: int = 20) -> np.ndarray:
    """Running mean of ``exp(logv)`` at ``n_points`` evenly spaced sample counts."""
    cum = np.logaddexp.accumulate(logv)
    ends = np.unique(np.linspace(logv.size / n_points, logv.size, n_points).astype(int))
    with np.errstate(over="ignore"):
        return np.exp(cum[ends - 1] - np.log(ends))


def hill_tail_index(logv: np.ndarray, k: int | None = None) -> float | None:
    """Hill estimate of the tail index of ``exp(logv)`` from the top ``k`` samples."""
    v = np.sort(np.asarray(logv))[::-1]
    if v.size < 20:
        return None
    k = k or max(10, v.size // 50)
    gaps = v[:k] - v[k]
    m = float(np.mean(gaps))
    return 1.0 / m if m > 0 else None


def auto_tilt(c: float) -> float:
    """Radial tilt ``beta`` for a moment whose growth exponent is ``c = q lam mu``.

    Any ``beta > 2c - 1`` gives a finite-variance estimator; this takes the
    midpoint between that bound and ``c``.
    """
    if c <= 1.0 / 3.0:
        return 0.0
    return float(min(0.95, (3 * c - 1) / 2))


def _snap_probe(modal_set: ModalSet, probe) -> tuple[tuple[int, ...], np.ndarray]:
    grid = modal_set.grid
    idx = grid.nearest_index(probe)
    return idx, grid.coordinates(idx)


def _resolve_mu(modal_set, probe_xy, mu_hat):
    if mu_hat is not None:
        return float(mu_hat)
    rep = optimize_mu(gamma_field(modal_set), probe_xy, method="separable")
    return rep.mu_opt


def _chunks(n: int, size: int) -> list[int]:
    out = [size] * (n // size)
    if n % size:
        out.append(n % size)
    return out


def _resolve_tilt(tilt, c: float) -> float:
    if tilt is None:
        return 0.0
    if tilt == "auto":
        return auto_tilt(c)
    beta = float(tilt)
    if not 0.0 <= beta < 1.0:
        raise ValueError("tilt must lie in [0, 1)")
    return beta


def _amplifier_log_values(q, lam, mass, modal_set, potential, idx, s):
    state = solve_amplifier(modal_set, s, potential, lam, mass)
    return q * state.log_abs()[(slice(None),) + idx]


def mc_moment(q: int, lam: float, mass, modal_set: ModalSet, potential: PotentialField | None,
              probe, n_samples: int, seed: int, *, mu_hat: float | None = None, tilt=None,
              chunk_size: int = 1000, workers: int = 1, keep_samples: bool = False) -> MomentEstimate:
    """Estimate ``<|E(x,t; s, rho)|^q>_s`` for a fixed potential realization.

    ``tilt`` enables importance sampling of ``||s||^2``: coefficients are
    drawn with variance ``1/(1-beta)`` and reweighted by
    ``(1-beta)^-M exp(-beta ||s||^2)``.  ``"auto"`` chooses ``beta`` from
    ``q lam mu_hat``.  ``mass=numpy.inf`` drops the kinetic term.
    """
    if int(q) != q or q < 1:
        raise ValueError("q must be a positive integer")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    check_mass(mass)
    q = int(q)
    idx, xy = _snap_probe(modal_set, probe)
    mu = _resolve_mu(modal_set, xy, mu_hat)
    c = q * lam * mu
    diverged = bool(c >= 1.0)
    criterion = f"q*lam*mu_hat = {c:.6g} {'>=' if diverged else '<'} 1"

    if lam == 0:
        # the field does not depend on s
        logv = _amplifier_log_values(q, 0.0, mass, modal_set, potential, idx,
                                     np.zeros((1, modal_set.M)))
        return MomentEstimate(q, 0.0, n_samples, float(logv[0]), 0.0, diverged, criterion, mu,
                              0.0, np.full(1, np.exp(logv[0])), None)

    beta = _resolve_tilt(tilt, c)
    M = modal_set.M
    sizes = _chunks(n_samples, chunk_size)
    streams = np.random.SeedSequence(seed).spawn(len(sizes))

    def run(i):
        s = sample_gaussian_batch(M, sizes[i], streams[i])
        logw = 0.0
        if beta > 0:
            s = s / np.sqrt(1 - beta)
            logw = -M * np.log1p(-beta) - beta * np.sum(np.abs(s) ** 2, axis=1)
        return _amplifier_log_values(q, lam, mass, modal_set, potential, idx, s) + logw

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, range(len(sizes))))
    else:
        parts = [run(i) for i in range(len(sizes))]
    logv = np.concatenate(parts)
    lm, se = _log_stats(logv)
    running = _running_mean(logv)
    est = MomentEstimate(q, float(lam), n_samples, lm, se, diverged, criterion, mu, beta,
                         running, hill_tail_index(logv))
    if keep_samples:
        est.samples = logv
    return est


def mc_moment_joint(q: int, lam: float, mass, modal_set: ModalSet, potential_spec: PotentialSpec,
                    probe, n_outer: int, n_inner: int, seed: int, *, mu_hat: float | None = None,
                    tilt=None, chunk_size: int = 1000, workers: int = 1) -> MomentEstimate:
    """Nested estimate of ``<|E|^q>_{rho, s}``: outer potentials, inner coefficients.

    The reported standard error is that of the mean of the inner means,
    which accounts for both levels of sampling.  ``running_mean`` is indexed
    by outer sample.
    """
    if n_outer < 1:
        raise ValueError("n_outer must be positive")
    idx, xy = _snap_probe(modal_set, probe)
    mu = _resolve_mu(modal_set, xy, mu_hat)
    outer_ss, inner_ss = np.random.SeedSequence(seed).spawn(2)
    pot_seeds = outer_ss.generate_state(n_outer)
    inner_seeds = inner_ss.generate_state(n_outer)
    logs = []
    est = None
    for o in range(n_outer):
        pot = synthesize_potential(modal_set.grid, modal_set.time_grid,
                                   potential_spec.with_seed(int(pot_seeds[o])))
        est = mc_moment(q, lam, mass, modal_set, pot, xy, n_inner, int(inner_seeds[o]),
                        mu_hat=mu, tilt=tilt, chunk_size=chunk_size, workers=workers)
        logs.append(est.log_mean)
    logs = np.array(logs)
    lm = float(logsumexp(logs) - np.log(n_outer))
    rel = np.exp(logs - lm)
    se = float(np.exp(lm) * (np.std(rel, ddof=1) / np.sqrt(n_outer))) if n_outer > 1 else 0.0
    running = np.exp(lm) * np.cumsum(rel) / np.arange(1, n_outer + 1)
    return MomentEstimate(int(q), float(lam), n_outer * n_inner, lm, se, est.diverged_flag,
                          est.criterion, mu, est.tilt, running, None, n_outer)


def exact_moment_straight(q: int, lam: float, modal_set: ModalSet, probe) -> float:
    """``prod_j (1 - q lam mu_j)^-1`` over the eigenvalues of ``Gamma`` at a fixed point.

    This is ``<|E|^q>_s`` when the kinetic term is absent, since then
    ``|E|^q = exp(q lam s^H Gamma_x s)`` for a circular Gaussian ``s``.
    """
    if lam == 0:
        return 1.0
    _, xy = _snap_probe(modal_set, probe)
    G = gram_along_path(gamma_field(modal_set), constant_path(xy, modal_set.time_grid.t_end))
    ev = np.linalg.eigvalsh(G)
    c = q * lam * ev
    if np.max(c) >= 1:
        raise DivergentMomentError(f"divergent moment: q*lam*mu_1 = {np.max(c):.6g} >= 1")
    return float(np.prod(1.0 / (1.0 - c)))


@dataclass
class SlopeFit:
    """Fit of ``ln|E|^q`` against ``||s||^2`` along one direction.

    ``slope`` uses the ``n_top`` largest radii; the ``*_full`` fields use all of
    them.  ``target`` is ``q lam H(shat)``.
    """

    direction: np.ndarray
    radii: np.ndarray
    log_values: np.ndarray
    slope: float
    intercept: float
    slope_full: float
    intercept_full: float
    r2: float
    target: float
    H: float
    q: int
    lam: float
    flagged: bool

    @property
    def relative_error(self) -> float:
        return (self.slope - self.target) / self.target

    @property
    def H_fit(self) -> float:
        return self.slope / (self.q * self.lam)

    def csv_row(self) -> dict:
        return {"slope": repr(self.slope), "intercept": repr(self.intercept),
                "slope_full": repr(self.slope_full), "r2": repr(self.r2),
                "target": repr(self.target), "H": repr(self.H),
                "relative_error": repr(self.relative_error), "flagged": self.flagged}


def growth_slope(direction, radii, q: int, lam: float, mass, modal_set: ModalSet,
                 potential: PotentialField | None, probe, *, n_top: int = 3,
                 H: float | None = None) -> SlopeFit:
    """Least-squares slope of ``ln|E(x,t; r shat)|^q`` versus ``r^2``."""
    radii = np.asarray(radii, dtype=float)
    if radii.size < 4 or np.any(np.diff(radii) <= 0):
        raise ValueError("need at least 4 strictly increasing radii")
    d = np.asarray(direction, dtype=complex)
    d = d / np.linalg.norm(d)
    idx, _ = _snap_probe(modal_set, probe)
    s = radii[:, None] * d[None, :]
    state = solve_amplifier(modal_set, s, potential, lam, mass)
    logv = q * state.log_abs()[(slice(None),) + idx]
    if not np.all(np.isfinite(logv)):
        raise FloatingPointError("field at the probe underflowed relative to the spatial maximum; "
                                 "move the probe or refine the grid")
    r2v = radii ** 2
    A = np.vstack([r2v, np.ones_like(r2v)]).T
    (sf, icf), *_ = np.linalg.lstsq(A, logv, rcond=None)
    pred = A @ np.array([sf, icf])
    ss_res = float(np.sum((logv - pred) ** 2))
    ss_tot = float(np.sum((logv - logv.mean()) ** 2))
    rsq = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    top = slice(radii.size - n_top, radii.size)
    (st, ict), *_ = np.linalg.lstsq(A[top], logv[top], rcond=None)
    if H is None:
        H = h_direction(gamma_field(modal_set), d).value
    return SlopeFit(d, radii, logv, float(st), float(ict), float(sf), float(icf), rsq,
                    q * lam * H, float(H), int(q), float(lam), bool(rsq < 0.99))


def _slope_directions(report: CriticalCouplingReport, M: int, n_random: int, rng) -> list:
    dirs = []
    if report.best_direction is not None:
        dirs.append(np.asarray(report.best_direction))
    if M == 1:
        return dirs or [np.ones(1, dtype=complex)]
    dirs += [np.eye(M, dtype=complex)[n] for n in range(M)]
    for _ in range(n_random):
        z = rng.standard_normal(M) + 1j * rng.standard_normal(M)
        dirs.append(z / np.linalg.norm(z))
    return dirs


def estimate_lambda_q(q, modal_set: ModalSet, probe, mass, potential: PotentialField | None, *,
                      report: CriticalCouplingReport | None = None, directions=None,
                      n_random_directions: int = 4, gains=(2000.0, 4000.0, 8000.0, 16000.0, 32000.0),
                      seed: int = 0, method: str = "separable") -> CriticalCouplingReport:
    """Critical couplings from ``mu_opt`` and from growth-slope fits.

    ``gains`` are the target values of ``lam ||s||^2 mu_hat`` (natural-log
    units) at which the amplifier is solved along each direction.  The slope
    estimate is ``1 / (q H*)`` with ``H*`` the largest fitted
    ``slope / (q lam)``; it is a lower-bound flavoured cross-check since only
    finitely many directions are sampled.
    """
    qs = tuple(int(v) for v in np.atleast_1d(q))
    _, xy = _snap_probe(modal_set, probe)
    gm = gamma_field(modal_set)
    if report is None:
        report = optimize_mu(gm, xy, method=method, q=qs, seed=seed)
    else:
        report.q_values = tuple(sorted(set(report.q_values) | set(qs)))
    mu = report.mu_opt
    rng = np.random.default_rng(seed)
    dirs = directions if directions is not None else _slope_directions(report, modal_set.M,
                                                                       n_random_directions, rng)
    lam = 1.0
    radii = np.sqrt(np.asarray(gains, dtype=float) / (lam * mu))
    H_star = -np.inf
    for k, d in enumerate(dirs):
        d = np.asarray(d, dtype=complex)
        d = d / np.linalg.norm(d)
        H = h_direction(gm, d).value
        fit = growth_slope(d, radii, 1, lam, mass, modal_set, potential, xy, H=H)
        report.H_dir[k] = {"direction": d, "H": H, "H_fit": fit.H_fit}
        H_star = max(H_star, fit.H_fit)
    report.H_star = float(H_star)
    for qq in qs:
        report.lambda_slope[qq] = critical_coupling(qq, H_star)
    report.methods["slope"] = f"growth-slope fits over {len(dirs)} directions"
    return report


@dataclass
class GSupportReport:
    """Mollified one-dimensional distribution ``g`` on the u axis."""

    u: np.ndarray
    g: np.ndarray
    a: float
    b: float
    delta: float
    outside_mass: float
    right_edge: float
    left_edge: float
    threshold: float

    @property
    def right_edge_error(self) -> float:
        return self.right_edge - self.b


def _trapz_between(u, f, lo, hi) -> float:
    """Trapezoid integral of samples ``f(u)`` over ``[lo, hi]`` with interpolated ends."""
    inner = (u > lo) & (u < hi)
    uu = np.concatenate([[lo], u[inner], [hi]])
    ff = np.concatenate([[np.interp(lo, u, f)], f[inner], [np.interp(hi, u, f)]])
    return float(np.sum(0.5 * (ff[1:] + ff[:-1]) * np.diff(uu)))


def g_support_numeric(modal_set: ModalSet, direction, mass, potential: PotentialField | None,
                      eta_max: float, n_eta: int, delta: float, probe, *,
                      threshold: float = 1e-3, n_u: int = 4096) -> GSupportReport:
    """Locate the support of ``g`` whose Fourier transform is ``Psi(x,t; eta)``.

    ``Psi`` is computed on a symmetric real eta grid, multiplied by the
    Gaussian window ``exp(-delta^2 eta^2 / 2)`` (a unit-mass Gaussian of width
    ``delta`` on the u axis) and transformed back by trapezoid quadrature.
    Reports the fraction of ``int |g_delta|`` outside ``[a - 3 delta, b + 3 delta]``
    and the outermost points where ``|g_delta|`` exceeds ``threshold`` times its
    maximum.
    """
    if n_eta < 256:
        raise ValueError("n_eta must be at least 256")
    if delta <= 2 * np.pi / eta_max:
        raise ValueError("mollifier width must exceed 2 pi / eta_max")
    d = np.asarray(direction, dtype=complex)
    d = d / np.linalg.norm(d)
    a, b = support_endpoints(gamma_field(modal_set), d)
    eta = np.linspace(-eta_max, eta_max, n_eta)
    d_eta = eta[1] - eta[0]
    period = 2 * np.pi / d_eta
    if period < (b - a) + 16 * delta:
        raise ValueError(
            f"window too narrow for grid: u-period {period:.4g} must exceed "
            f"b - a + 16 delta = {(b - a) + 16 * delta:.4g}; increase n_eta")
    idx, _ = _snap_probe(modal_set, probe)
    state = solve_psi(modal_set, d, eta, potential, mass)
    psi = state.physical()[(slice(None),) + idx]
    w = np.exp(-0.5 * (delta * eta) ** 2)
    quad = np.full(n_eta, d_eta)
    quad[0] = quad[-1] = d_eta / 2
    centre = 0.5 * (a + b)
    u = centre + (np.arange(n_u) / n_u - 0.5) * period
    g = (np.exp(1j * np.outer(u, eta)) @ (psi * w * quad)) / (2 * np.pi)
    mag = np.abs(g)
    du = u[1] - u[0]
    total = float(np.sum(mag) * du)  # periodic trapezoid
    frac = 1.0 - _trapz_between(u, mag, a - 3 * delta, b + 3 * delta) / total if total > 0 else 0.0
    frac = max(frac, 0.0)
    sig = np.nonzero(mag >= threshold * mag.max())[0]
    return GSupportReport(u, g, a, b, delta, frac, float(u[sig[-1]]), float(u[sig[0]]), threshold)
