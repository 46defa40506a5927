"""Split-step spectral integration of the amplifier and Schrodinger forms.

Both equations are of the form ``d_t u = (i / 2m) Lap u + a(x, t) u`` with
``u(x, 0) = 1``:

* amplifier: ``a = lam |S|^2 - i rho``
* Schrodinger form: ``a = -i (z rho + eta U)`` with ``U = |sum_n shat_n Phi_n|^2``

Fields are advanced with Strang splitting (half kinetic, full multiplicative
at the step midpoint, half kinetic).  Large amplitudes are carried as a
per-field scalar log offset so that near-threshold runs never overflow.

``feynman_kac_psi`` is an independent Monte Carlo route for purely imaginary
mass ``m = i gamma``, where the kinetic term is a heat semigroup with
diffusivity ``1 / (2 gamma)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy import ndimage

from .lattice import ModalSet, PotentialField, TorusGrid, TimeGrid, _coefficients, _rng

__all__ = [
    "FieldState",
    "Trajectory",
    "FKEstimate",
    "SolverOverflowError",
    "check_mass",
    "kinetic_factors",
    "step_strang",
    "solve_amplifier",
    "solve_psi",
    "direction_intensity",
    "feynman_kac_psi",
]

RESCALE_ABOVE = 1e100
FACTOR_OUT_ABOVE = 300.0


class SolverOverflowError(FloatingPointError):
    """Raised when a step produces non-finite values."""


def check_mass(mass) -> complex:
    """Validate a mass in the closed upper half plane minus the origin.

    ``numpy.inf`` is accepted and means no kinetic term (straight paths only).
    """
    m = complex(mass)
    if np.isinf(m.real) or np.isinf(m.imag):
        return complex(np.inf)
    if m == 0:
        raise ValueError("mass must be nonzero")
    if abs(m) < 1e-150:
        raise ValueError(f"|m| = {abs(m):.3g} is too small to form 1/m in floating point")
    if m.imag < 0:
        raise ValueError(f"mass must have Im(m) >= 0, got {m}")
    return m


def kinetic_factors(grid: TorusGrid, mass, dt: float) -> np.ndarray:
    """Spectral multipliers ``exp(-i k^2 dt / 2m)`` in FFT layout."""
    m = check_mass(mass)
    if np.isinf(m.real):
        return np.ones(grid.shape, dtype=complex)
    f = np.exp(-1j * grid.k_squared() * (dt / (2 * m)))
    f.flat[0] = 1.0
    return f


@dataclass(frozen=True, eq=False)
class FieldState:
    """Complex field at one time, possibly batched over leading axes.

    The physical field is ``values * exp(log_offset)``; ``log_offset`` has
    the batch shape.
    """

    values: np.ndarray
    time: float
    log_offset: np.ndarray = field(default_factory=lambda: np.zeros(()))

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return np.shape(self.log_offset)

    def physical(self) -> np.ndarray:
        off = np.asarray(self.log_offset)
        return self.values * np.exp(off.reshape(off.shape + (1,) * (self.values.ndim - off.ndim)))

    def log_abs(self) -> np.ndarray:
        off = np.asarray(self.log_offset)
        off = off.reshape(off.shape + (1,) * (self.values.ndim - off.ndim))
        with np.errstate(divide="ignore"):
            return np.log(np.abs(self.values)) + off

    def l2_norm(self, grid: TorusGrid) -> np.ndarray:
        axes = tuple(range(self.values.ndim - grid.dim, self.values.ndim))
        return np.sqrt(np.sum(np.abs(self.physical()) ** 2, axis=axes) * grid.cell_volume)


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    values: list = field(default_factory=list)
    log_offsets: list = field(default_factory=list)

    def append(self, state: FieldState) -> None:
        self.times.append(state.time)
        self.values.append(np.array(state.values))
        self.log_offsets.append(np.array(state.log_offset))


def _spatial_axes(values: np.ndarray, dim: int) -> tuple[int, ...]:
    return tuple(range(values.ndim - dim, values.ndim))


def _apply_kinetic(values, half_kinetic, dim):
    axes = _spatial_axes(values, dim)
    return sfft.ifftn(sfft.fftn(values, axes=axes) * half_kinetic, axes=axes)


def _multiply(values, offset, term, dt, grid: TorusGrid, step_index=None, time=0.0):
    """Exact ``exp(a dt)`` with the largest real gain factored into the log offset."""
    axes = _spatial_axes(values, grid.dim)
    expand = (slice(None),) * np.ndim(offset) + (None,) * grid.dim
    gain = np.asarray(term) * dt
    peak = np.max(np.broadcast_to(gain.real, values.shape), axis=axes)
    shift = np.where(peak > FACTOR_OUT_ABOVE, peak, 0.0)
    if np.any(shift):
        gain = gain - shift[expand]
        offset = offset + shift
    values = values * np.exp(gain)
    if not np.all(np.isfinite(values)):
        where = "" if step_index is None else f" at step {step_index}"
        raise SolverOverflowError(
            f"non-finite field{where} (t={time:.6g}); "
            f"largest multiplicative gain Re(a) dt = {float(np.max(peak)):.4g}")
    return values, offset


def _renormalize(values, offset, grid: TorusGrid):
    axes = _spatial_axes(values, grid.dim)
    amp = np.max(np.abs(values), axis=axes)
    rescale = (amp > RESCALE_ABOVE) | ((amp < 1 / RESCALE_ABOVE) & (amp > 0))
    if np.any(rescale):
        r = np.where(rescale, amp, 1.0)
        values = values / r[(slice(None),) * np.ndim(offset) + (None,) * grid.dim]
        offset = offset + np.log(r)
    return values, offset


def step_strang(state: FieldState, grid: TorusGrid, mass, term, dt: float, *,
                half_kinetic: np.ndarray | None = None, step_index: int | None = None) -> FieldState:
    """One Strang step: half kinetic, exact ``exp(a dt)``, half kinetic.

    ``term`` is the multiplicative coefficient sampled at the step midpoint,
    broadcastable to ``state.values``.
    """
    m = check_mass(mass)
    straight = np.isinf(m.real)
    if half_kinetic is None and not straight:
        half_kinetic = kinetic_factors(grid, m, dt / 2)
    values = state.values
    offset = np.array(state.log_offset, dtype=float)
    if not straight:
        values = _apply_kinetic(values, half_kinetic, grid.dim)
    values, offset = _multiply(values, offset, term, dt, grid, step_index, state.time + dt)
    if not straight:
        values = _apply_kinetic(values, half_kinetic, grid.dim)
    values, offset = _renormalize(values, offset, grid)
    return FieldState(values, state.time + dt, offset)


def _evolve(grid: TorusGrid, time_grid: TimeGrid, mass, term_at, batch_shape,
            trajectory: bool = False, snapshot_every: int = 1):
    # Adjacent half kinetic steps are fused into one full step except where a
    # snapshot is taken; the result is the same Strang scheme.
    m = check_mass(mass)
    dt = time_grid.dt
    n = time_grid.n_steps
    straight = np.isinf(m.real)
    half = full = None
    if not straight:
        half = kinetic_factors(grid, m, dt / 2)
        full = half * half
    values = np.ones(tuple(batch_shape) + grid.shape, dtype=complex)
    offset = np.zeros(tuple(batch_shape))
    traj = Trajectory() if trajectory else None
    if traj is not None:
        traj.append(FieldState(values, 0.0, offset))
    pending_half = False
    for j in range(n):
        if not straight:
            values = _apply_kinetic(values, full if pending_half else half, grid.dim)
        values, offset = _multiply(values, offset, term_at(j), dt, grid, j, (j + 1) * dt)
        snap = traj is not None and ((j + 1) % snapshot_every == 0 or j + 1 == n)
        pending_half = not straight
        if not straight and (snap or j + 1 == n):
            values = _apply_kinetic(values, half, grid.dim)
            pending_half = False
        values, offset = _renormalize(values, offset, grid)
        if snap:
            t = time_grid.t_end if j + 1 == n else (j + 1) * dt
            traj.append(FieldState(values, t, offset))
    # keep the exact end time rather than the accumulated sum
    state = FieldState(values, time_grid.t_end, offset)
    return (state, traj) if trajectory else state


def _check_compatible(modal_set: ModalSet, potential: PotentialField | None):
    if potential is None:
        return
    if potential.grid != modal_set.grid or potential.time_grid != modal_set.time_grid:
        raise ValueError("potential and modal set live on different lattices")


def solve_amplifier(modal_set: ModalSet, sample, potential: PotentialField | None,
                    lam: float, mass, *, trajectory: bool = False, snapshot_every: int = 1):
    """Evolve ``d_t E = (i/2m) Lap E + (lam |S|^2 - i rho) E`` from ``E = 1``.

    ``sample`` is a coefficient vector ``(M,)`` or a batch ``(B, M)``.  Pass
    ``mass=numpy.inf`` to drop the kinetic term.  Returns the final
    :class:`FieldState` (and a :class:`Trajectory` if requested).
    """
    if lam < 0:
        raise ValueError("coupling must be nonnegative")
    _check_compatible(modal_set, potential)
    s = _coefficients(sample)
    if s.shape[-1] != modal_set.M:
        raise ValueError(f"sample has length {s.shape[-1]}, modal set has M={modal_set.M}")
    batch = s.shape[:-1]
    mids = modal_set.midpoints
    has_rho = potential is not None and not potential.is_zero

    def term(j):
        S = np.tensordot(s, mids[j], axes=([-1], [0]))
        a = lam * (S.real ** 2 + S.imag ** 2)
        if has_rho:
            a = a - 1j * potential.midpoints[j]
        return a

    return _evolve(modal_set.grid, modal_set.time_grid, mass, term, batch,
                   trajectory, snapshot_every)


def direction_intensity(modal_set: ModalSet, direction, where: str = "midpoints") -> np.ndarray:
    """``U(x, tau; shat) = |sum_n shat_n Phi_n|^2`` for a unit direction."""
    d = np.asarray(direction, dtype=complex)
    if d.shape != (modal_set.M,):
        raise ValueError("direction length must equal M")
    nrm = np.linalg.norm(d)
    if not np.isclose(nrm, 1.0, rtol=1e-10):
        raise ValueError(f"direction must be a unit vector (norm {nrm})")
    modes = {"nodes": modal_set.nodes, "midpoints": modal_set.midpoints}[where]
    return np.abs(np.tensordot(d, modes, axes=([0], [1]))) ** 2


def solve_psi(modal_set: ModalSet, direction, eta, potential: PotentialField | None, mass, *,
              potential_scale: complex = 1.0, trajectory: bool = False):
    """Solve the Schrodinger form with potential ``z rho + eta U(.; shat)``.

    ``i d_t Psi = -(1/2m) Lap Psi + (z rho + eta U) Psi``, ``Psi(x, 0) = 1``.
    ``eta`` may be complex and may be an array (batched solve).  At
    ``eta = i lam ||s||^2`` and ``shat = s/||s||`` this is the amplifier.
    """
    _check_compatible(modal_set, potential)
    U = direction_intensity(modal_set, direction)
    eta = np.asarray(eta, dtype=complex)
    batch = eta.shape
    eta_b = eta.reshape(batch + (1,) * modal_set.grid.dim)
    z = complex(potential_scale)
    has_rho = potential is not None and not potential.is_zero and z != 0

    def term(j):
        a = -1j * eta_b * U[j]
        if has_rho:
            a = a - 1j * z * potential.midpoints[j]
        return a

    return _evolve(modal_set.grid, modal_set.time_grid, mass, term, batch, trajectory)


# ---------------------------------------------------------------------------
# Feynman-Kac oracle


@dataclass(frozen=True)
class FKEstimate:
    mean: float
    std_error: float
    n_paths: int


def _periodic_sampler(grid: TorusGrid, slab: np.ndarray):
    coeffs = ndimage.spline_filter(slab, order=3, mode="grid-wrap")

    def at(points):
        idx = [points[..., ax] / h for ax, h in enumerate(grid.spacing)]
        return ndimage.map_coordinates(coeffs, idx, order=3, mode="grid-wrap", prefilter=False)
    return at


def feynman_kac_psi(potential: PotentialField, probe, gamma: float, y: float = 1.0, *,
                    n_paths: int = 10_000, rng=None, h=None,
                    modal_set: ModalSet | None = None, direction=None) -> FKEstimate:
    """Path-integral estimate of ``Psi`` at one probe point for ``m = i gamma``.

    Averages ``exp(-y int_0^t rho(x(tau), tau) dtau) * h(alpha[x])`` over
    Brownian paths with ``x(t) = probe`` and diffusivity ``1/(2 gamma)``
    (increment variance ``dt / gamma`` per lattice step), where
    ``alpha[x] = int_0^t U(x(tau), tau; shat) dtau``.  Time integrals use the
    trapezoid rule on the solver nodes.  ``h`` defaults to 1.
    """
    if n_paths < 100:
        raise ValueError("n_paths must be at least 100")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    grid, tg = potential.grid, potential.time_grid
    g = _rng(rng)
    x_end = np.atleast_1d(np.asarray(probe, dtype=float))
    n = tg.n_steps
    steps = g.standard_normal((n, n_paths, grid.dim)) * np.sqrt(tg.dt / gamma)
    # walk backwards from the pinned end point: pos[j] is the position at node j
    pos = np.empty((n + 1, n_paths, grid.dim))
    pos[n] = x_end
    pos[:n] = x_end + np.cumsum(steps[::-1], axis=0)[::-1]
    w = tg.trapezoid_weights()

    log_weight = np.zeros(n_paths)
    if not potential.is_zero and y != 0:
        if potential.frozen:
            at = _periodic_sampler(grid, np.asarray(potential.nodes[0]))
            vals = at(pos.reshape(-1, grid.dim)).reshape(n + 1, n_paths)
        else:
            vals = np.stack([_periodic_sampler(grid, np.asarray(potential.nodes[j]))(pos[j])
                             for j in range(n + 1)])
        log_weight = -y * np.tensordot(w, vals, axes=(0, 0))

    weight = np.exp(log_weight)
    if h is not None:
        if modal_set is None or direction is None:
            raise ValueError("h needs modal_set and direction to build alpha")
        U = direction_intensity(modal_set, direction, where="nodes")
        uvals = np.stack([_periodic_sampler(grid, U[j])(pos[j]) for j in range(n + 1)])
        alpha = np.tensordot(w, uvals, axes=(0, 0))
        weight = weight * np.asarray(h(alpha), dtype=float)
    mean = float(np.mean(weight))
    se = float(np.std(weight, ddof=1) / np.sqrt(n_paths))
    return FKEstimate(mean, se, n_paths)
