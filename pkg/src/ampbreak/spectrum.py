"""Gamma matrix, path functionals and the critical coupling.

For a driver ``S = sum_n s_n Phi_n`` the intensity is a Hermitian quadratic
form ``|S|^2 = s^H gamma s`` with ``gamma_nm = conj(Phi_n) Phi_m``.  Along a
path ``x(.)`` ending at ``x(t) = x`` the integrated matrix
``Gamma[x] = int_0^t gamma(x(tau), tau) dtau`` has the same nonzero spectrum
as the covariance operator of ``S`` restricted to the path, and

    mu_{x,t} = sup_paths  top_eig(Gamma[x]),      lambda_q = 1 / (q mu_{x,t}).

Paths have no speed limit, so the supremum over paths of a time integral is
the time integral of the per-slice maximum.  Swapping the path supremum with
the supremum over unit directions gives the endpoint-free reduction

    mu_{x,t} = sup_{|u|=1} int_0^t max_x u^H gamma(x, tau) u dtau,

which is the reference ("separable") estimate.  Simulated annealing over
piecewise-linear paths gives an independent lower bound.

Modal functions are band-limited below half-Nyquist (checked at
construction), so spectral interpolation and upsampling of ``Phi`` and
``gamma`` are exact up to round-off.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .lattice import ModalSet, TorusGrid, _coefficients

__all__ = [
    "knot_times",
    "GammaField",
    "PhiBasis",
    "PathPL",
    "HDirection",
    "BasisEndpoints",
    "CriticalCouplingReport",
    "gamma_field",
    "basis_labels",
    "phi_basis",
    "k_map",
    "make_path",
    "constant_path",
    "gram_along_path",
    "top_eig",
    "nystrom_covariance_eigs",
    "h_direction",
    "support_endpoints",
    "basis_endpoints",
    "separable_objective",
    "mu_straight_field",
    "optimize_mu",
    "critical_coupling",
]


# ---------------------------------------------------------------------------
# spectral helpers


def _spatial_axes(a: np.ndarray, dim: int) -> tuple[int, ...]:
    return tuple(range(a.ndim - dim, a.ndim))


def spectral_at(grid: TorusGrid, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trigonometric interpolation of per-time slices at one point per slice.

    ``values`` has shape ``(n, *C, *grid.shape)`` and ``points`` ``(n, dim)``;
    returns ``(n, *C)``.
    """
    axes = _spatial_axes(values, grid.dim)
    out = np.fft.fftn(values, axes=axes) / grid.size
    ks = grid.wavenumbers()
    for ax in reversed(range(grid.dim)):
        k = ks[ax].copy()
        k[grid.points[ax] // 2] = 0.0
        ph = np.exp(1j * k[None, :] * points[:, ax][:, None])
        out = np.einsum("n...k,nk->n...", out, ph)
    return out


def upsample(grid: TorusGrid, values: np.ndarray, factor: int) -> np.ndarray:
    """Band-limited resampling of the trailing spatial axes on a finer grid."""
    if factor == 1:
        return values
    out = values
    for ax, n in zip(_spatial_axes(values, grid.dim), grid.points):
        vh = np.fft.fft(out, axis=ax)
        shape = list(out.shape)
        shape[ax] = n * factor
        big = np.zeros(shape, dtype=complex)
        half = n // 2
        lo = [slice(None)] * out.ndim
        hi_src = [slice(None)] * out.ndim
        hi_dst = [slice(None)] * out.ndim
        lo[ax] = slice(0, half)
        hi_src[ax] = slice(n - half + 1, n)
        hi_dst[ax] = slice(n * factor - half + 1, n * factor)
        big[tuple(lo)] = vh[tuple(lo)]
        big[tuple(hi_dst)] = vh[tuple(hi_src)]
        out = np.fft.ifft(big, axis=ax) * factor
    return out.real if np.isrealobj(values) else out


# ---------------------------------------------------------------------------
# gamma and the real basis


@dataclass(frozen=True, eq=False)
class GammaField:
    """Pointwise ``gamma_nm = conj(Phi_n) Phi_m`` with shape ``(n_nodes, M, M, *shape)``."""

    modal_set: ModalSet
    nodes: np.ndarray
    left_limits: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.modal_set.M

    @property
    def grid(self) -> TorusGrid:
        return self.modal_set.grid

    @property
    def time_grid(self):
        return self.modal_set.time_grid

    def step_ends(self) -> tuple[np.ndarray, np.ndarray]:
        start = self.nodes[:-1]
        end = self.nodes[1:]
        if self.left_limits:
            end = end.copy()
            for j, v in self.left_limits.items():
                end[j - 1] = v
        return start, end


def _outer(phi: np.ndarray) -> np.ndarray:
    # (T, M, *shape) -> (T, M, M, *shape)
    return np.conj(phi[:, :, None]) * phi[:, None, :]


def gamma_field(modal_set: ModalSet) -> GammaField:
    nodes = _outer(modal_set.nodes)
    left = {j: _outer(v[None])[0] for j, v in modal_set.left_limits.items()}
    nodes.flags.writeable = False
    return GammaField(modal_set, nodes, left)


def basis_labels(M: int) -> list[tuple[str, int, int]]:
    """Ordering of the real basis: diagonals, then Re pairs, then Im pairs (n < m)."""
    pairs = [(n, m) for n in range(M) for m in range(n + 1, M)]
    return ([("diag", n, n) for n in range(M)] + [("re", n, m) for n, m in pairs]
            + [("im", n, m) for n, m in pairs])


@dataclass(frozen=True, eq=False)
class PhiBasis:
    """``N = M^2`` real functions, shape ``(N, n_nodes, *shape)``."""

    values: np.ndarray
    labels: list
    left_limits: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.values.shape[0]


def _phi_from_gamma(g: np.ndarray, labels) -> np.ndarray:
    # g (T, M, M, *shape) -> (N, T, *shape)
    out = []
    r2 = np.sqrt(2.0)
    for kind, n, m in labels:
        if kind == "diag":
            out.append(g[:, n, n].real)
        elif kind == "re":
            out.append(r2 * g[:, n, m].real)
        else:
            out.append(r2 * g[:, n, m].imag)
    return np.stack(out)


def phi_basis(gamma: GammaField) -> PhiBasis:
    labels = basis_labels(gamma.M)
    vals = _phi_from_gamma(gamma.nodes, labels)
    left = {j: _phi_from_gamma(v[None], labels)[:, 0] for j, v in gamma.left_limits.items()}
    return PhiBasis(vals, labels, left)


def k_map(sample) -> np.ndarray:
    """``k(s)``: ``|s_n|^2``, ``sqrt2 Re(s_n conj s_m)``, ``sqrt2 Im(s_n conj s_m)``.

    Accepts ``(M,)`` or a batch ``(B, M)``; ``||k(s)|| = ||s||^2``.
    """
    s = _coefficients(sample)
    M = s.shape[-1]
    r2 = np.sqrt(2.0)
    comps = []
    for kind, n, m in basis_labels(M):
        if kind == "diag":
            comps.append(np.abs(s[..., n]) ** 2)
        else:
            w = s[..., n] * np.conj(s[..., m])
            comps.append(r2 * (w.real if kind == "re" else w.imag))
    return np.stack(comps, axis=-1)


# ---------------------------------------------------------------------------
# paths


@dataclass(frozen=True, eq=False)
class PathPL:
    """Piecewise-linear path in lifted (unwrapped) coordinates.

    ``knot_positions`` has shape ``(K, dim)``; the last knot is the endpoint
    (up to a lattice translation of the torus).
    """

    knot_times: np.ndarray
    knot_positions: np.ndarray
    endpoint: np.ndarray

    def positions(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        return np.stack([np.interp(times, self.knot_times, self.knot_positions[:, ax])
                         for ax in range(self.knot_positions.shape[1])], axis=-1)


def make_path(knot_times, knot_positions, endpoint, side_lengths=None) -> PathPL:
    kt = np.asarray(knot_times, dtype=float)
    kp = np.asarray(knot_positions, dtype=float)
    if kp.ndim == 1:
        kp = kp[:, None]
    ep = np.atleast_1d(np.asarray(endpoint, dtype=float))
    if np.any(np.diff(kt) <= 0):
        raise ValueError("knot times must be strictly increasing")
    if kp.shape != (kt.size, ep.size):
        raise ValueError("knot_positions must have shape (K, dim)")
    diff = kp[-1] - ep
    if side_lengths is not None:
        L = np.asarray(side_lengths, dtype=float)
        diff = (diff + L / 2) % L - L / 2
    if np.max(np.abs(diff)) > 1e-12 * max(1.0, np.max(np.abs(ep))):
        raise ValueError("last knot must coincide with the endpoint x(t) = x")
    return PathPL(kt, kp, ep)


def constant_path(endpoint, t: float) -> PathPL:
    ep = np.atleast_1d(np.asarray(endpoint, dtype=float))
    return PathPL(np.array([0.0, t]), np.stack([ep, ep]), ep)


def _multilinear(grid: TorusGrid, values: np.ndarray, points: np.ndarray, factor: int = 1):
    """Periodic multilinear interpolation; ``values (n, C, *shape)``, ``points (n, dim)``."""
    n = values.shape[0]
    shape = values.shape[values.ndim - grid.dim:]
    spacing = [h / factor for h in grid.spacing]
    base, frac = [], []
    for ax in range(grid.dim):
        u = points[:, ax] / spacing[ax]
        f = np.floor(u)
        base.append(f.astype(int) % shape[ax])
        frac.append(u - f)
    rows = np.arange(n)
    out = 0.0
    for corner in range(2 ** grid.dim):
        wts = np.ones(n)
        idx = []
        for ax in range(grid.dim):
            bit = (corner >> ax) & 1
            idx.append((base[ax] + bit) % shape[ax])
            wts = wts * (frac[ax] if bit else 1 - frac[ax])
        vals = values[(rows, slice(None)) + tuple(idx)] if values.ndim > grid.dim + 1 \
            else values[(rows,) + tuple(idx)]
        out = out + vals * wts.reshape((n,) + (1,) * (np.ndim(vals) - 1))
    return out


def gram_along_path(gamma: GammaField, path: PathPL, interpolation: str = "spectral") -> np.ndarray:
    """``int_0^t gamma(x(tau), tau) dtau`` by the trapezoid rule on the time grid.

    ``interpolation`` is ``"spectral"`` (exact for the band-limited recipes) or
    ``"linear"`` (periodic multilinear on the lattice).
    """
    tg = gamma.time_grid
    pts = path.positions(tg.nodes)
    start, end = gamma.step_ends()
    M = gamma.M
    flat_s = start.reshape((tg.n_steps, M * M) + gamma.grid.shape)
    flat_e = end.reshape((tg.n_steps, M * M) + gamma.grid.shape)
    if interpolation == "spectral":
        gs = spectral_at(gamma.grid, flat_s, pts[:-1])
        ge = spectral_at(gamma.grid, flat_e, pts[1:])
    elif interpolation == "linear":
        gs = _multilinear(gamma.grid, flat_s, pts[:-1])
        ge = _multilinear(gamma.grid, flat_e, pts[1:])
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    G = 0.5 * tg.dt * (gs.sum(axis=0) + ge.sum(axis=0))
    G = G.reshape(M, M)
    return 0.5 * (G + G.conj().T)


def top_eig(A: np.ndarray) -> tuple[float, np.ndarray]:
    """Largest eigenvalue and unit eigenvector of a Hermitian matrix.

    The eigenvector's first non-negligible component is made real positive.
    """
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("need a square matrix")
    w, V = np.linalg.eigh(A)
    v = V[:, -1]
    i = int(np.argmax(np.abs(v) > 1e-12 * np.max(np.abs(v))))
    v = v * np.exp(-1j * np.angle(v[i]))
    return float(w[-1]), v


def nystrom_covariance_eigs(modal_set: ModalSet, path: PathPL, n_quad: int = 256,
                            rtol: float = 1e-10) -> np.ndarray:
    """Nonzero spectrum of the path covariance operator, descending.

    The kernel ``K(tau, tau') = sum_n Phi_n(x(tau), tau) conj(Phi_n(x(tau'), tau'))``
    is sampled at ``n_quad`` equispaced nodes with trapezoid weights; modal
    values are interpolated linearly in time and spectrally in space.
    """
    if n_quad < 8:
        raise ValueError("n_quad must be at least 8")
    tg = modal_set.time_grid
    taus = np.linspace(0.0, tg.t_end, n_quad)
    pts = path.positions(taus)
    u = taus / tg.dt
    j = np.minimum(np.floor(u + 1e-9).astype(int), tg.n_steps - 1)
    f = np.clip(u - j, 0.0, 1.0)
    start, end = modal_set.step_ends()
    a = spectral_at(modal_set.grid, start[j], pts)
    b = spectral_at(modal_set.grid, end[j], pts)
    B = (1 - f)[:, None] * a + f[:, None] * b  # (n_quad, M)
    K = B @ B.conj().T
    w = np.full(n_quad, tg.t_end / (n_quad - 1))
    w[0] = w[-1] = w[1] / 2
    sw = np.sqrt(w)
    A = sw[:, None] * K * sw[None, :]
    ev = np.linalg.eigvalsh(0.5 * (A + A.conj().T))[::-1]
    return ev[ev > rtol * max(ev[0], 0.0)] if ev[0] > 0 else ev[:0]


# ---------------------------------------------------------------------------
# direction-resolved quantities


def _unit(direction, M: int) -> np.ndarray:
    d = np.asarray(direction, dtype=complex).reshape(-1)
    if d.size != M:
        raise ValueError(f"direction must have length M={M}")
    nrm = np.linalg.norm(d)
    if not np.isclose(nrm, 1.0, rtol=1e-10):
        raise ValueError(f"direction must be a unit vector (norm {nrm})")
    return d


def _direction_steps(gamma: GammaField, d: np.ndarray):
    start, end = gamma.modal_set.step_ends()
    us = np.abs(np.tensordot(d, start, axes=([0], [1]))) ** 2
    ue = np.abs(np.tensordot(d, end, axes=([0], [1]))) ** 2
    return us, ue


def _slice_extrema(grid: TorusGrid, values: np.ndarray, factor: int):
    fine = upsample(grid, values, factor)
    axes = _spatial_axes(fine, grid.dim)
    return np.min(fine, axis=axes), np.max(fine, axis=axes)


@dataclass(frozen=True, eq=False)
class HDirection:
    value: float
    path_value: float
    path: PathPL


def _argmax_path(gamma: GammaField, d: np.ndarray, knots: int, endpoint, factor: int) -> PathPL:
    grid, tg = gamma.grid, gamma.time_grid
    nodes_u = np.abs(np.tensordot(d, gamma.modal_set.nodes, axes=([0], [1]))) ** 2
    kt = np.linspace(0.0, tg.t_end, knots)
    jj = np.rint(kt / tg.dt).astype(int)
    fine = upsample(grid, nodes_u[jj], factor)
    fine_spacing = np.array(grid.spacing) / factor
    L = np.array(grid.side_lengths)
    pos = []
    prev = None
    for sl in fine:
        idx = np.array(np.unravel_index(np.argmax(sl), sl.shape))
        p = idx * fine_spacing
        if prev is not None:
            p = prev + ((p - prev + L / 2) % L - L / 2)
        pos.append(p)
        prev = p
    pos = np.array(pos)
    if endpoint is not None:
        ep = np.atleast_1d(np.asarray(endpoint, dtype=float))
        pos[-1] = pos[-2] + ((ep - pos[-2] + L / 2) % L - L / 2)
    else:
        ep = pos[-1] % L
    return PathPL(kt, pos, ep)


def h_direction(gamma: GammaField, direction, *, endpoint=None, knots: int = 32,
                upsample_factor: int = 4) -> HDirection:
    """``H(shat) = int_0^t max_x U(x, tau; shat) dtau`` plus a path lower bound.

    The lower bound is ``int U`` along the piecewise-linear path through the
    per-slice maximizers at ``knots`` uniform times (ending at ``endpoint``
    when given).
    """
    d = _unit(direction, gamma.M)
    us, ue = _direction_steps(gamma, d)
    _, ms = _slice_extrema(gamma.grid, us, upsample_factor)
    _, me = _slice_extrema(gamma.grid, ue, upsample_factor)
    H = 0.5 * gamma.time_grid.dt * float(np.sum(ms + me))
    path = _argmax_path(gamma, d, knots, endpoint, upsample_factor)
    pv = float(np.real(np.conj(d) @ gram_along_path(gamma, path) @ d))
    return HDirection(H, pv, path)


def support_endpoints(gamma: GammaField, direction, *, upsample_factor: int = 4) -> tuple[float, float]:
    """``(a, b) = (int min_x U dtau, int max_x U dtau)``; ``b`` equals ``H(shat)``."""
    d = _unit(direction, gamma.M)
    us, ue = _direction_steps(gamma, d)
    lo_s, hi_s = _slice_extrema(gamma.grid, us, upsample_factor)
    lo_e, hi_e = _slice_extrema(gamma.grid, ue, upsample_factor)
    dt = gamma.time_grid.dt
    return 0.5 * dt * float(np.sum(lo_s + lo_e)), 0.5 * dt * float(np.sum(hi_s + hi_e))


@dataclass(frozen=True)
class BasisEndpoints:
    """Per-basis-function path extrema and the derived centring constants.

    ``c_i = -(a_i + b_i) / 2t`` and ``kappa_i = (b_i - a_i) / 2``.
    """

    labels: list
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    kappa: np.ndarray


def basis_endpoints(gamma: GammaField, *, upsample_factor: int = 4) -> BasisEndpoints:
    basis = phi_basis(gamma)
    tg = gamma.time_grid
    start = basis.values[:, :-1]
    end = basis.values[:, 1:].copy()
    for j, v in basis.left_limits.items():
        end[:, j - 1] = v
    a, b = [], []
    for i in range(basis.N):
        lo_s, hi_s = _slice_extrema(gamma.grid, start[i], upsample_factor)
        lo_e, hi_e = _slice_extrema(gamma.grid, end[i], upsample_factor)
        a.append(0.5 * tg.dt * np.sum(lo_s + lo_e))
        b.append(0.5 * tg.dt * np.sum(hi_s + hi_e))
    a, b = np.array(a), np.array(b)
    return BasisEndpoints(basis.labels, a, b, -(a + b) / (2 * tg.t_end), (b - a) / 2)


# ---------------------------------------------------------------------------
# critical coupling


def mu_straight_field(gamma: GammaField) -> np.ndarray:
    """Top eigenvalue of ``Gamma`` along the constant path at every grid point."""
    start, end = gamma.step_ends()
    G = 0.5 * gamma.time_grid.dt * (start.sum(axis=0) + end.sum(axis=0))  # (M, M, *shape)
    M = gamma.M
    Gm = np.moveaxis(G.reshape((M, M, -1)), -1, 0)
    w = np.linalg.eigvalsh(0.5 * (Gm + np.conj(np.swapaxes(Gm, 1, 2))))[:, -1]
    return w.reshape(gamma.grid.shape)


def separable_objective(gamma: GammaField, direction, upsample_factor: int = 4) -> float:
    """``int_0^t max_x u^H gamma u dtau`` for a unit vector ``u``."""
    return support_endpoints(gamma, direction, upsample_factor=upsample_factor)[1]


def _normalize_real(v: np.ndarray, M: int) -> np.ndarray:
    u = v[:M] + 1j * v[M:]
    n = np.linalg.norm(u)
    return u / n if n > 0 else np.eye(M, dtype=complex)[0]


def _separable_search(gamma: GammaField, rng: np.random.Generator, n_coarse: int,
                      n_refine: int, upsample_factor: int):
    M = gamma.M
    if M == 1:
        d = np.ones(1, dtype=complex)
        return separable_objective(gamma, d, upsample_factor), d
    start, end = gamma.modal_set.step_ends()
    dt = gamma.time_grid.dt
    axes_s = _spatial_axes(start[:, 0], gamma.grid.dim)

    def coarse(u):
        us = np.abs(np.tensordot(u, start, axes=([0], [1]))) ** 2
        ue = np.abs(np.tensordot(u, end, axes=([0], [1]))) ** 2
        return 0.5 * dt * float(np.sum(us.max(axis=axes_s) + ue.max(axis=axes_s)))

    cands = [np.eye(M, dtype=complex)[n] for n in range(M)]
    z = rng.standard_normal((n_coarse, 2 * M))
    cands += [_normalize_real(v, M) for v in z]
    # straight-path top eigenvectors at the best few points
    ms = mu_straight_field(gamma)
    Gs = 0.5 * dt * (gamma.step_ends()[0].sum(axis=0) + gamma.step_ends()[1].sum(axis=0))
    for flat in np.argsort(ms.reshape(-1))[::-1][:3]:
        idx = np.unravel_index(flat, gamma.grid.shape)
        cands.append(top_eig(Gs[(slice(None), slice(None)) + idx])[1])
    vals = np.array([coarse(u) for u in cands])
    order = np.argsort(vals)[::-1][:n_refine]

    def neg(v):
        return -separable_objective(gamma, _normalize_real(v, M), upsample_factor)

    best_val, best_u = -np.inf, None
    for i in order:
        u0 = cands[i]
        v0 = np.concatenate([u0.real, u0.imag])
        res = optimize.minimize(neg, v0, method="Nelder-Mead",
                                options={"xatol": 1e-7, "fatol": 1e-12, "maxiter": 4000})
        u = _normalize_real(res.x, M)
        val = separable_objective(gamma, u, upsample_factor)
        if val > best_val:
            best_val, best_u = val, u
    return best_val, best_u


class _PathObjective:
    """Fast evaluation of ``top_eig(Gamma[path])`` on an upsampled lattice."""

    def __init__(self, gamma: GammaField, factor: int = 4):
        ms = gamma.modal_set
        self.grid = ms.grid
        self.factor = factor
        self.tg = ms.time_grid
        self.fine = upsample(ms.grid, ms.nodes, factor)  # (T, M, *fine)
        self.w = self.tg.trapezoid_weights()

    def __call__(self, path_pts: np.ndarray) -> float:
        phi = _multilinear(self.grid, self.fine, path_pts, self.factor)  # (T, M)
        G = (np.conj(phi) * self.w[:, None]).T @ phi
        return float(np.linalg.eigvalsh(0.5 * (G + G.conj().T))[-1])


def _ridge_init(obj: _PathObjective, kt: np.ndarray, endpoint: np.ndarray, L: np.ndarray):
    """Knots following the maximum of ``sum |Phi|^2``, unwrapped on the torus.

    The track is shifted by a lattice vector so its last free knot is the
    image nearest the endpoint.
    """
    dens = np.sum(np.abs(obj.fine) ** 2, axis=1)  # (T, *fine)
    fine_h = np.array(obj.grid.spacing) / obj.factor
    idx = np.clip(np.searchsorted(obj.tg.nodes, kt), 0, obj.tg.n_nodes - 1)
    pts = np.array([np.array(np.unravel_index(np.argmax(dens[j]), dens.shape[1:])) * fine_h
                    for j in idx])
    for k in range(1, len(pts)):
        pts[k] = pts[k - 1] + (pts[k] - pts[k - 1] + L / 2) % L - L / 2
    if len(pts) > 1:
        pts += np.round((endpoint - pts[-2]) / L) * L
    return pts


@dataclass
class _AnnealResult:
    value: float
    knots: np.ndarray
    history_best: list


def _anneal(obj: _PathObjective, kt: np.ndarray, init: np.ndarray, endpoint: np.ndarray,
            rng: np.random.Generator, n_iter: int, L: np.ndarray) -> _AnnealResult:
    times = obj.tg.nodes
    K, d = init.shape

    def value(kp):
        pts = np.stack([np.interp(times, kt, kp[:, ax]) for ax in range(d)], axis=-1)
        return obj(pts)

    x = init.copy()
    x[-1] = endpoint
    cur = value(x)
    best, best_x = cur, x.copy()
    T0 = max(0.05 * abs(cur), 1e-3 * float(obj.tg.t_end))
    T_end = 1e-5 * T0
    cool = (T_end / T0) ** (1.0 / max(n_iter - 1, 1))
    T = T0
    step0 = 0.2 * L
    hist = []
    for it in range(n_iter):
        frac = it / max(n_iter - 1, 1)
        step = step0 * (1 - frac) + 2e-3 * L
        y = x.copy()
        r = rng.random()
        if r < 0.5:
            i = rng.integers(0, K - 1)
            y[i] += rng.normal(0.0, 1.0, d) * step
        elif r < 0.8:
            i = rng.integers(0, K - 1)
            j = rng.integers(i + 1, K)
            y[i:j] += rng.normal(0.0, 1.0, d) * step
        else:
            # shear: move early knots more than late ones, keeping the end fixed
            ramp = (kt[-1] - kt) / kt[-1]
            y += ramp[:, None] * rng.normal(0.0, 1.0, d) * step
        y[-1] = endpoint
        val = value(y)
        if val >= cur or rng.random() < np.exp((val - cur) / T):
            x, cur = y, val
            if cur > best:
                best, best_x = cur, x.copy()
        T *= cool
        if it % 200 == 0:
            hist.append(best)
    return _AnnealResult(best, best_x, hist)


@dataclass
class CriticalCouplingReport:
    """Estimates of ``mu_{x,t}`` and the critical couplings.

    ``mu_opt`` is the best of the annealed path value (a lower bound) and the
    separable value; ``lambda_q[q] = 1 / (q mu_opt)``.
    """

    endpoint: np.ndarray
    t: float
    mu_path: float | None = None
    mu_separable: float | None = None
    mu_straight: np.ndarray | None = None
    best_direction: np.ndarray | None = None
    best_path: PathPL | None = None
    path_converged: bool | None = None
    restart_values: list = field(default_factory=list)
    q_values: tuple = (1,)
    methods: dict = field(default_factory=dict)
    H_dir: dict = field(default_factory=dict)
    lambda_slope: dict = field(default_factory=dict)
    H_star: float | None = None

    @property
    def mu_opt(self) -> float:
        vals = [v for v in (self.mu_path, self.mu_separable) if v is not None]
        if not vals:
            raise ValueError("report holds no mu estimate")
        return max(vals)

    @property
    def mu_straight_max(self) -> float:
        return float(np.max(self.mu_straight))

    @property
    def lambda_q(self) -> dict:
        return {q: critical_coupling(q, self.mu_opt) for q in self.q_values}

    @property
    def path_gap(self) -> float | None:
        """Relative shortfall of the path search below the separable value."""
        if self.mu_path is None or self.mu_separable is None:
            return None
        return (self.mu_separable - self.mu_path) / self.mu_separable

    def slope_gap(self, q: int) -> float | None:
        if q not in self.lambda_slope:
            return None
        lq = self.lambda_q[q]
        return (self.lambda_slope[q] - lq) / lq

    def to_text(self) -> str:
        """Key-value export, one value per line."""
        lines = [f"endpoint = {' '.join(repr(float(v)) for v in np.atleast_1d(self.endpoint))}",
                 f"t = {self.t!r}"]
        for key in ("mu_path", "mu_separable"):
            v = getattr(self, key)
            if v is not None:
                lines.append(f"{key} = {v!r}")
        lines.append(f"mu_opt = {self.mu_opt!r}")
        if self.mu_straight is not None:
            lines.append(f"mu_straight_max = {self.mu_straight_max!r}")
        if self.path_converged is not None:
            lines.append(f"path_converged = {self.path_converged}")
        for q, lq in self.lambda_q.items():
            lines.append(f"lambda_{q} = {lq!r}")
        for q, lq in self.lambda_slope.items():
            lines.append(f"lambda_slope_{q} = {lq!r}")
        if self.H_star is not None:
            lines.append(f"H_star = {self.H_star!r}")
        for k, v in self.methods.items():
            lines.append(f"method.{k} = {v}")
        return "\n".join(lines) + "\n"


def knot_times(t: float, knots: int, min_gap: float | None = None) -> np.ndarray:
    """``knots`` uniform times on ``[0, t]``, optionally refined geometrically toward ``t``."""
    if knots < 2:
        raise ValueError("need at least 2 knots")
    kt = np.linspace(0.0, t, knots)
    if min_gap is None:
        return kt
    h = t / (knots - 1)
    extra = []
    gap = h / 2
    while gap >= min_gap * (1 - 1e-9):
        extra.append(t - gap)
        gap /= 2
    return np.concatenate([kt[:-1], np.array(extra), kt[-1:]])


def critical_coupling(q: int, mu: float) -> float:
    """``lambda_q = 1 / (q mu)``."""
    if q < 1:
        raise ValueError("q must be a positive integer")
    if mu <= 0:
        raise ValueError("mu must be positive")
    return 1.0 / (q * mu)


def optimize_mu(gamma: GammaField, endpoint, method: str = "both", *, q: Sequence[int] = (1,),
                knots: int = 32, restarts: int = 10, n_iter: int = 3000, seed: int = 0,
                workers: int = 1, n_coarse: int = 256, n_refine: int = 4,
                upsample_factor: int = 4, end_refine: bool = True) -> CriticalCouplingReport:
    """Estimate ``mu_{x,t}`` by path search, by the separable reduction, or both.

    Path search is multi-start simulated annealing over ``knots`` uniform
    knot positions with the last knot fixed at ``endpoint``; each restart has
    its own RNG stream spawned from ``seed`` and the final value is the
    maximum over restarts.  Annealed values are lower bounds.

    With ``end_refine`` the uniform knots are supplemented by knots at
    ``t - h/2, t - h/4, ...`` (``h`` the knot spacing, down to the solver
    step), so a path can follow the intensity maximum almost until ``t``
    before a short final jump to the endpoint.
    """
    if method not in ("path-search", "separable", "both"):
        raise ValueError(f"unknown method {method!r}")
    grid, tg = gamma.grid, gamma.time_grid
    ep = np.atleast_1d(np.asarray(endpoint, dtype=float))
    if ep.size != grid.dim:
        raise ValueError("endpoint dimension mismatch")
    report = CriticalCouplingReport(endpoint=ep, t=tg.t_end, q_values=tuple(q))
    report.mu_straight = mu_straight_field(gamma)
    ss = np.random.SeedSequence(seed)
    child_sep, child_path = ss.spawn(2)

    if method in ("separable", "both"):
        val, u = _separable_search(gamma, np.random.default_rng(child_sep), n_coarse,
                                   n_refine, upsample_factor)
        report.mu_separable = val
        report.best_direction = u
        report.methods["separable"] = "sphere search, coarse + Nelder-Mead"

    if method in ("path-search", "both"):
        obj = _PathObjective(gamma, upsample_factor)
        kt = knot_times(tg.t_end, knots, tg.dt if end_refine else None)
        L = np.array(grid.side_lengths)
        streams = [np.random.default_rng(s) for s in child_path.spawn(restarts)]

        def run(r):
            rng = streams[r]
            if r == 0:
                init = np.tile(ep, (kt.size, 1))
            elif r == 1:
                init = _ridge_init(obj, kt, ep, L)
            elif r % 2 == 1:
                v = rng.uniform(-2.0, 2.0, grid.dim) * L / tg.t_end
                init = ep + np.outer(kt - tg.t_end, v)
            else:
                init = rng.uniform(0.0, 1.0, (kt.size, grid.dim)) * L
            return _anneal(obj, kt, init, ep, rng, n_iter, L)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(run, range(restarts)))
        else:
            results = [run(r) for r in range(restarts)]
        best = max(results, key=lambda res: res.value)
        path = PathPL(kt, best.knots, ep)
        report.mu_path = top_eig(gram_along_path(gamma, path))[0]
        report.best_path = path
        vals = sorted((res.value for res in results), reverse=True)
        report.restart_values = vals
        report.path_converged = bool(len(vals) < 2 or (vals[0] - vals[1]) <= 1e-3 * abs(vals[0]))
        report.methods["path-search"] = (f"simulated annealing, {knots} knots, "
                                         f"{restarts} restarts (lower bound)")
    return report
