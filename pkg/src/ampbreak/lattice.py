"""Torus geometry, time grids, the Gaussian driver and the random potential.

The driver is a finite modal sum ``S(x, t) = sum_n s_n Phi_n(x, t)`` with
i.i.d. circular complex Gaussian coefficients of unit variance.  Modal
functions are stored sampled on the lattice, both at the time nodes and at
the step midpoints (the split-step solver samples coefficients at
midpoints).  Discontinuities in time are allowed only at time nodes; their
left limits are kept separately so that quadratures never straddle a jump.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "TorusGrid",
    "TimeGrid",
    "ModalSet",
    "GaussianSample",
    "PotentialSpec",
    "PotentialField",
    "make_torus_grid",
    "make_time_grid",
    "synthesize_modal_set",
    "sample_gaussian_vector",
    "sample_gaussian_batch",
    "assemble_driver",
    "synthesize_potential",
    "potential_norms",
    "spectral_gradient",
    "spectral_laplacian",
    "RECIPES",
]

RngLike = Union[int, np.random.Generator, np.random.SeedSequence, None]

# Relative spectral power tolerated at or above half the Nyquist index.  Modes
# confined below half-Nyquist have products (the gamma matrix) that are still
# resolved on the grid, which makes trigonometric interpolation exact.
BAND_LIMIT_TOL = 1e-12
NORMALIZATION_CELLS = 2048


def _rng(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic lattice on a d-dimensional torus (d <= 3)."""

    side_lengths: tuple[float, ...]
    points: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.points)

    @property
    def size(self) -> int:
        return int(np.prod(self.points))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.side_lengths, self.points))

    @property
    def volume(self) -> float:
        return float(np.prod(self.side_lengths))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axes(self) -> list[np.ndarray]:
        return [np.arange(n) * h for n, h in zip(self.points, self.spacing)]

    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*self.axes(), indexing="ij"))

    def wavenumbers(self) -> list[np.ndarray]:
        """Angular wavenumbers ``2 pi j / L`` per axis in FFT order."""
        return [2 * np.pi * np.fft.fftfreq(n, d=h)
                for n, h in zip(self.points, self.spacing)]

    def k_squared(self) -> np.ndarray:
        ks = np.meshgrid(*self.wavenumbers(), indexing="ij")
        return sum(k ** 2 for k in ks)

    def nearest_index(self, point) -> tuple[int, ...]:
        """Grid index closest to ``point`` (wrapped onto the torus)."""
        p = np.atleast_1d(np.asarray(point, dtype=float))
        if p.size != self.dim:
            raise ValueError(f"point has {p.size} coordinates, grid has dim {self.dim}")
        idx = []
        for x, L, n in zip(p, self.side_lengths, self.points):
            idx.append(int(np.round((x % L) / (L / n))) % n)
        return tuple(idx)

    def coordinates(self, index) -> np.ndarray:
        return np.array([i * h for i, h in zip(index, self.spacing)])


def make_torus_grid(dim: int, side_lengths: Sequence[float],
                    points_per_axis: Sequence[int]) -> TorusGrid:
    """Build a periodic grid; ``dim`` must not exceed 3."""
    if dim > 3:
        raise ValueError(f"dim {dim} exceeds supported scope d<=3")
    if dim < 1:
        raise ValueError("dim must be at least 1")
    side_lengths = tuple(float(L) for L in side_lengths)
    points = tuple(int(n) for n in points_per_axis)
    if len(side_lengths) != dim or len(points) != dim:
        raise ValueError("side_lengths and points_per_axis must have length dim")
    if any(L <= 0 for L in side_lengths):
        raise ValueError("side lengths must be positive")
    if any(n <= 0 or n % 2 for n in points):
        raise ValueError("points per axis must be positive and even")
    return TorusGrid(side_lengths, points)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time nodes ``0, dt, ..., t_end`` with optional breakpoints."""

    t_end: float
    n_steps: int
    breakpoints: tuple[float, ...] = ()

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.t_end, self.n_steps + 1)

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_steps) + 0.5) * self.dt

    @property
    def breakpoint_indices(self) -> tuple[int, ...]:
        return tuple(int(round(b / self.dt)) for b in self.breakpoints)

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_nodes, self.dt)
        w[0] = w[-1] = self.dt / 2
        return w


def make_time_grid(t_end: float, n_steps: int,
                   breakpoints: Sequence[float] = ()) -> TimeGrid:
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    if n_steps <= 0:
        raise ValueError("n_steps must be positive")
    dt = t_end / n_steps
    bps = tuple(sorted(float(b) for b in breakpoints))
    for b in bps:
        if not 0.0 < b < t_end:
            raise ValueError(f"breakpoint {b} outside (0, t_end)")
        j = round(b / dt)
        if abs(j * dt - b) > 1e-9 * dt:
            raise ValueError(
                f"breakpoint {b} does not coincide with a time node (dt={dt}); "
                "choose n_steps so that every breakpoint is a multiple of dt")
    return TimeGrid(float(t_end), int(n_steps), bps)


# ---------------------------------------------------------------------------
# modal sets

ModeFunction = Callable[[tuple, float], np.ndarray]


def _uniform(grid: TorusGrid) -> tuple[ModeFunction, str]:
    def f(mesh, tau):
        return np.ones((1,) + grid.shape, dtype=complex)
    return f, "uniform"


def _plane_wave_pair(grid: TorusGrid, mode: int = 1, axis: int = 0) -> tuple[ModeFunction, str]:
    L = grid.side_lengths[axis]

    def f(mesh, tau):
        ph = 2 * np.pi * mode * mesh[axis] / L
        return np.stack([np.cos(ph), np.sin(ph)]).astype(complex)
    return f, "plane-wave-pair"


def _moving_hotspot(grid: TorusGrid, width: float = 0.1, velocity=None,
                    center=None) -> tuple[ModeFunction, str]:
    d = grid.dim
    v = np.zeros(d) if velocity is None else np.atleast_1d(np.asarray(velocity, float))
    if velocity is None:
        v[0] = 1.0
    c0 = np.zeros(d) if center is None else np.atleast_1d(np.asarray(center, float))
    if v.size != d or c0.size != d:
        raise ValueError("velocity and center need one entry per axis")

    def f(mesh, tau):
        out = np.ones(grid.shape)
        for ax in range(d):
            L = grid.side_lengths[ax]
            y = (mesh[ax] - c0[ax] - v[ax] * tau) % L
            # periodized Gaussian; three images suffice for width < L/4
            prof = sum(np.exp(-(y + j * L) ** 2 / (2 * width ** 2)) for j in (-2, -1, 0, 1))
            out = out * prof
        return out[None].astype(complex)
    return f, "moving-hotspot"


RECIPES: dict[str, Callable[..., tuple[ModeFunction, str]]] = {
    "uniform": _uniform,
    "plane-wave-pair": _plane_wave_pair,
    "moving-hotspot": _moving_hotspot,
}


@dataclass(frozen=True, eq=False)
class ModalSet:
    """M modal functions sampled on grid x time.

    ``nodes`` has shape ``(n_nodes, M, *grid.shape)`` and holds right limits
    at breakpoints; ``left_limits`` maps a breakpoint node index to the left
    limit there.  ``midpoints`` has shape ``(n_steps, M, *grid.shape)``.
    """

    grid: TorusGrid
    time_grid: TimeGrid
    nodes: np.ndarray
    midpoints: np.ndarray
    left_limits: Mapping[int, np.ndarray] = field(default_factory=dict)
    name: str = "table"
    scale: float = 1.0
    normalization: float = 1.0

    @property
    def M(self) -> int:
        return self.nodes.shape[1]

    def step_ends(self) -> tuple[np.ndarray, np.ndarray]:
        """Samples at the start and end of every step, shape ``(n_steps, M, ...)``.

        The end sample of a step ending on a breakpoint is the left limit.
        """
        start = self.nodes[:-1]
        end = self.nodes[1:]
        if self.left_limits:
            end = end.copy()
            for j, v in self.left_limits.items():
                end[j - 1] = v
        return start, end


def _check_band_limit(grid: TorusGrid, values: np.ndarray, what: str) -> None:
    axes = tuple(range(values.ndim - grid.dim, values.ndim))
    spec = np.abs(np.fft.fftn(values, axes=axes)) ** 2
    high = np.zeros(grid.shape, dtype=bool)
    for ax, n in enumerate(grid.points):
        idx = np.abs(np.fft.fftfreq(n) * n)
        sl = [None] * grid.dim
        sl[ax] = slice(None)
        high |= (idx >= n / 4)[tuple(sl)]
    total = spec.sum()
    if total == 0:
        return
    ratio = spec[..., high].sum() / total
    if ratio > BAND_LIMIT_TOL:
        raise ValueError(
            f"{what} exceeds band limit: relative power {ratio:.3e} at or above "
            "half the Nyquist wavenumber; refine the grid or smooth the recipe")


def _normalization_from_function(grid, fn) -> float:
    mesh = grid.mesh()
    taus = (np.arange(NORMALIZATION_CELLS) + 0.5) / NORMALIZATION_CELLS
    acc = 0.0
    for tau in taus:
        acc += np.sum(np.abs(fn(mesh, tau)) ** 2) / grid.size
    return acc / NORMALIZATION_CELLS


def synthesize_modal_set(grid: TorusGrid, time_grid: TimeGrid, recipe="uniform",
                         *, normalize: bool = True, table=None, **params) -> ModalSet:
    """Sample a recipe on the lattice and rescale it to unit normalization.

    ``recipe`` is a built-in name (see ``RECIPES``), ``"table"`` together with
    ``table`` (an array ``(n_nodes, M, *shape)`` or a callable
    ``f(mesh, tau) -> (M, *shape)``), or directly such a callable.
    Normalization is ``(1/|Lambda|) sum_n int_0^1 int |Phi_n|^2 = 1``.
    """
    fn = None
    nodes = None
    if callable(recipe):
        fn, name = recipe, "table"
    elif recipe == "table":
        name = "table"
        if callable(table):
            fn = table
        elif table is not None:
            nodes = np.array(table, dtype=complex)
        else:
            raise ValueError("recipe 'table' needs a table")
    elif recipe in RECIPES:
        fn, name = RECIPES[recipe](grid, **params)
    else:
        raise ValueError(f"unknown recipe {recipe!r}")

    left = {}
    if fn is not None:
        mesh = grid.mesh()
        nodes = np.stack([np.asarray(fn(mesh, t), dtype=complex) for t in time_grid.nodes])
        mids = np.stack([np.asarray(fn(mesh, t), dtype=complex) for t in time_grid.midpoints])
        for j in time_grid.breakpoint_indices:
            left[j] = np.asarray(fn(mesh, np.nextafter(time_grid.nodes[j], -np.inf)),
                                 dtype=complex)
        raw_norm = _normalization_from_function(grid, fn)
    else:
        if nodes.ndim != grid.dim + 2 or nodes.shape[0] != time_grid.n_nodes \
                or nodes.shape[2:] != grid.shape:
            raise ValueError("table must have shape (n_nodes, M, *grid.shape)")
        mids = 0.5 * (nodes[:-1] + nodes[1:])
        if normalize and time_grid.t_end < 1.0:
            raise ValueError("table normalization needs samples covering [0, 1]")
        # trapezoid over the nodes inside [0, 1]
        inside = time_grid.nodes <= 1.0 + 1e-12
        w = time_grid.trapezoid_weights()[inside].copy()
        if not np.isclose(time_grid.nodes[inside][-1], 1.0):
            raise ValueError("table time grid must contain tau=1 as a node")
        w[-1] = time_grid.dt / 2
        dens = np.sum(np.abs(nodes[inside]) ** 2, axis=tuple(range(1, nodes.ndim))) / grid.size
        raw_norm = float(np.dot(w, dens))

    if nodes.shape[1] < 1:
        raise ValueError("need at least one mode")
    _check_band_limit(grid, nodes, f"recipe {name!r}")

    scale = 1.0
    if normalize:
        if raw_norm <= 0:
            raise ValueError("modal set has zero intensity")
        scale = 1.0 / np.sqrt(raw_norm)
        nodes = nodes * scale
        mids = mids * scale
        left = {j: v * scale for j, v in left.items()}
    norm = raw_norm * scale ** 2
    return ModalSet(grid, time_grid, _readonly(nodes), _readonly(mids),
                    {j: _readonly(v) for j, v in left.items()}, name, float(scale), float(norm))


# ---------------------------------------------------------------------------
# Gaussian coefficients


@dataclass(frozen=True, eq=False)
class GaussianSample:
    s: np.ndarray

    @property
    def M(self) -> int:
        return self.s.shape[-1]


def sample_gaussian_batch(M: int, n: int, rng: RngLike) -> np.ndarray:
    """``n`` circular complex Gaussian vectors with <|s_n|^2> = 1, shape (n, M)."""
    g = _rng(rng)
    z = g.standard_normal((n, M, 2)) * np.sqrt(0.5)
    return z[..., 0] + 1j * z[..., 1]


def sample_gaussian_vector(M: int, rng: RngLike) -> GaussianSample:
    return GaussianSample(_readonly(sample_gaussian_batch(M, 1, rng)[0]))


def _coefficients(sample) -> np.ndarray:
    return np.asarray(sample.s if isinstance(sample, GaussianSample) else sample, dtype=complex)


def assemble_driver(modal_set: ModalSet, sample, where: str = "nodes") -> np.ndarray:
    """``S = sum_n s_n Phi_n`` on the time nodes (or midpoints).

    A batch of coefficient vectors ``(B, M)`` gives ``(B, n_times, *shape)``.
    """
    s = _coefficients(sample)
    if s.shape[-1] != modal_set.M:
        raise ValueError(f"sample has length {s.shape[-1]}, modal set has M={modal_set.M}")
    modes = {"nodes": modal_set.nodes, "midpoints": modal_set.midpoints}[where]
    return np.tensordot(s, modes, axes=([-1], [1]))


# ---------------------------------------------------------------------------
# random potential


@dataclass(frozen=True)
class PotentialSpec:
    """How to build rho.  ``kind`` is one of zero, frozen-gaussian,
    time-dependent-gaussian or user-table."""

    kind: str = "zero"
    correlation_length: float = 0.1
    correlation_time: float | None = None
    amplitude: float = 1.0
    seed: int = 0
    table: object = None

    def with_seed(self, seed: int) -> "PotentialSpec":
        return PotentialSpec(self.kind, self.correlation_length, self.correlation_time,
                             self.amplitude, int(seed), self.table)


@dataclass(frozen=True, eq=False)
class PotentialField:
    grid: TorusGrid
    time_grid: TimeGrid
    nodes: np.ndarray
    midpoints: np.ndarray
    norm_rho: float
    norm_grad: float
    norm_lap: float
    frozen: bool = True
    spec: PotentialSpec | None = None

    @property
    def is_zero(self) -> bool:
        return self.norm_rho == 0.0


def _odd_wavenumbers(grid: TorusGrid) -> list[np.ndarray]:
    ks = grid.wavenumbers()
    for k, n in zip(ks, grid.points):
        k[n // 2] = 0.0
    return ks


def spectral_gradient(grid: TorusGrid, values: np.ndarray) -> np.ndarray:
    """Gradient of real periodic data over the trailing ``grid.dim`` axes.

    Returns shape ``(dim, *values.shape)``; the Nyquist mode is dropped.
    """
    axes = tuple(range(values.ndim - grid.dim, values.ndim))
    vh = np.fft.fftn(values, axes=axes)
    ks = np.meshgrid(*_odd_wavenumbers(grid), indexing="ij")
    return np.stack([np.fft.ifftn(1j * k * vh, axes=axes).real for k in ks])


def spectral_laplacian(grid: TorusGrid, values: np.ndarray) -> np.ndarray:
    axes = tuple(range(values.ndim - grid.dim, values.ndim))
    vh = np.fft.fftn(values, axes=axes)
    return np.fft.ifftn(-grid.k_squared() * vh, axes=axes).real


def potential_norms(field: PotentialField | np.ndarray, grid: TorusGrid | None = None):
    """Uniform norms ``(max|rho|, max|grad rho|, max|lap rho|)`` over grid x time."""
    if isinstance(field, PotentialField):
        grid = field.grid
        values = field.nodes[:1] if field.frozen else field.nodes
    else:
        values = np.asarray(field, dtype=float)
        if grid is None:
            raise ValueError("grid required for raw arrays")
    values = np.asarray(values, dtype=float)
    if not np.any(values):
        return 0.0, 0.0, 0.0
    grad = spectral_gradient(grid, values)
    lap = spectral_laplacian(grid, values)
    return (float(np.max(np.abs(values))),
            float(np.max(np.sqrt(np.sum(grad ** 2, axis=0)))),
            float(np.max(np.abs(lap))))


def _gaussian_filter(grid: TorusGrid, ell: float) -> np.ndarray:
    p = np.exp(-grid.k_squared() * ell ** 2 / 2)
    p.flat[0] = 0.0
    return p / p.sum()


def synthesize_potential(grid: TorusGrid, time_grid: TimeGrid,
                         spec: PotentialSpec) -> PotentialField:
    """Realize rho by spectral shaping of white noise.

    Gaussian kinds have correlation ``a^2 exp(-r^2 / 2 l^2)`` (times
    ``exp(-tau^2 / 2 tau_c^2)`` when time dependent) and zero spatial mean.
    """
    n_t = time_grid.n_nodes
    if spec.kind == "zero":
        z = np.zeros(grid.shape)
        nodes = np.broadcast_to(z, (n_t,) + grid.shape)
        mids = np.broadcast_to(z, (time_grid.n_steps,) + grid.shape)
        return PotentialField(grid, time_grid, nodes, mids, 0.0, 0.0, 0.0, True, spec)

    if spec.kind in ("frozen-gaussian", "time-dependent-gaussian"):
        if spec.correlation_length < 3 * max(grid.spacing):
            raise ValueError(
                f"correlation length {spec.correlation_length} not resolvable: "
                f"need at least 3 spacings ({3 * max(grid.spacing):.4g})")
        rng = np.random.default_rng(spec.seed)
        p = _gaussian_filter(grid, spec.correlation_length)
        axes = tuple(range(1, grid.dim + 1))
        if spec.kind == "frozen-gaussian":
            w = rng.standard_normal(grid.shape)
            filt = np.sqrt(grid.size * spec.amplitude ** 2 * p)
            rho = np.fft.ifftn(np.fft.fftn(w) * filt).real
            _readonly(rho)
            nodes = np.broadcast_to(rho, (n_t,) + grid.shape)
            mids = np.broadcast_to(rho, (time_grid.n_steps,) + grid.shape)
            frozen = True
        else:
            # default: correlation time equal to the correlation length (unit speed)
            tc = spec.correlation_length if spec.correlation_time is None else spec.correlation_time
            if tc < 3 * time_grid.dt:
                raise ValueError("time-dependent potential needs correlation_time >= 3 dt")
            h = time_grid.dt / 2
            n_fine = 2 * time_grid.n_steps + 1
            n_pad = n_fine + int(np.ceil(8 * tc / h))
            n_pad += n_pad % 2
            om = 2 * np.pi * np.fft.fftfreq(n_pad, d=h)
            pt = np.exp(-om ** 2 * tc ** 2 / 2)
            pt /= pt.sum()
            spec_st = pt.reshape((-1,) + (1,) * grid.dim) * p[None]
            w = rng.standard_normal((n_pad,) + grid.shape)
            filt = np.sqrt(n_pad * grid.size * spec.amplitude ** 2 * spec_st)
            rho_all = np.fft.ifftn(np.fft.fftn(w, axes=(0,) + axes) * filt,
                                   axes=(0,) + axes).real[:n_fine]
            nodes = _readonly(np.ascontiguousarray(rho_all[0::2]))
            mids = _readonly(np.ascontiguousarray(rho_all[1::2]))
            frozen = False
    elif spec.kind == "user-table":
        tab = spec.table
        if callable(tab):
            mesh = grid.mesh()
            nodes = np.stack([np.asarray(tab(mesh, t), float) for t in time_grid.nodes])
            mids = np.stack([np.asarray(tab(mesh, t), float) for t in time_grid.midpoints])
            frozen = False
        else:
            arr = np.asarray(tab)
            if np.iscomplexobj(arr):
                raise ValueError("potential table must be real")
            arr = arr.astype(float)
            if arr.shape == grid.shape:
                nodes = np.broadcast_to(arr, (n_t,) + grid.shape)
                mids = np.broadcast_to(arr, (time_grid.n_steps,) + grid.shape)
                frozen = True
            elif arr.shape == (n_t,) + grid.shape:
                nodes = arr
                mids = 0.5 * (arr[:-1] + arr[1:])
                frozen = False
            else:
                raise ValueError("potential table must have shape grid.shape or (n_nodes, *grid.shape)")
        if not (np.all(np.isfinite(nodes)) and np.all(np.isfinite(mids))):
            raise ValueError("potential table has non-finite entries")
    else:
        raise ValueError(f"unknown potential kind {spec.kind!r}")

    tmp = PotentialField(grid, time_grid, nodes, mids, 0.0, 0.0, 0.0, frozen, spec)
    nr, ng, nl = potential_norms(tmp)
    return PotentialField(grid, time_grid, nodes, mids, nr, ng, nl, frozen, spec)
