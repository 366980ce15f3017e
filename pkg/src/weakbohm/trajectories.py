"""Guidance-equation trajectories through stacks of velocity fields.

Fields are interpolated linearly in time and (bi)linearly in space; paths are
advanced with classical RK4. A path whose RK stage lands on a masked grid
point (density below the floor) is frozen at its last good position and
flagged as escaped.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import write_table_csv
from .errors import EscapeError, GridMismatchError
from .measurement import (
    PointerModel,
    bin_average_velocity,
    estimate_to_field,
    estimate_velocity,
    rng_stream,
    simulate_runs,
)
from .propagation import Hamiltonian, PropagatorConfig, evolve
from .wavefield import DensityField, Grid, WaveFunction, position_density
from .weakvalue import DENSITY_FLOOR, VelocityField, velocity_field

__all__ = [
    "FieldStack",
    "TrajectorySet",
    "integrate",
    "transport",
    "transport_density",
    "histogram_density",
    "sample_density",
    "ks_distance",
    "twin_slit_paths",
    "propagated_std_error",
    "flow_jacobians",
    "EstimatedPathComparison",
    "compare_estimated_paths",
]

MAX_ESCAPE_FRACTION = 0.01


@dataclass(frozen=True, eq=False)
class FieldStack:
    """Velocity fields at uniformly spaced, increasing times on one grid."""

    times: np.ndarray
    fields: tuple[VelocityField, ...]

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        fields = tuple(self.fields)
        if len(times) != len(fields) or len(times) < 2:
            raise ValueError("need at least two (time, field) pairs")
        steps = np.diff(times)
        if np.any(steps <= 0):
            raise ValueError("stack times must be strictly increasing")
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise ValueError("stack times must be uniformly spaced")
        grid, rep = fields[0].grid, fields[0].representation
        if any(f.grid != grid for f in fields):
            raise GridMismatchError("stack fields live on different grids")
        if any(f.representation != rep for f in fields):
            raise ValueError("stack mixes representations")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "fields", fields)
        object.__setattr__(self, "_v", np.stack([np.stack(f.components) for f in fields]))
        object.__setattr__(self, "_mask", np.stack([f.mask for f in fields]))

    @classmethod
    def from_states(cls, states: Sequence[WaveFunction], H: Hamiltonian, density_floor=DENSITY_FLOOR):
        return cls([s.time for s in states], tuple(velocity_field(s, H, density_floor) for s in states))

    @property
    def grid(self) -> Grid:
        return self.fields[0].grid

    @property
    def stride(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def provenance(self) -> str:
        return self.fields[0].provenance

    def _corners(self, points: np.ndarray):
        """Flat indices and weights of the 2^d surrounding grid points."""
        grid = self.grid
        idx = [np.zeros(len(points), dtype=np.int64)]
        wts = [np.ones(len(points))]
        stride = 1
        for axis in reversed(range(grid.dims)):
            a, dx, n = grid.extents[axis][0], grid.spacing[axis], grid.points[axis]
            s = (points[:, axis] - a) / dx
            i0 = np.floor(s)
            f = s - i0
            i0 = i0.astype(np.int64) % n
            i1 = (i0 + 1) % n
            idx = [base + i * stride for base in idx for i in (i0, i1)]
            wts = [w * g for w in wts for g in (1 - f, f)]
            stride *= n
        return idx, wts

    def evaluate(self, points: np.ndarray, k: int, theta: float):
        """Velocities at ``points`` (shape ``(n, d)``) at time ``times[k] + theta * stride``.

        Returns ``(v, masked)``; ``masked`` is true where any grid point with
        nonzero interpolation weight is masked.
        """
        points = np.asarray(points, dtype=float).reshape(-1, self.grid.dims)
        idx, wts = self._corners(points)
        layers = [(kk, tw) for kk, tw in ((k, 1.0 - theta), (k + 1, theta)) if tw > 0]
        d = self.grid.dims
        v = np.zeros((len(points), d))
        masked = np.zeros(len(points), dtype=bool)
        for kk, tw in layers:
            comps = self._v[kk].reshape(d, -1)
            flat_mask = self._mask[kk].ravel()
            for i, w in zip(idx, wts):
                v += (tw * w)[:, None] * comps[:, i].T
                masked |= flat_mask[i] & (w > 0)
        return v, masked

    def velocity_at(self, points: np.ndarray, t: float):
        """Convenience wrapper of :meth:`evaluate` taking an absolute time."""
        s = (t - self.times[0]) / self.stride
        k = int(min(max(np.floor(s), 0), len(self.times) - 2))
        return self.evaluate(points, k, float(s - k))


@dataclass(frozen=True, eq=False)
class TrajectorySet:
    """Paths of shape ``(n_paths, n_times, dims)`` sharing time stamps."""

    paths: np.ndarray
    times: np.ndarray
    origin: str = "analytic_field"
    escaped: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        paths = np.asarray(self.paths, dtype=float)
        if paths.ndim == 2:
            paths = paths[:, :, None]
        object.__setattr__(self, "paths", paths)
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        esc = np.zeros(len(paths), bool) if self.escaped is None else np.asarray(self.escaped, bool)
        object.__setattr__(self, "escaped", esc)
        if paths.shape[1] != len(self.times):
            raise ValueError("paths and times disagree in length")

    @property
    def endpoints(self) -> np.ndarray:
        return self.paths[:, -1, :]

    @property
    def escape_fraction(self) -> float:
        return float(self.escaped.mean()) if len(self.escaped) else 0.0

    def to_csv(self, path):
        n, nt, d = self.paths.shape
        ids = np.repeat(np.arange(n), nt)
        ts = np.tile(self.times, n)
        coords = [self.paths[:, :, i].ravel() for i in range(d)]
        return write_table_csv(path, ["path_id", "t", "x", "y"][: 2 + d], [ids, ts, *coords])

    def to_binary(self, path):
        """Header ``b"BWT1"``, uint32 (n_paths, n_times, dims), then times and paths as little-endian float64."""
        n, nt, d = self.paths.shape
        with open(path, "wb") as fh:
            fh.write(b"BWT1" + struct.pack("<3I", n, nt, d))
            fh.write(self.times.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(self.paths).astype("<f8").tobytes())
        return Path(path)

    @classmethod
    def from_binary(cls, path, origin="analytic_field"):
        data = Path(path).read_bytes()
        if data[:4] != b"BWT1":
            raise ValueError("not a trajectory file")
        n, nt, d = struct.unpack_from("<3I", data, 4)
        times = np.frombuffer(data, "<f8", nt, 16)
        paths = np.frombuffer(data, "<f8", n * nt * d, 16 + 8 * nt).reshape(n, nt, d)
        return cls(paths.copy(), times.copy(), origin)


def integrate(
    x0,
    stack: FieldStack,
    dt_path: float,
    *,
    record_stride: int = 1,
    max_escape_fraction: float = MAX_ESCAPE_FRACTION,
    workers: int = 1,
) -> TrajectorySet:
    """RK4 paths from ``stack.times[0]`` to ``stack.times[-1]``.

    ``dt_path`` must divide the stack stride. Positions are recorded at every
    ``record_stride``-th stack time plus the final one. Raises
    :class:`EscapeError` (carrying the partial result as ``.trajectories``)
    when more than ``max_escape_fraction`` of the paths escape. Paths are
    independent, so splitting them over ``workers`` threads does not change
    the result.
    """
    grid = stack.grid
    x = np.array(x0, dtype=float).reshape(-1, grid.dims)
    if not np.all(grid.contains(x)):
        raise ValueError("starting points must lie inside the grid extents")
    if not 0 < dt_path <= stack.stride * (1 + 1e-12):
        raise ValueError("dt_path must be positive and no larger than the field stride")
    n_sub = int(round(stack.stride / dt_path))
    if abs(n_sub * dt_path - stack.stride) > 1e-9 * stack.stride:
        raise ValueError("dt_path must divide the field stride")
    n_int = len(stack.times) - 1
    keep = list(range(0, n_int + 1, record_stride))
    if keep[-1] != n_int:
        keep.append(n_int)

    if workers > 1 and len(x) > 1:
        chunks = np.array_split(np.arange(len(x)), workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda ids: _rk4(x[ids], stack, n_sub, keep), chunks))
        paths = np.concatenate([p for p, _ in parts])
        escaped = np.concatenate([e for _, e in parts])
    else:
        paths, escaped = _rk4(x, stack, n_sub, keep)

    origin = "estimated_field" if stack.provenance == "estimated" else "analytic_field"
    result = TrajectorySet(paths, stack.times[keep], origin, escaped)
    if result.escape_fraction > max_escape_fraction:
        err = EscapeError(f"{escaped.sum()} of {len(escaped)} paths entered the masked region")
        err.trajectories = result
        raise err
    return result


def _rk4(x: np.ndarray, stack: FieldStack, n_sub: int, keep: list[int]):
    grid = stack.grid
    x = x.copy()
    h = stack.stride / n_sub
    _, start_masked = stack.evaluate(x, 0, 0.0)
    active = ~start_masked
    escaped = start_masked.copy()
    record = {0: x.copy()}

    def f(points, k, theta):
        v, masked = stack.evaluate(points, k, theta)
        masked |= ~grid.contains(points)
        return v, masked

    for k in range(keep[-1]):
        for j in range(n_sub):
            ids = np.flatnonzero(active)
            if not len(ids):
                break
            p = x[ids]
            th0, thm, th1 = j / n_sub, (j + 0.5) / n_sub, (j + 1) / n_sub
            k1, m1 = f(p, k, th0)
            k2, m2 = f(p + 0.5 * h * k1, k, thm)
            k3, m3 = f(p + 0.5 * h * k2, k, thm)
            k4, m4 = f(p + h * k3, k, th1)
            new = p + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            bad = m1 | m2 | m3 | m4 | ~grid.contains(new)
            x[ids[~bad]] = new[~bad]
            active[ids[bad]] = False
            escaped[ids[bad]] = True
        if k + 1 in keep:
            record[k + 1] = x.copy()
    return np.stack([record[k] for k in keep], axis=1), escaped


def transport(samples, stack: FieldStack, dt_path: float, **kwargs) -> TrajectorySet:
    """Carry samples to the final stack time, recording only the endpoints."""
    return integrate(samples, stack, dt_path, record_stride=len(stack.times), **kwargs)


def histogram_density(points: np.ndarray, grid: Grid, time: float = 0.0) -> DensityField:
    """Kernel-free histogram on the grid cells, normalized to unit integral."""
    points = np.asarray(points, dtype=float).reshape(-1, grid.dims)
    edges = [grid.cell_edges(i) for i in range(grid.dims)]
    counts, _ = np.histogramdd(points, bins=edges)
    total = counts.sum()
    values = counts / (total * grid.cell_volume) if total else counts
    return DensityField(grid, values, "position", time)


def transport_density(samples, stack: FieldStack, dt_path: float, **kwargs) -> DensityField:
    """Empirical density at the final stack time of transported samples (escaped paths dropped)."""
    result = transport(samples, stack, dt_path, **kwargs)
    good = result.endpoints[~result.escaped]
    return histogram_density(good, stack.grid, float(stack.times[-1]))


def sample_density(density: DensityField | np.ndarray, n: int, rng: np.random.Generator, grid: Grid | None = None):
    """Draw ``n`` points from a piecewise-constant grid density.

    Inverse CDF over cells (plus uniform intra-cell jitter) in 1D, rejection
    sampling in 2D. Returns shape ``(n, dims)``.
    """
    if isinstance(density, DensityField):
        grid, values = density.grid, density.values
    else:
        values = np.asarray(density, dtype=float)
    if grid.dims == 1:
        cdf = np.cumsum(values.ravel())
        cdf /= cdf[-1]
        idx = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(cdf) - 1)
        x = grid.axes[0][idx] + grid.spacing[0] * (rng.random(n) - 0.5)
        return x[:, None]
    vmax = values.max()
    lo = np.array([a for a, _ in grid.extents]) - 0.5 * np.array(grid.spacing)
    span = np.array(grid.lengths)
    out, have = [], 0
    while have < n:
        m = max(4 * (n - have), 1024)
        prop = lo + span * rng.random((m, grid.dims))
        cell = [np.clip(np.round((prop[:, i] - grid.extents[i][0]) / grid.spacing[i]).astype(int), 0,
                        grid.points[i] - 1) for i in range(grid.dims)]
        accept = rng.random(m) * vmax < values[tuple(cell)]
        out.append(prop[accept])
        have += int(accept.sum())
    return np.concatenate(out)[:n]


def ks_distance(samples, density: DensityField, axis: int = 0) -> float:
    """Kolmogorov-Smirnov distance between samples of coordinate ``axis`` and the
    grid density's marginal (piecewise constant on cells)."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 2:
        samples = samples[:, axis]
    grid = density.grid
    marg = density.marginal(axis) * grid.spacing[axis]
    edges = grid.cell_edges(axis)
    cdf_edges = np.concatenate([[0.0], np.cumsum(marg)])
    cdf_edges /= cdf_edges[-1]
    xs = np.sort(samples)
    model = np.interp(xs, edges, cdf_edges)
    n = len(xs)
    upper = np.arange(1, n + 1) / n - model
    lower = model - np.arange(n) / n
    return float(max(upper.max(), lower.max()))


def twin_slit_paths(scenario, n_paths: int, seed: int = 0, dt_path: float | None = None, **kwargs) -> TrajectorySet:
    """Paths from equilibrium-sampled starts in the twin-slit scenario.

    ``scenario`` provides ``initial_state()``, ``hamiltonian``,
    ``propagator``, ``t_final``, ``snapshot_stride`` and ``dt_path``.
    """
    psi0 = scenario.initial_state()
    dens = np.abs(psi0.amplitudes) ** 2
    flipped = np.roll(dens[::-1], 1)
    if not np.allclose(dens, flipped, atol=1e-10 * dens.max()):
        raise ValueError("twin-slit paths need a mirror-symmetric initial state")
    states = evolve(psi0, scenario.hamiltonian, scenario.propagator, scenario.t_final, scenario.snapshot_stride)
    stack = FieldStack.from_states(states, scenario.hamiltonian)
    x0 = sample_density(position_density(psi0), n_paths, rng_stream(seed, 7))
    return integrate(x0, stack, dt_path or scenario.dt_path, **kwargs)


def flow_jacobians(x0, stack: FieldStack, dt_path: float, eps: float | None = None, **kwargs) -> np.ndarray:
    """``d x(t_end) / d x(t_k)`` along 1D paths, shape ``(n_paths, n_times)``.

    Neighbouring paths started ``eps`` apart are integrated through the same
    stack; in 1D the sensitivity from ``t_k`` to the end is the ratio of the
    end and ``t_k`` separations.
    """
    grid = stack.grid
    if grid.dims != 1:
        raise NotImplementedError("flow Jacobians are implemented for 1D paths")
    eps = eps or 1e-4 * grid.spacing[0]
    x0 = np.asarray(x0, dtype=float).reshape(-1, 1)
    kw = {"max_escape_fraction": 1.0, **kwargs}
    lo = integrate(x0 - eps, stack, dt_path, **kw)
    hi = integrate(x0 + eps, stack, dt_path, **kw)
    sep = (hi.paths[:, :, 0] - lo.paths[:, :, 0]) / (2 * eps)
    with np.errstate(invalid="ignore", divide="ignore"):
        jac = sep[:, -1:] / sep
    jac[lo.escaped | hi.escaped] = np.nan
    return jac


def propagated_std_error(jacobians: np.ndarray, paths: TrajectorySet, se_fields: Sequence[np.ndarray],
                         stack: FieldStack) -> np.ndarray:
    """Endpoint standard error of 1D paths from independent per-snapshot field errors.

    An error ``dv`` in the field at snapshot ``k`` moves the endpoint by
    ``J_k * dv * w_k``, with ``w_k`` the integral of that snapshot's linear
    time weight and ``J_k`` from :func:`flow_jacobians`. Paths must have been
    recorded at every stack time.
    """
    grid = stack.grid
    if len(paths.times) != len(stack.times):
        raise ValueError("paths must be recorded at every stack time")
    n_t = len(stack.times)
    w = np.full(n_t, stack.stride)
    w[[0, -1]] = stack.stride / 2
    xs, L = grid.axes[0], grid.lengths[0]
    var = np.zeros(len(paths.paths))
    for k in range(n_t):
        se = np.interp(paths.paths[:, k, 0], xs, se_fields[k], period=L)
        var += (jacobians[:, k] * se * w[k]) ** 2
    return np.sqrt(var)


@dataclass(frozen=True, eq=False)
class EstimatedPathComparison:
    """Endpoints from a Monte Carlo estimated field against the bin-matched analytic field."""

    estimated: TrajectorySet
    analytic: TrajectorySet
    std_error: np.ndarray
    rms_discrepancy: float
    rms_std_error: float

    @property
    def ratio(self) -> float:
        return self.rms_discrepancy / self.rms_std_error

    def within(self, factor: float = 3.0) -> bool:
        return self.rms_discrepancy < factor * self.rms_std_error


def compare_estimated_paths(
    states: Sequence[WaveFunction],
    H: Hamiltonian,
    x0,
    dt_path: float,
    *,
    tau: float,
    sigma_factor: float,
    n_runs: int,
    bins: np.ndarray,
    min_count: int,
    seed: int,
    cfg: PropagatorConfig | None = None,
    stream: int = 100,
    workers: int = 1,
) -> EstimatedPathComparison:
    """Re-integrate paths from Monte Carlo velocity estimates at each snapshot.

    At every snapshot the weak-then-strong protocol is simulated with pointer
    width ``sigma_factor`` times the position spread, binned, and interpolated
    onto the grid. The comparator applies the same binning, masking and
    interpolation to the analytic bin-averaged field, so the endpoint
    discrepancy isolates the statistical (and finite-``tau``) error. The
    endpoint standard error is propagated from the per-bin standard errors
    through the comparator flow's Jacobian.
    """
    est_fields, ana_fields, se_fields = [], [], []
    for k, psi in enumerate(states):
        dens = np.abs(psi.amplitudes) ** 2
        x = psi.grid.axes[0]
        mean = np.sum(dens * x) / dens.sum()
        spread = np.sqrt(np.sum(dens * (x - mean) ** 2) / dens.sum())
        pointer = PointerModel(sigma_factor * spread)
        records = simulate_runs(psi, H, pointer, tau, n_runs, seed, cfg, stream=stream + k, workers=workers)
        est = estimate_velocity(records, bins, min_count)
        f_est, se = estimate_to_field(est, psi.grid, psi.time)
        f_ana, _ = estimate_to_field(est, psi.grid, psi.time, bin_average_velocity(psi, H, bins))
        est_fields.append(f_est)
        ana_fields.append(f_ana)
        se_fields.append(se)
    times = [s.time for s in states]
    est_stack = FieldStack(times, tuple(est_fields))
    ana_stack = FieldStack(times, tuple(ana_fields))
    kw = dict(max_escape_fraction=1.0, workers=workers)
    p_est = integrate(x0, est_stack, dt_path, **kw)
    p_ana = integrate(x0, ana_stack, dt_path, **kw)
    jac = flow_jacobians(x0, ana_stack, dt_path, workers=workers)
    se = propagated_std_error(jac, p_ana, se_fields, ana_stack)
    ok = ~(p_est.escaped | p_ana.escaped) & np.isfinite(se)
    diff = p_est.endpoints[ok, 0] - p_ana.endpoints[ok, 0]
    return EstimatedPathComparison(
        p_est, p_ana, se, float(np.sqrt(np.mean(diff ** 2))), float(np.sqrt(np.mean(se[ok] ** 2)))
    )
