"""Candidate priors, their covariance under the guidance flow, and coarse-grained relaxation.

A prior rule is covariant when the density it assigns at every time is the
one carried along by the velocity field. The equilibrium rule ``P = |psi|^2``
passes; powers ``|psi|^(2p)`` with ``p != 1`` and the uniform density do not.
Relaxation of a non-equilibrium ensemble is tracked with the cell-averaged
relative entropy ``H``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._io import write_table_csv
from .diagnostics import STATIONARY_FLOOR, DiagnosticsReport, transport_residual
from .errors import CovarianceUndefinedError, EscapeError, GridMismatchError
from .propagation import Hamiltonian
from .trajectories import FieldStack, histogram_density, integrate
from .wavefield import DensityField, Grid, WaveFunction
from .weakvalue import DENSITY_FLOOR, VelocityField, velocity_field

__all__ = [
    "PriorCandidate",
    "HFunctionSeries",
    "CovarianceResult",
    "covariance_residual",
    "coarse_grained_H",
    "relaxation_series",
]


@dataclass(frozen=True, eq=False)
class PriorCandidate:
    """Rule turning a guiding function into a prior density.

    ``kind`` is ``"equilibrium"`` (p = 1), ``"power"`` (``|psi|^(2p)``),
    ``"uniform"`` or ``"custom"`` (a fixed tabulated density).
    """

    kind: str
    p: float = 1.0
    table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("equilibrium", "power", "uniform", "custom"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "power" and not self.p > 0:
            raise ValueError("power priors need p > 0")
        if self.kind == "custom":
            if self.table is None or np.any(np.asarray(self.table) < 0):
                raise ValueError("custom priors need a nonnegative table")
        if self.kind == "equilibrium":
            object.__setattr__(self, "p", 1.0)

    @classmethod
    def equilibrium(cls):
        return cls("equilibrium")

    @classmethod
    def power(cls, p: float):
        return cls("equilibrium") if p == 1 else cls("power", p=float(p))

    @classmethod
    def uniform(cls):
        return cls("uniform")

    @classmethod
    def custom(cls, table):
        return cls("custom", table=np.array(table, dtype=float))

    @property
    def label(self) -> str:
        return f"power p={self.p:g}" if self.kind == "power" else self.kind

    def density(self, psi: WaveFunction) -> DensityField:
        grid = psi.grid
        if self.kind in ("equilibrium", "power"):
            raw = np.abs(psi.amplitudes) ** (2 * self.p)
        elif self.kind == "uniform":
            raw = np.ones(grid.shape)
        else:
            raw = np.asarray(self.table, dtype=float).reshape(grid.shape)
        total = raw.sum() * grid.cell_volume
        if not total > 0:
            raise ValueError("prior density has zero mass")
        return DensityField(grid, raw / total, "position", psi.time)


@dataclass(frozen=True)
class CovarianceResult:
    prior: str
    residual: float
    report: DiagnosticsReport = field(repr=False)


def covariance_residual(
    prior: PriorCandidate,
    states: Sequence[WaveFunction],
    fields: Sequence[VelocityField] | None = None,
    H: Hamiltonian | None = None,
    *,
    density_floor: float = DENSITY_FLOOR,
) -> CovarianceResult:
    """Relative mismatch between the prior's own time derivative and its transport.

    The prior rule is applied to every snapshot, and ``dP_c/dt + div(v P_c)``
    is measured where the field is defined. The norm is divided by
    ``max(||dP_c/dt||, ||div(v P_c)||)`` so a time-independent prior (uniform,
    custom) is scored against the change the flow would impose on it.
    """
    if fields is None:
        if H is None:
            raise ValueError("need either velocity fields or a Hamiltonian")
        fields = [velocity_field(s, H, density_floor) for s in states]
    times = np.array([s.time for s in states])
    grid = states[0].grid
    born = transport_residual(times, [np.abs(s.amplitudes) ** 2 for s in states], fields, grid)
    dt = born.resolution[1]
    p_norm = math.sqrt(sum(np.sum(np.abs(s.amplitudes) ** 4) for s in states[1:-1]) * grid.cell_volume * dt) / dt
    if born.time_derivative_norm <= STATIONARY_FLOOR * p_norm:
        raise CovarianceUndefinedError("covariance test undefined")
    dens = [prior.density(s).values for s in states]
    rep = transport_residual(times, dens, fields, grid)
    denom = max(rep.time_derivative_norm, rep.divergence_norm)
    if denom == 0:
        raise CovarianceUndefinedError("covariance test undefined")
    return CovarianceResult(prior.label, rep.residual_norm_L2 / denom, rep)


def _as_array(d, grid):
    if isinstance(d, DensityField):
        if grid is not None and d.grid != grid:
            raise GridMismatchError("densities live on different grids")
        return d.values, d.grid
    return np.asarray(d, dtype=float), grid


def _block_mean(values: np.ndarray, c: int) -> np.ndarray:
    shape = []
    for n in values.shape:
        if n % c:
            raise ValueError(f"{n} grid points do not split into cells of {c}")
        shape += [n // c, c]
    out = values.reshape(shape)
    return out.mean(axis=tuple(range(1, 2 * values.ndim, 2)))


def coarse_grained_H(
    empirical: DensityField | np.ndarray,
    equilibrium: DensityField | np.ndarray,
    cell_size: float,
    grid: Grid | None = None,
    *,
    window: tuple[slice, ...] | None = None,
) -> float:
    """``sum_cells Pbar ln(Pbar / Pbar_eq) * cell volume`` over square cells.

    ``cell_size`` is a length and must be a whole multiple of the grid
    spacing. With ``window`` both densities are restricted to that index
    region and renormalised there first. Cells with no empirical mass
    contribute nothing; empirical mass in a cell with zero equilibrium mass
    gives ``inf``.
    """
    p, grid = _as_array(empirical, grid)
    q, grid = _as_array(equilibrium, grid)
    if grid is None:
        raise ValueError("need a grid for raw density arrays")
    p, q = p.reshape(grid.shape), q.reshape(grid.shape)
    dx = grid.spacing
    if not np.allclose(dx, dx[0], rtol=1e-12):
        raise ValueError("coarse graining needs equal spacing on all axes")
    ratio = cell_size / dx[0]
    if ratio < 1 - 1e-9:
        raise ValueError(f"cell size {cell_size} is smaller than the grid spacing {dx[0]}")
    c = int(round(ratio))
    if abs(c - ratio) > 1e-6 * ratio:
        raise ValueError(f"cell size {cell_size} is not a whole multiple of the grid spacing {dx[0]}")
    if window is not None:
        p, q = p[window], q[window]
    vol = grid.cell_volume
    p = p / (p.sum() * vol)
    q = q / (q.sum() * vol)
    pb, qb = _block_mean(p, c), _block_mean(q, c)
    cell_vol = vol * c ** grid.dims
    pos = pb > 0
    if np.any(pos & (qb <= 0)):
        return math.inf
    h = float(np.sum(pb[pos] * np.log(pb[pos] / qb[pos])) * cell_vol)
    return max(h, 0.0)


@dataclass(frozen=True, eq=False)
class HFunctionSeries:
    times: np.ndarray
    H_values: np.ndarray
    cell_size: float
    N_particles: int
    escaped: int = 0

    def __post_init__(self):
        h = np.asarray(self.H_values, dtype=float)
        if not np.all(np.isfinite(h)) or np.any(h < 0):
            raise ValueError("H values must be finite and nonnegative")
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "H_values", h)

    @property
    def relative_decrease(self) -> float:
        return 1.0 - self.H_values[-1] / self.H_values[0]

    @property
    def max_ratio(self) -> float:
        return float(self.H_values.max() / self.H_values[0])

    def to_csv(self, path):
        return write_table_csv(path, ["t", "H"], [self.times, self.H_values])


def relaxation_series(
    states: Callable[[], Sequence[WaveFunction]] | Sequence[Sequence[WaveFunction]],
    H: Hamiltonian,
    particles: np.ndarray,
    cell_size: float,
    dt_path: float,
    *,
    window: tuple[slice, ...] | None = None,
    density_floor: float = DENSITY_FLOOR,
    max_escape_fraction: float = 0.01,
    workers: int = 1,
) -> HFunctionSeries:
    """Carry ``particles`` through consecutive snapshot segments and record ``H`` at each segment end.

    ``states`` yields lists of snapshots; consecutive segments share their
    boundary snapshot. Only one segment of velocity fields is held in memory
    at a time. ``H`` compares the particle histogram with ``|psi(t)|^2``.
    """
    x = np.array(particles, dtype=float)
    n = len(x)
    alive = np.ones(n, bool)
    times, hs = [], []
    first = True
    for seg in states:
        seg = list(seg)
        if first:
            times.append(seg[0].time)
            hs.append(_h_of(x[alive], seg[0], cell_size, window))
            first = False
        stack = FieldStack([s.time for s in seg], tuple(velocity_field(s, H, density_floor) for s in seg))
        ts = integrate(x[alive], stack, dt_path, record_stride=len(seg), max_escape_fraction=1.0, workers=workers)
        x[alive] = ts.endpoints
        idx = np.flatnonzero(alive)
        alive[idx[ts.escaped]] = False
        if 1.0 - alive.mean() > max_escape_fraction:
            raise EscapeError(f"{n - alive.sum()} of {n} particles entered the masked region")
        times.append(seg[-1].time)
        hs.append(_h_of(x[alive], seg[-1], cell_size, window))
    return HFunctionSeries(np.array(times), np.array(hs), cell_size, n, int(n - alive.sum()))


def _h_of(points, psi: WaveFunction, cell_size, window):
    emp = histogram_density(points, psi.grid, psi.time)
    return coarse_grained_H(emp, np.abs(psi.amplitudes) ** 2, cell_size, psi.grid, window=window)
