"""Wavefunctions on uniform periodic grids.

Position amplitudes live on a :class:`Grid` of ``N`` points per axis with
``x_j = a + j*dx``. The momentum representation uses the physicist
convention

    phi(p) = (2 pi hbar)^(-d/2) * sum_j exp(-i p.x_j / hbar) psi(x_j) dV

on the conjugate grid ``p_k = hbar * k`` (ascending order, ``dp = 2 pi hbar / L``),
which makes the transform unitary between the two grid measures.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateStateError, GridMismatchError

__all__ = [
    "Grid",
    "WaveFunction",
    "DensityField",
    "normalize",
    "position_density",
    "momentum_density",
    "momentum_representation",
    "position_representation",
    "spectral_derivative",
    "gaussian",
    "plane_wave",
    "superpose",
    "save_binary",
    "load_binary",
]

MAGIC = b"BWL1"


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid over ``[a_i, b_i)`` with ``N_i`` points per axis."""

    extents: tuple[tuple[float, float], ...]
    points: tuple[int, ...]

    def __post_init__(self):
        extents = tuple((float(a), float(b)) for a, b in self.extents)
        points = tuple(int(n) for n in self.points)
        if len(extents) != len(points):
            raise ValueError("extents and points must have one entry per axis")
        if len(points) not in (1, 2):
            raise ValueError(f"grid must be 1D or 2D, got {len(points)} axes")
        for n in points:
            if n < 8 or not _is_power_of_two(n):
                raise ValueError(f"grid points must be a power of two >= 8, got {n}")
        for a, b in extents:
            if not b > a:
                raise ValueError(f"empty extent [{a}, {b})")
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "points", points)

    @classmethod
    def regular(cls, lo, hi, n, dims=1) -> "Grid":
        """Same interval and point count on every axis."""
        return cls(((lo, hi),) * dims, (n,) * dims)

    @property
    def dims(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def size(self) -> int:
        return int(np.prod(self.points))

    @property
    def lengths(self) -> tuple[float, ...]:
        return tuple(b - a for a, b in self.extents)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((b - a) / n for (a, b), n in zip(self.extents, self.points))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(a + dx * np.arange(n) for (a, _), dx, n in zip(self.extents, self.spacing, self.points))

    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    def wavenumbers(self, axis: int) -> np.ndarray:
        """Angular wavenumbers of ``axis`` in FFT order."""
        return 2 * np.pi * np.fft.fftfreq(self.points[axis], self.spacing[axis])

    def kinetic_k2(self, masses: Sequence[float] | None = None) -> np.ndarray:
        """Sum over axes of ``k_i^2 / m_i`` broadcast to the grid shape (FFT order)."""
        masses = masses or (1.0,) * self.dims
        ks = np.meshgrid(*[self.wavenumbers(i) for i in range(self.dims)], indexing="ij")
        return sum(k ** 2 / m for k, m in zip(ks, masses))

    def conjugate(self, hbar: float = 1.0) -> "Grid":
        """Momentum grid paired with this position grid."""
        extents = tuple((-hbar * np.pi / dx, hbar * np.pi / dx) for dx in self.spacing)
        return Grid(extents, self.points)

    def cell_edges(self, axis: int = 0, coarsen: int = 1) -> np.ndarray:
        """Edges of grid cells centred on the grid points, optionally merged ``coarsen`` at a time."""
        n = self.points[axis]
        if coarsen < 1 or n % coarsen:
            raise ValueError(f"coarsening factor {coarsen} must divide {n}")
        dx = self.spacing[axis]
        a = self.extents[axis][0]
        return a - dx / 2 + dx * np.arange(0, n + 1, coarsen)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points (shape ``(..., dims)``) inside the extents."""
        points = np.asarray(points, dtype=float).reshape(-1, self.dims)
        ok = np.ones(len(points), dtype=bool)
        for i, (a, b) in enumerate(self.extents):
            ok &= (points[:, i] >= a) & (points[:, i] < b)
        return ok


def _masses(mass, dims: int) -> tuple[float, ...]:
    if np.ndim(mass) == 0:
        return (float(mass),) * dims
    mass = tuple(float(m) for m in mass)
    if len(mass) != dims:
        raise ValueError(f"need one mass per axis ({dims}), got {len(mass)}")
    return mass


@dataclass(frozen=True, eq=False)
class WaveFunction:
    """Immutable snapshot of complex amplitudes on a grid.

    ``mass`` may be a scalar or one value per axis (e.g. two particles on a
    line sharing a 2D configuration grid).
    """

    grid: Grid
    amplitudes: np.ndarray
    time: float = 0.0
    hbar: float = 1.0
    mass: float | tuple[float, ...] = 1.0
    representation: str = "position"
    conjugate_grid: Grid | None = field(default=None, repr=False)

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=np.complex128)
        if amps.size != self.grid.size:
            raise GridMismatchError(f"{amps.size} amplitudes for a grid of {self.grid.size} points")
        amps = amps.reshape(self.grid.shape)
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "time", float(self.time))
        if not (self.hbar > 0):
            raise ValueError("hbar must be positive")
        if any(m <= 0 for m in _masses(self.mass, self.grid.dims)):
            raise ValueError("mass must be positive")
        if self.representation not in ("position", "momentum"):
            raise ValueError(f"unknown representation {self.representation!r}")

    @property
    def masses(self) -> tuple[float, ...]:
        return _masses(self.mass, self.grid.dims)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.amplitudes) ** 2) * self.grid.cell_volume))

    def replace(self, **changes) -> "WaveFunction":
        return replace(self, **changes)

    def inner(self, other: "WaveFunction") -> complex:
        """``<self|other>`` with the grid measure."""
        if other.grid != self.grid:
            raise GridMismatchError("inner product of states on different grids")
        return complex(np.vdot(self.amplitudes, other.amplitudes) * self.grid.cell_volume)


@dataclass(frozen=True, eq=False)
class DensityField:
    """Nonnegative probability density on a grid."""

    grid: Grid
    values: np.ndarray
    representation: str = "position"
    time: float = 0.0

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(self.grid.shape)
        if np.any(values < 0):
            raise ValueError("density must be nonnegative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def total(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def marginal(self, axis: int) -> np.ndarray:
        """Density of coordinate ``axis`` with the others integrated out."""
        others = tuple(i for i in range(self.grid.dims) if i != axis)
        dv = np.prod([self.grid.spacing[i] for i in others]) if others else 1.0
        return self.values.sum(axis=others) * dv if others else self.values.copy()

    def to_csv(self, path) -> Path:
        from ._io import write_grid_csv

        return write_grid_csv(path, self.grid, {"value": self.values})


def normalize(psi: WaveFunction) -> WaveFunction:
    """Rescale to unit norm; the phase is untouched."""
    n = psi.norm()
    if not np.isfinite(n) or n == 0.0:
        raise DegenerateStateError("degenerate state")
    return psi.replace(amplitudes=psi.amplitudes / n)


def position_density(psi: WaveFunction) -> DensityField:
    if psi.representation != "position":
        raise ValueError("position_density needs a position-representation state")
    return DensityField(psi.grid, np.abs(psi.amplitudes) ** 2, "position", psi.time)


def momentum_density(psi: WaveFunction) -> DensityField:
    phi = psi if psi.representation == "momentum" else momentum_representation(psi)
    return DensityField(phi.grid, np.abs(phi.amplitudes) ** 2, "momentum", phi.time)


def _axes(grid: Grid) -> tuple[int, ...]:
    return tuple(range(-grid.dims, 0))


def _origin_phase(grid: Grid, sign: float) -> np.ndarray:
    """``exp(sign * i k.a)`` in ascending-k order."""
    ks = np.meshgrid(*[np.fft.fftshift(grid.wavenumbers(i)) for i in range(grid.dims)], indexing="ij")
    return np.exp(sign * 1j * sum(k * a for k, (a, _) in zip(ks, grid.extents)))


def to_momentum_array(amps: np.ndarray, grid: Grid, hbar: float) -> np.ndarray:
    """Transform position amplitudes (leading batch axes allowed) to momentum amplitudes."""
    axes = _axes(grid)
    scale = grid.cell_volume / (2 * np.pi * hbar) ** (grid.dims / 2)
    return scale * _origin_phase(grid, -1.0) * np.fft.fftshift(np.fft.fftn(amps, axes=axes), axes=axes)


def to_position_array(amps: np.ndarray, grid: Grid, hbar: float) -> np.ndarray:
    """Inverse of :func:`to_momentum_array`; ``grid`` is the position grid."""
    axes = _axes(grid)
    dp = np.prod([2 * np.pi * hbar / L for L in grid.lengths])
    scale = grid.size * dp / (2 * np.pi * hbar) ** (grid.dims / 2)
    return scale * np.fft.ifftn(np.fft.ifftshift(amps * _origin_phase(grid, 1.0), axes=axes), axes=axes)


def momentum_representation(psi: WaveFunction) -> WaveFunction:
    """Unitary transform to the momentum grid ``psi.grid.conjugate(hbar)``."""
    if psi.representation != "position":
        raise ValueError("state is already in the momentum representation")
    phi = to_momentum_array(psi.amplitudes, psi.grid, psi.hbar)
    return psi.replace(
        grid=psi.grid.conjugate(psi.hbar), amplitudes=phi, representation="momentum", conjugate_grid=psi.grid
    )


def position_representation(phi: WaveFunction) -> WaveFunction:
    if phi.representation != "momentum" or phi.conjugate_grid is None:
        raise ValueError("need a momentum-representation state produced by momentum_representation")
    grid = phi.conjugate_grid
    psi = to_position_array(phi.amplitudes, grid, phi.hbar)
    return phi.replace(grid=grid, amplitudes=psi, representation="position", conjugate_grid=None)


def spectral_derivative(values: np.ndarray, grid: Grid, axis: int, order: int = 1) -> np.ndarray:
    """Fourier derivative along ``axis`` of an array whose trailing axes match ``grid``.

    The Nyquist component is dropped for odd orders so real input gives
    real output.
    """
    values = np.asarray(values)
    n = grid.points[axis]
    k = grid.wavenumbers(axis)
    mult = (1j * k) ** order
    if order % 2:
        mult[n // 2] = 0.0
    shape = [1] * grid.dims
    shape[axis] = n
    ax = axis - grid.dims
    out = np.fft.ifft(np.fft.fft(values, axis=ax) * mult.reshape(shape), axis=ax)
    return out.real if np.isrealobj(values) else out


def gaussian(grid: Grid, center, width, kick=0.0, *, hbar=1.0, mass=1.0, time=0.0) -> WaveFunction:
    """Normalized Gaussian packet; ``width`` is the position standard deviation of ``|psi|^2``
    and ``kick`` the mean wavenumber, per axis or scalar."""
    d = grid.dims
    center, width, kick = (np.broadcast_to(np.asarray(v, dtype=float), (d,)) for v in (center, width, kick))
    amps = np.ones(grid.shape, dtype=complex)
    for x, c, s, k in zip(grid.mesh(), center, width, kick):
        amps = amps * np.exp(-((x - c) ** 2) / (4 * s ** 2) + 1j * k * x)
    return normalize(WaveFunction(grid, amps, time, hbar, mass))


def plane_wave(grid: Grid, wavenumber, *, hbar=1.0, mass=1.0, time=0.0) -> WaveFunction:
    k = np.broadcast_to(np.asarray(wavenumber, dtype=float), (grid.dims,))
    phase = sum(ki * x for ki, x in zip(k, grid.mesh()))
    return normalize(WaveFunction(grid, np.exp(1j * phase), time, hbar, mass))


def superpose(states: Sequence[WaveFunction], weights: Sequence[complex] | None = None) -> WaveFunction:
    """Normalized linear combination of states sharing grid, time and constants."""
    if not states:
        raise ValueError("nothing to superpose")
    first = states[0]
    weights = np.ones(len(states)) if weights is None else weights
    amps = np.zeros(first.grid.shape, dtype=complex)
    for w, s in zip(weights, states):
        if s.grid != first.grid:
            raise GridMismatchError("superposed states live on different grids")
        amps = amps + w * s.amplitudes
    return normalize(first.replace(amplitudes=amps))


def save_binary(psi: WaveFunction, path) -> Path:
    """Little-endian dump: magic, dims, N_i, extents, time, then (re, im) pairs row-major."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_header(psi.grid, psi.time))
        fh.write(np.ascontiguousarray(psi.amplitudes).astype("<c16").tobytes())
    return path


def _header(grid: Grid, time: float) -> bytes:
    flat = [v for ext in grid.extents for v in ext]
    return (
        MAGIC
        + struct.pack("<I", grid.dims)
        + struct.pack(f"<{grid.dims}I", *grid.points)
        + struct.pack(f"<{2 * grid.dims}d", *flat)
        + struct.pack("<d", time)
    )


def read_records(path) -> list[tuple[Grid, float, np.ndarray]]:
    """All BWL1 records in a file as ``(grid, time, complex array)``."""
    data = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(data):
        if data[pos:pos + 4] != MAGIC:
            raise ValueError(f"bad magic at byte {pos}")
        pos += 4
        (dims,) = struct.unpack_from("<I", data, pos)
        pos += 4
        points = struct.unpack_from(f"<{dims}I", data, pos)
        pos += 4 * dims
        flat = struct.unpack_from(f"<{2 * dims}d", data, pos)
        pos += 16 * dims
        (time,) = struct.unpack_from("<d", data, pos)
        pos += 8
        grid = Grid(tuple(zip(flat[::2], flat[1::2])), points)
        n = grid.size
        amps = np.frombuffer(data, dtype="<c16", count=n, offset=pos).reshape(grid.shape).copy()
        pos += 16 * n
        out.append((grid, time, amps))
    return out


def load_binary(path, *, hbar=1.0, mass=1.0) -> WaveFunction:
    (grid, time, amps), *rest = read_records(path)
    if rest:
        raise ValueError("file holds more than one record")
    return WaveFunction(grid, amps, time, hbar, mass)
