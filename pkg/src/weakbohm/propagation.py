"""Split-operator time evolution for ``H = p^2/2m + V(x)``.

Each step is a Strang splitting: half potential kick, exact kinetic drift in
Fourier space, half potential kick. Consecutive half kicks inside a run of
steps are fused into full kicks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, GuardrailError
from .wavefield import Grid, WaveFunction, _masses, spectral_derivative

__all__ = [
    "Potential",
    "Hamiltonian",
    "PropagatorConfig",
    "Propagator",
    "check_guardrails",
    "evolve_step",
    "evolve",
    "energy",
]

MAX_POTENTIAL_PHASE = 0.1
MAX_KINETIC_PHASE = math.pi / 4


@dataclass(frozen=True, eq=False)
class Potential:
    """Tagged potential family; build with the classmethods."""

    kind: str
    omega: float = 0.0
    lam: float = 0.0
    barrier_height: float = 0.0
    slit_separation: float = 0.0
    slit_width: float = 0.0
    barrier_thickness: float = 0.0
    table: np.ndarray | None = field(default=None, repr=False)
    table_grid: Grid | None = field(default=None, repr=False)

    KINDS = ("free", "harmonic", "quartic", "double_slit", "tabulated")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}")

    @classmethod
    def free(cls):
        return cls("free")

    @classmethod
    def harmonic(cls, omega: float):
        return cls("harmonic", omega=float(omega))

    @classmethod
    def quartic(cls, lam: float, omega: float = 0.0):
        """``lam * x^4`` plus an optional harmonic part ``m omega^2 x^2 / 2``."""
        return cls("quartic", omega=float(omega), lam=float(lam))

    @classmethod
    def double_slit(cls, barrier_height, slit_separation, slit_width, barrier_thickness):
        """Wall across axis 0 at ``x = 0`` with two openings in axis 1 at ``+-d/2`` (2D grids only)."""
        return cls(
            "double_slit",
            barrier_height=float(barrier_height),
            slit_separation=float(slit_separation),
            slit_width=float(slit_width),
            barrier_thickness=float(barrier_thickness),
        )

    @classmethod
    def tabulated(cls, values, grid: Grid):
        values = np.array(values, dtype=float).reshape(grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("tabulated potential must be finite")
        values.setflags(write=False)
        return cls("tabulated", table=values, table_grid=grid)

    @property
    def at_most_quadratic(self) -> bool:
        return self.kind in ("free", "harmonic")

    def values(self, grid: Grid, mass=1.0) -> np.ndarray:
        masses = _masses(mass, grid.dims)
        xs = grid.mesh()
        if self.kind == "free":
            return np.zeros(grid.shape)
        if self.kind in ("harmonic", "quartic"):
            v = sum(0.5 * m * self.omega ** 2 * x ** 2 for m, x in zip(masses, xs))
            if self.kind == "quartic":
                v = v + sum(self.lam * x ** 4 for x in xs)
            return np.asarray(v, dtype=float)
        if self.kind == "double_slit":
            if grid.dims != 2:
                raise ValueError("double_slit potential needs a 2D grid")
            x, y = xs
            wall = np.abs(x) < self.barrier_thickness / 2
            slit = np.abs(np.abs(y) - self.slit_separation / 2) < self.slit_width / 2
            return np.where(wall & ~slit, self.barrier_height, 0.0)
        if grid != self.table_grid:
            raise GridMismatchError("tabulated potential used on a different grid")
        return np.array(self.table)

    def gradient(self, grid: Grid, axis: int, mass=1.0) -> np.ndarray:
        """``dV/dx_axis``: closed form for named families, spectral otherwise."""
        m = _masses(mass, grid.dims)[axis]
        x = grid.mesh()[axis]
        if self.kind == "free":
            return np.zeros(grid.shape)
        if self.kind == "harmonic":
            return m * self.omega ** 2 * x
        if self.kind == "quartic":
            return m * self.omega ** 2 * x + 4 * self.lam * x ** 3
        return spectral_derivative(self.values(grid, mass), grid, axis)


@dataclass(frozen=True)
class Hamiltonian:
    mass: float | tuple[float, ...] = 1.0
    potential: Potential = field(default_factory=Potential.free)
    hbar: float = 1.0

    def __post_init__(self):
        if not self.hbar > 0:
            raise ValueError("hbar must be positive")
        if any(m <= 0 for m in np.atleast_1d(self.mass)):
            raise ValueError("mass must be positive")

    def masses(self, grid: Grid) -> tuple[float, ...]:
        return _masses(self.mass, grid.dims)

    def potential_values(self, grid: Grid) -> np.ndarray:
        return self.potential.values(grid, self.mass)

    def apply(self, amps: np.ndarray, grid: Grid) -> np.ndarray:
        """``H psi`` for position amplitudes (batch axes allowed in front)."""
        axes = tuple(range(-grid.dims, 0))
        kin = 0.5 * self.hbar ** 2 * grid.kinetic_k2(self.masses(grid))
        t_psi = np.fft.ifftn(kin * np.fft.fftn(amps, axes=axes), axes=axes)
        return t_psi + self.potential_values(grid) * amps


@dataclass(frozen=True)
class PropagatorConfig:
    """Strang splitting with fixed step ``dt``."""

    dt: float
    scheme: str = "strang"

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.scheme != "strang":
            raise ValueError("only Strang splitting is available")


def check_guardrails(H: Hamiltonian, grid: Grid, cfg: PropagatorConfig) -> dict[str, float]:
    """Per-step potential and kinetic phases; raises :class:`GuardrailError` if either is too large."""
    v_phase = float(np.max(np.abs(H.potential_values(grid)))) * cfg.dt / H.hbar
    k_max2 = sum((np.pi / dx) ** 2 / m for dx, m in zip(grid.spacing, H.masses(grid)))
    t_phase = 0.5 * H.hbar * k_max2 * cfg.dt
    phases = {"potential_phase": v_phase, "kinetic_phase": t_phase}
    if v_phase >= MAX_POTENTIAL_PHASE:
        raise GuardrailError(f"max|V| dt/hbar = {v_phase:.3g} >= {MAX_POTENTIAL_PHASE}")
    if t_phase >= MAX_KINETIC_PHASE:
        raise GuardrailError(f"kinetic phase per step {t_phase:.3g} >= pi/4")
    return phases


def _check_compatible(psi: WaveFunction, H: Hamiltonian):
    if psi.representation != "position":
        raise ValueError("propagation acts on position-representation states")
    if not math.isclose(psi.hbar, H.hbar) or not np.allclose(psi.masses, H.masses(psi.grid)):
        raise ValueError("state and Hamiltonian disagree on hbar or mass")
    if H.potential.kind == "tabulated" and H.potential.table_grid != psi.grid:
        raise GridMismatchError("potential was tabulated on a different grid")


class Propagator:
    """Precomputed Strang factors for one (H, grid, dt); works on batched amplitude arrays."""

    def __init__(self, H: Hamiltonian, grid: Grid, cfg: PropagatorConfig, *, check: bool = True):
        if check:
            check_guardrails(H, grid, cfg)
        self.H, self.grid, self.dt = H, grid, cfg.dt
        self.axes = tuple(range(-grid.dims, 0))
        v = H.potential_values(grid)
        self.free = not np.any(v)
        self.half_kick = np.exp(-0.5j * v * cfg.dt / H.hbar)
        self.kick = np.exp(-1j * v * cfg.dt / H.hbar)
        self._k2 = grid.kinetic_k2(H.masses(grid))
        self.drift = self._drift(cfg.dt)

    def _drift(self, t: float) -> np.ndarray:
        return np.exp(-0.5j * self.H.hbar * self._k2 * t)

    def advance(self, amps: np.ndarray, n_steps: int) -> np.ndarray:
        """Apply ``n_steps`` Strang steps; returns a new array."""
        if n_steps < 0:
            raise ValueError("negative step count")
        if n_steps == 0:
            return np.array(amps, dtype=complex)
        fft, ifft, axes = np.fft.fftn, np.fft.ifftn, self.axes
        if self.free:
            return ifft(fft(amps, axes=axes) * self._drift(n_steps * self.dt), axes=axes)
        out = amps * self.half_kick
        for i in range(n_steps):
            out = ifft(fft(out, axes=axes) * self.drift, axes=axes)
            out *= self.kick if i < n_steps - 1 else self.half_kick
        return out


def evolve_step(psi: WaveFunction, H: Hamiltonian, cfg: PropagatorConfig) -> WaveFunction:
    """One Strang step of length ``cfg.dt``."""
    _check_compatible(psi, H)
    prop = Propagator(H, psi.grid, cfg)
    return psi.replace(amplitudes=prop.advance(psi.amplitudes, 1), time=psi.time + cfg.dt)


def _step_count(span: float, dt: float) -> int:
    n = int(round(span / dt))
    if abs(n * dt - span) > 1e-6 * dt:
        raise ValueError(f"time span {span} is not a whole number of steps of {dt}")
    return n


def evolve(
    psi0: WaveFunction, H: Hamiltonian, cfg: PropagatorConfig, t_final: float, snapshot_stride: int = 1
) -> list[WaveFunction]:
    """Snapshots every ``snapshot_stride`` steps from ``psi0.time`` to ``t_final`` inclusive.

    The final state is always included even when the step count is not a
    multiple of the stride.
    """
    if snapshot_stride < 1:
        raise ValueError("snapshot_stride must be >= 1")
    if t_final < psi0.time:
        raise ValueError("t_final precedes the initial time")
    _check_compatible(psi0, H)
    n_total = _step_count(t_final - psi0.time, cfg.dt)
    prop = Propagator(H, psi0.grid, cfg)
    out = [psi0]
    amps, done = psi0.amplitudes, 0
    while done < n_total:
        n = min(snapshot_stride, n_total - done)
        amps = prop.advance(amps, n)
        done += n
        out.append(psi0.replace(amplitudes=amps, time=psi0.time + done * cfg.dt))
    return out


def energy(psi: WaveFunction, H: Hamiltonian) -> float:
    """Expectation value ``<psi|H|psi>``."""
    h_psi = H.apply(psi.amplitudes, psi.grid)
    return float(np.real(np.vdot(psi.amplitudes, h_psi)) * psi.grid.cell_volume)
