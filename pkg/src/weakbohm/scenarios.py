"""Runtime scenarios built from validated configs, plus the bundled scenario library."""
from __future__ import annotations

from functools import cached_property
from importlib import resources

import numpy as np

from .config import GaussianSpec, ModesSpec, ScenarioConfig, SuperpositionSpec, load_config, parse_config
from .measurement import rng_stream
from .propagation import Hamiltonian, Potential, PropagatorConfig, evolve
from .wavefield import Grid, WaveFunction, gaussian, normalize, superpose

__all__ = ["Scenario", "BUNDLED", "bundled", "bundled_path", "box_modes"]

BUNDLED = ("free_gaussian", "harmonic_coherent", "quartic_superposition", "twin_slit", "relaxation_box")

# stream keys under the master seed
STREAM_PHASES = 1
STREAM_PARTICLES = 2
STREAM_PATHS = 7
STREAM_WEAKSIM = 10
STREAM_ESTIMATED = 100


def box_modes(grid: Grid, box, modes, *, hbar=1.0, mass=1.0, time=0.0) -> WaveFunction:
    """Superposition of hard-wall box eigenfunctions ``prod_i sin(n_i pi x_i / L_i)``.

    ``modes`` is a sequence of ``(n, complex amplitude)``. On a grid covering
    ``[-L, L)`` the sines are the odd periodic extension of the box state, so
    free propagation on the torus reproduces hard-wall dynamics in ``[0, L]``.
    """
    amps = np.zeros(grid.shape, dtype=complex)
    for n, c in modes:
        term = np.ones(grid.shape)
        for x, ni, L in zip(grid.mesh(), n, box):
            term = term * np.sin(ni * np.pi * x / L)
        amps = amps + c * term
    return normalize(WaveFunction(grid, amps, time, hbar, mass))


class Scenario:
    """A config plus a refinement level (grid points doubled and ``dt`` halved per level)."""

    def __init__(self, config: ScenarioConfig, level: int = 0):
        self.config = config
        self.level = int(level)

    def refined(self, level: int) -> "Scenario":
        return Scenario(self.config, level)

    @property
    def name(self) -> str:
        return self.config.name

    @property
    def seed(self) -> int:
        return self.config.seed

    @cached_property
    def grid(self) -> Grid:
        g = self.config.grid
        f = 2 ** self.level
        points = tuple(n * f for n in g.points)
        if isinstance(self.config.state, ModesSpec):
            # shift by half a cell so no grid point sits on a wall
            extents = tuple((a + (b - a) / (2 * n), b + (b - a) / (2 * n)) for (a, b), n in zip(g.extents, points))
        else:
            extents = tuple(tuple(e) for e in g.extents)
        return Grid(extents, points)

    @property
    def hbar(self) -> float:
        return self.config.constants.hbar

    @property
    def mass(self) -> float:
        return self.config.constants.mass

    @cached_property
    def hamiltonian(self) -> Hamiltonian:
        h = self.config.hamiltonian
        if h.potential == "free":
            pot = Potential.free()
        elif h.potential == "harmonic":
            pot = Potential.harmonic(h.omega)
        elif h.potential == "quartic":
            pot = Potential.quartic(h.lam, h.omega)
        else:
            pot = Potential.double_slit(h.barrier_height, h.slit_separation, h.slit_width, h.barrier_thickness)
        return Hamiltonian(self.mass, pot, self.hbar)

    @property
    def dt(self) -> float:
        return self.config.propagator.dt / 2 ** self.level

    @property
    def propagator(self) -> PropagatorConfig:
        return PropagatorConfig(self.dt)

    @property
    def t_final(self) -> float:
        return self.config.propagator.t_final

    @property
    def snapshot_stride(self) -> int:
        return self.config.propagator.snapshot_stride

    @property
    def dt_path(self) -> float:
        if self.config.trajectories is None:
            return self.snapshot_stride * self.dt
        return self.config.trajectories.dt_path / 2 ** self.level

    def mode_list(self) -> list[tuple[tuple[int, ...], complex]]:
        st = self.config.state
        if st.modes is not None:
            return [(tuple(m.n), m.amplitude * np.exp(1j * m.phase)) for m in st.modes]
        dims = len(st.box)
        ns = np.array(np.meshgrid(*[np.arange(1, st.lowest + 1)] * dims, indexing="ij")).reshape(dims, -1).T
        phases = np.zeros(len(ns))
        if st.random_phases:
            phases = rng_stream(self.seed, STREAM_PHASES).uniform(0.0, 2 * np.pi, len(ns))
        return [(tuple(int(v) for v in n), np.exp(1j * p)) for n, p in zip(ns, phases)]

    def initial_state(self) -> WaveFunction:
        st, g = self.config.state, self.grid
        kw = dict(hbar=self.hbar, mass=self.mass)
        if isinstance(st, GaussianSpec):
            return gaussian(g, st.center, st.width, st.kick, **kw)
        if isinstance(st, SuperpositionSpec):
            parts = [gaussian(g, c.center, c.width, c.kick, **kw) for c in st.components]
            weights = [complex(*c.weight) if isinstance(c.weight, tuple) else c.weight for c in st.components]
            return superpose(parts, weights)
        return box_modes(g, st.box, self.mode_list(), **kw)

    def box_window(self) -> tuple[slice, ...]:
        """Index region of the physical box ``[0, L]`` inside the doubled grid."""
        return tuple(slice(n // 2, None) for n in self.grid.points)

    def ground_mode_density(self) -> np.ndarray:
        """Lowest box-mode density, zero outside the physical box."""
        st, g = self.config.state, self.grid
        dens = np.ones(g.shape)
        inside = np.ones(g.shape, bool)
        for x, L in zip(g.mesh(), st.box):
            dens = dens * np.sin(np.pi * x / L) ** 2
            inside &= (x > 0) & (x < L)
        dens = np.where(inside, dens, 0.0)
        return dens / (dens.sum() * g.cell_volume)

    def states_at(self, t: float) -> WaveFunction:
        psi0 = self.initial_state()
        return evolve(psi0, self.hamiltonian, self.propagator, t, max(1, int(round(t / self.dt))))[-1]

    def snapshots(self, t_final: float | None = None, stride: int | None = None) -> list[WaveFunction]:
        return evolve(
            self.initial_state(), self.hamiltonian, self.propagator,
            self.t_final if t_final is None else t_final, stride or self.snapshot_stride,
        )


def bundled_path(name: str):
    if name not in BUNDLED:
        raise KeyError(f"unknown bundled scenario {name!r}; choose from {', '.join(BUNDLED)}")
    return resources.files("weakbohm") / "scenarios" / f"{name}.yaml"


def bundled(name: str, seed: int | None = None) -> Scenario:
    """Load a bundled scenario by name."""
    path = bundled_path(name)
    return Scenario(parse_config(path.read_text(), f"{name}.yaml", seed))


def from_file(path, seed: int | None = None) -> Scenario:
    return Scenario(load_config(path, seed))
