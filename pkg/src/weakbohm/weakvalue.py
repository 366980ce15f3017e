"""Weak values, the probability current and the velocity fields built from them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._io import write_grid_csv
from .errors import PostSelectionError
from .propagation import Hamiltonian, Propagator, PropagatorConfig, _step_count
from .wavefield import (
    Grid,
    WaveFunction,
    momentum_representation,
    read_records,
    spectral_derivative,
    to_momentum_array,
)

__all__ = [
    "VelocityField",
    "DENSITY_FLOOR",
    "OVERLAP_FLOOR",
    "weak_value",
    "current",
    "velocity_field",
    "momentum_velocity_field",
    "momentum_current",
    "momentum_commutator_field",
    "apply_momentum",
]

DENSITY_FLOOR = 1e-8
OVERLAP_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Vector field on a grid; components are zero (and ``mask`` true) where undefined."""

    grid: Grid
    components: tuple[np.ndarray, ...]
    time: float
    representation: str = "position"
    provenance: str = "analytic"
    mask: np.ndarray | None = None
    quantity: str = "velocity"

    def __post_init__(self):
        comps = tuple(np.array(c, dtype=float).reshape(self.grid.shape) for c in self.components)
        if len(comps) != self.grid.dims:
            raise ValueError(f"need {self.grid.dims} components, got {len(comps)}")
        mask = np.zeros(self.grid.shape, bool) if self.mask is None else np.array(self.mask, bool)
        mask = mask.reshape(self.grid.shape)
        for c in comps:
            if not np.all(np.isfinite(c[~mask])):
                raise ValueError("velocity field is not finite at unmasked points")
            c.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "mask", mask)
        if self.representation not in ("position", "momentum"):
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.provenance not in ("analytic", "estimated"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def to_csv(self, path):
        names = ("v1", "v2")[: self.grid.dims]
        cols = {n: c for n, c in zip(names, self.components)}
        cols["mask"] = self.mask.astype(int)
        axis_names = ("x", "y") if self.representation == "position" else ("p", "q")
        return write_grid_csv(path, self.grid, cols, axis_names)

    def to_binary(self, path):
        """One BWL1 record per component: value in the real part, mask (1/0) in the imaginary part."""
        from .wavefield import _header

        with open(path, "wb") as fh:
            for c in self.components:
                fh.write(_header(self.grid, self.time))
                fh.write((c + 1j * self.mask).astype("<c16").tobytes())
        return path

    @classmethod
    def from_binary(cls, path, **kwargs) -> "VelocityField":
        recs = read_records(path)
        grid, time, first = recs[0]
        comps = tuple(r[2].real for r in recs)
        return cls(grid, comps, time, mask=first.imag > 0.5, **kwargs)


def _mask(density: np.ndarray, floor: float) -> np.ndarray:
    return density < floor * density.max()


Operator = np.ndarray | Callable[[np.ndarray], np.ndarray]


def _apply(A: Operator, amps: np.ndarray) -> np.ndarray:
    if callable(A):
        return np.asarray(A(amps), dtype=complex).reshape(amps.shape)
    A = np.asarray(A)
    if A.shape == amps.shape:
        return A * amps
    if A.ndim == 2 and A.shape[0] == A.shape[1] == amps.size:
        return (A @ amps.ravel()).reshape(amps.shape)
    raise ValueError(f"operator of shape {A.shape} does not act on a grid of shape {amps.shape}")


def weak_value(
    A: Operator,
    psi: WaveFunction,
    phi: WaveFunction,
    H: Hamiltonian | None = None,
    tau: float = 0.0,
    cfg: PropagatorConfig | None = None,
    overlap_floor: float = OVERLAP_FLOOR,
) -> float:
    """``Re <phi|U A|psi> / <phi|U|psi>`` with ``U = exp(-i H tau / hbar)``.

    ``A`` is a diagonal (array shaped like the grid), a dense matrix, or a
    callable acting on amplitude arrays. ``U`` is realised with the
    split-operator propagator of step ``cfg.dt``; ``tau = 0`` means ``U = 1``.
    """
    a_psi = _apply(A, psi.amplitudes)
    psi_amps = psi.amplitudes
    if tau > 0:
        if H is None or cfg is None:
            raise ValueError("a nonzero duration needs a Hamiltonian and a propagator config")
        prop = Propagator(H, psi.grid, cfg)
        n = _step_count(tau, cfg.dt)
        a_psi, psi_amps = prop.advance(a_psi, n), prop.advance(psi_amps, n)
    dv = psi.grid.cell_volume
    denom = np.vdot(phi.amplitudes, psi_amps) * dv
    if abs(denom) < overlap_floor:
        raise PostSelectionError("post-selection impossible")
    num = np.vdot(phi.amplitudes, a_psi) * dv
    return float(np.real(num / denom))


def apply_momentum(amps: np.ndarray, grid: Grid, hbar: float, axis: int) -> np.ndarray:
    """``p_axis psi`` evaluated by multiplying by ``hbar k`` in Fourier space."""
    return -1j * hbar * spectral_derivative(amps, grid, axis)


def current(psi: WaveFunction) -> VelocityField:
    """Probability current ``(hbar/m) Im[psi* grad psi]`` with spectral gradients."""
    comps = []
    for axis, m in enumerate(psi.masses):
        grad = spectral_derivative(psi.amplitudes, psi.grid, axis)
        comps.append(psi.hbar / m * np.imag(np.conj(psi.amplitudes) * grad))
    return VelocityField(psi.grid, tuple(comps), psi.time, quantity="current")


def velocity_field(psi: WaveFunction, H: Hamiltonian, density_floor: float = DENSITY_FLOOR) -> VelocityField:
    """Weak-value velocity ``Re[psi*(x) <x|i[H, x_n]|psi>] / (hbar |psi(x)|^2)``.

    For ``H = p^2/2m + V`` the commutator is ``i[H, x_n] = hbar p_n / m``; it is
    applied in the momentum representation.
    """
    density = np.abs(psi.amplitudes) ** 2
    mask = _mask(density, density_floor)
    safe = np.where(mask, 1.0, density)
    comps = []
    for axis, m in enumerate(H.masses(psi.grid)):
        comm_psi = H.hbar * apply_momentum(psi.amplitudes, psi.grid, H.hbar, axis) / m
        v = np.real(np.conj(psi.amplitudes) * comm_psi) / (H.hbar * safe)
        comps.append(np.where(mask, 0.0, v))
    return VelocityField(psi.grid, tuple(comps), psi.time, mask=mask)


def momentum_current(psi: WaveFunction, H: Hamiltonian) -> tuple[WaveFunction, tuple[np.ndarray, ...]]:
    """Momentum amplitudes and the flux ``Re[phi*(p) <p|-dV/dx_n|psi>]`` per axis."""
    phi = momentum_representation(psi)
    fluxes = []
    for axis in range(psi.grid.dims):
        force_psi = -H.potential.gradient(psi.grid, axis, H.mass) * psi.amplitudes
        chi = to_momentum_array(force_psi, psi.grid, psi.hbar)
        fluxes.append(np.real(np.conj(phi.amplitudes) * chi))
    return phi, tuple(fluxes)


def momentum_velocity_field(
    psi: WaveFunction, H: Hamiltonian, density_floor: float = DENSITY_FLOOR
) -> VelocityField:
    """Weak-value velocity of momentum, ``Re[<p|-V'(x)|psi> / <p|psi>]``, on the conjugate grid."""
    phi, fluxes = momentum_current(psi, H)
    density = np.abs(phi.amplitudes) ** 2
    mask = _mask(density, density_floor)
    safe = np.where(mask, 1.0, density)
    comps = tuple(np.where(mask, 0.0, f / safe) for f in fluxes)
    return VelocityField(phi.grid, comps, psi.time, representation="momentum", mask=mask)


def momentum_commutator_field(
    psi: WaveFunction, H: Hamiltonian, density_floor: float = DENSITY_FLOOR
) -> VelocityField:
    """Momentum velocity from the raw definition ``i[H, p] = i(H p - p H)``, applied numerically.

    Slow and less accurate than :func:`momentum_velocity_field`; kept as an
    independent cross-check of the closed form.
    """
    grid, hb = psi.grid, H.hbar
    phi = to_momentum_array(psi.amplitudes, grid, hb)
    density = np.abs(phi) ** 2
    mask = _mask(density, density_floor)
    safe = np.where(mask, 1.0, density)
    comps = []
    for axis in range(grid.dims):
        p_psi = apply_momentum(psi.amplitudes, grid, hb, axis)
        comm = 1j * (H.apply(p_psi, grid) - apply_momentum(H.apply(psi.amplitudes, grid), grid, hb, axis))
        chi = to_momentum_array(comm, grid, hb)
        comps.append(np.where(mask, 0.0, np.real(np.conj(phi) * chi) / (hb * safe)))
    return VelocityField(grid.conjugate(hb), tuple(comps), psi.time, representation="momentum", mask=mask)

