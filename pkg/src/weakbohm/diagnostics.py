"""Continuity residuals of density/velocity snapshot stacks.

The residual ``dP/dt + div(v P)`` uses centred differences in time and
spectral derivatives in space, and is measured only where the velocity field
is defined.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import write_grid_csv
from .errors import GridMismatchError
from .propagation import Hamiltonian, PropagatorConfig, evolve
from .wavefield import DensityField, Grid, WaveFunction, momentum_representation, spectral_derivative
from .weakvalue import DENSITY_FLOOR, VelocityField, momentum_velocity_field, velocity_field

__all__ = [
    "DiagnosticsReport",
    "continuity_residual",
    "transport_residual",
    "position_snapshots",
    "momentum_snapshots",
    "snapshot_window",
    "resolution_limited",
    "not_reduced",
    "incompatibility_score",
    "IncompatibilityResult",
]

STATIONARY_FLOOR = 1e-9
ROUNDOFF_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class DiagnosticsReport:
    residual_field: np.ndarray = field(repr=False)
    residual_norm_L2: float
    residual_norm_rel: float | None
    representation: str
    resolution: tuple[float, float]
    masked_fraction: float = 0.0
    time_derivative_norm: float = 0.0
    divergence_norm: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("residual_field")
        d["resolution"] = {"dx": self.resolution[0], "dt": self.resolution[1]}
        return d

    def to_json(self, path=None, **extra) -> str:
        text = json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True, default=_json_default)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def residual_to_csv(self, path, grid: Grid):
        return write_grid_csv(path, grid, {"residual": self.residual_field[len(self.residual_field) // 2]})


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _divergence(flux: Sequence[np.ndarray], grid: Grid) -> np.ndarray:
    return sum(spectral_derivative(f, grid, axis) for axis, f in enumerate(flux))


def transport_residual(
    times: np.ndarray,
    densities: Sequence[np.ndarray],
    fields: Sequence[VelocityField],
    grid: Grid,
    *,
    region: np.ndarray | None = None,
    representation: str = "position",
) -> DiagnosticsReport:
    """Residual of ``dP/dt + div(v P)`` at the interior snapshots.

    ``densities`` may be any candidate densities (not necessarily the ones
    that produced the fields). Points masked in any of the involved fields,
    or outside ``region``, are excluded from the norms.
    """
    times = np.asarray(times, dtype=float)
    if len(times) < 3:
        raise ValueError("need at least three consecutive snapshots")
    steps = np.diff(times)
    if not np.allclose(steps, steps[0], rtol=1e-9):
        raise ValueError("snapshot stride mismatch")
    if any(f.grid != grid for f in fields):
        raise GridMismatchError("fields and densities are not co-registered")
    dt = float(steps[0])
    dens = np.stack([np.asarray(d, dtype=float).reshape(grid.shape) for d in densities])
    residuals, dpdt_all, div_all, keep_all = [], [], [], []
    for k in range(1, len(times) - 1):
        dpdt = (dens[k + 1] - dens[k - 1]) / (2 * dt)
        v = fields[k]
        flux = [c * dens[k] for c in v.components]
        div = _divergence(flux, grid)
        res = dpdt + div
        keep = ~(fields[k - 1].mask | v.mask | fields[k + 1].mask)
        if region is not None:
            keep &= region
        residuals.append(np.where(keep, res, 0.0))
        dpdt_all.append(np.where(keep, dpdt, 0.0))
        div_all.append(np.where(keep, div, 0.0))
        keep_all.append(keep)
    res = np.stack(residuals)
    dv = grid.cell_volume * dt
    r_norm = float(np.sqrt(np.sum(res ** 2) * dv))
    d_norm = float(np.sqrt(np.sum(np.stack(dpdt_all) ** 2) * dv))
    div_norm = float(np.sqrt(np.sum(np.stack(div_all) ** 2) * dv))
    p_scale = float(np.sqrt(np.sum(dens[1:-1] ** 2) * dv)) / dt
    denom = max(d_norm, STATIONARY_FLOOR * p_scale)
    rel = r_norm / denom if denom > 0 else None
    masked = 1.0 - float(np.mean(keep_all))
    return DiagnosticsReport(
        res, r_norm, rel, representation, (float(min(grid.spacing)), dt), masked, d_norm, div_norm
    )


def continuity_residual(
    times: np.ndarray,
    densities: Sequence[DensityField | np.ndarray],
    fields: Sequence[VelocityField],
    representation: str = "position",
) -> DiagnosticsReport:
    """Continuity check of co-registered density and velocity snapshots.

    The relative norm divides by ``||dP/dt||`` floored at ``1e-9 ||P|| / dt``,
    so stationary distributions (whose residual is round-off) report a tiny
    number instead of 0/0.
    """
    arrays = [d.values if isinstance(d, DensityField) else d for d in densities]
    return transport_residual(times, arrays, fields, fields[0].grid, representation=representation)


def snapshot_window(
    psi0: WaveFunction, H: Hamiltonian, cfg: PropagatorConfig, t_center: float, stride: int, n_side: int = 1
) -> list[WaveFunction]:
    """States at ``t_center + j * stride * dt`` for ``j = -n_side..n_side``."""
    t_start = t_center - n_side * stride * cfg.dt
    lead = evolve(psi0, H, cfg, t_start, max(1, int(round((t_start - psi0.time) / cfg.dt))))
    return evolve(lead[-1], H, cfg, t_center + n_side * stride * cfg.dt, stride)


def position_snapshots(states: Sequence[WaveFunction], H: Hamiltonian, density_floor=DENSITY_FLOOR):
    times = np.array([s.time for s in states])
    dens = [np.abs(s.amplitudes) ** 2 for s in states]
    fields = [velocity_field(s, H, density_floor) for s in states]
    return times, dens, fields


def momentum_snapshots(states: Sequence[WaveFunction], H: Hamiltonian, density_floor=DENSITY_FLOOR):
    times = np.array([s.time for s in states])
    fields = [momentum_velocity_field(s, H, density_floor) for s in states]
    dens = [np.abs(momentum_representation(s).amplitudes) ** 2 for s in states]
    return times, dens, fields


def resolution_limited(rels: Sequence[float], factor: float = 2.0, floor: float = ROUNDOFF_FLOOR) -> bool:
    """True when each refinement cuts the residual by at least ``factor``
    (values already below ``floor``, the level of accumulated FFT round-off
    in a relative residual, count as converged)."""
    rels = list(rels)
    return all(b < floor or (a > 0 and a / b >= factor) for a, b in zip(rels, rels[1:]))


def not_reduced(rels: Sequence[float], factor: float = 2.0) -> bool:
    """True when no refinement step cuts the residual by ``factor`` or more."""
    rels = list(rels)
    return all(b > 0 and a / b < factor for a, b in zip(rels, rels[1:]))


@dataclass(frozen=True)
class IncompatibilityResult:
    score: float
    verdict: str
    position_rel: float
    momentum_rel: float

    def to_dict(self) -> dict:
        return asdict(self)


def incompatibility_score(
    H: Hamiltonian,
    psi0: WaveFunction,
    t_window: tuple[float, int] | Sequence[WaveFunction],
    cfg: PropagatorConfig | None = None,
    *,
    incompatible_above: float = 100.0,
    compatible_below: float = 3.0,
    density_floor: float = DENSITY_FLOOR,
) -> IncompatibilityResult:
    """Ratio of momentum-space to position-space relative continuity residuals.

    ``t_window`` is either ``(t_center, stride)`` (snapshots are produced by
    evolving ``psi0`` with ``cfg``) or an explicit list of >= 3 snapshots.
    """
    if isinstance(t_window, tuple):
        if cfg is None:
            raise ValueError("need a propagator config to build the window")
        states = snapshot_window(psi0, H, cfg, *t_window)
    else:
        states = list(t_window)
    pos = continuity_residual(*position_snapshots(states, H, density_floor), representation="position")
    mom = continuity_residual(*momentum_snapshots(states, H, density_floor), representation="momentum")
    if not pos.residual_norm_rel:
        raise ValueError("position residual is degenerate (zero); the score is undefined")
    score = mom.residual_norm_rel / pos.residual_norm_rel
    if score > incompatible_above:
        verdict = "momentum incompatible"
    elif score < compatible_below:
        verdict = "both compatible"
    else:
        verdict = "inconclusive"
    return IncompatibilityResult(float(score), verdict, pos.residual_norm_rel, mom.residual_norm_rel)
