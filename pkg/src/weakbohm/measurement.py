"""Monte Carlo weak-then-strong measurement protocol and its binned velocity estimator.

One run: a Gaussian-pointer weak measurement (Kraus operator
``M(y) ~ exp(-(y - x)^2 / 4 sigma^2)``) with readout ``y``, evolution of the
conditioned state for ``tau``, then a strong measurement sampled from the
evolved density (grid cell plus uniform intra-cell jitter). Conditioning the
displacement ``(strong - weak) / tau`` on the strong readout gives the
velocity estimate.

Runs are generated in fixed-size blocks; block ``b`` draws from a Philox
stream keyed by ``(seed, stream, b)``, so the records do not depend on how
blocks are distributed over workers.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from ._io import read_table_csv, write_table_csv
from .errors import BinningError
from .propagation import Hamiltonian, Propagator, PropagatorConfig, _step_count
from .wavefield import Grid, WaveFunction, to_momentum_array, to_position_array
from .weakvalue import VelocityField, current, momentum_current

__all__ = [
    "PointerModel",
    "WeakMeasurementRecord",
    "MeasurementRecords",
    "VelocityEstimate",
    "rng_stream",
    "simulate_run",
    "simulate_runs",
    "estimate_velocity",
    "estimate_momentum_velocity",
    "extrapolate_bias",
    "bin_average_velocity",
    "expected_estimate",
    "estimate_to_field",
]

BLOCK_SIZE = 4096
UNDERFLOW = 1e-300


@dataclass(frozen=True)
class PointerModel:
    sigma: float
    observable: str = "position"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("pointer sigma must be positive")
        if self.observable not in ("position", "momentum"):
            raise ValueError(f"unknown observable {self.observable!r}")


@dataclass(frozen=True)
class WeakMeasurementRecord:
    weak_readout: float
    strong_readout: float
    tau: float
    run_index: int

    def __post_init__(self):
        if not (np.isfinite(self.weak_readout) and np.isfinite(self.strong_readout)):
            raise ValueError("readouts must be finite")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True, eq=False)
class MeasurementRecords:
    """Columnar storage for many runs sharing ``tau`` and pointer."""

    run_index: np.ndarray
    weak: np.ndarray
    strong: np.ndarray
    tau: float
    sigma: float = np.nan
    observable: str = "position"
    resamples: int = 0

    def __post_init__(self):
        for name in ("run_index", "weak", "strong"):
            arr = np.asarray(getattr(self, name), dtype=np.int64 if name == "run_index" else float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.run_index) == len(self.weak) == len(self.strong)):
            raise ValueError("record columns differ in length")

    def __len__(self) -> int:
        return len(self.weak)

    def __iter__(self) -> Iterator[WeakMeasurementRecord]:
        for i, w, s in zip(self.run_index, self.weak, self.strong):
            yield WeakMeasurementRecord(float(w), float(s), self.tau, int(i))

    @classmethod
    def from_records(cls, records: Iterable[WeakMeasurementRecord], sigma=np.nan, observable="position"):
        records = list(records)
        if not records:
            raise ValueError("empty record list")
        taus = {r.tau for r in records}
        if len(taus) > 1:
            raise BinningError("records do not share tau")
        return cls(
            np.array([r.run_index for r in records]),
            np.array([r.weak_readout for r in records]),
            np.array([r.strong_readout for r in records]),
            taus.pop(),
            sigma,
            observable,
        )

    @classmethod
    def concatenate(cls, parts: Sequence["MeasurementRecords"]) -> "MeasurementRecords":
        first = parts[0]
        return cls(
            np.concatenate([p.run_index for p in parts]),
            np.concatenate([p.weak for p in parts]),
            np.concatenate([p.strong for p in parts]),
            first.tau,
            first.sigma,
            first.observable,
            sum(p.resamples for p in parts),
        )

    def to_csv(self, path):
        n = len(self)
        return write_table_csv(
            path, ("run_index", "weak", "strong", "tau"), (self.run_index, self.weak, self.strong, np.full(n, self.tau))
        )

    @classmethod
    def from_csv(cls, path, sigma=np.nan, observable="position"):
        cols = read_table_csv(path)
        if len(cols["tau"]) == 0:
            raise ValueError("empty record file")
        taus = np.unique(cols["tau"])
        if len(taus) > 1:
            raise BinningError("records do not share tau")
        return cls(cols["run_index"].astype(np.int64), cols["weak"], cols["strong"], float(taus[0]), sigma, observable)


@dataclass(frozen=True, eq=False)
class VelocityEstimate:
    """Binned conditional-mean velocity; entries of masked bins (``counts < min_count``) are NaN."""

    bin_edges: np.ndarray
    v_hat: np.ndarray
    std_error: np.ndarray
    counts: np.ndarray
    tau: float
    sigma: float
    N_total: int
    min_count: int = 100
    representation: str = "position"
    tau_slope: np.ndarray | None = field(default=None, repr=False)
    inv_sigma2_slope: np.ndarray | None = field(default=None, repr=False)

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    @property
    def mask(self) -> np.ndarray:
        """True where the bin is too sparsely populated to report."""
        return self.counts < self.min_count

    def to_csv(self, path):
        header = ["bin_center", "v_hat", "std_error", "count"]
        cols = [self.bin_centers, self.v_hat, self.std_error, self.counts]
        if self.tau_slope is not None:
            header += ["tau_slope", "inv_sigma2_slope"]
            cols += [self.tau_slope, self.inv_sigma2_slope]
        return write_table_csv(path, header, cols)


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for the stream identified by ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


class _Protocol:
    """Everything about a (state, H, pointer, tau) combination that is shared by all runs."""

    def __init__(self, psi: WaveFunction, H: Hamiltonian, pointer: PointerModel, tau: float, cfg=None):
        if psi.grid.dims != 1:
            raise NotImplementedError("the measurement protocol is implemented for 1D configuration grids")
        if not tau > 0:
            raise ValueError("tau must be positive")
        cfg = cfg or PropagatorConfig(tau / 10)
        self.n_steps = _step_count(tau, cfg.dt)
        if self.n_steps < 1:
            raise ValueError("tau must be at least one propagator step")
        self.grid, self.hbar, self.tau, self.pointer = psi.grid, psi.hbar, tau, pointer
        self.prop = Propagator(H, psi.grid, cfg)
        self.momentum = pointer.observable == "momentum"
        if self.momentum:
            mgrid = psi.grid.conjugate(psi.hbar)
            self.base = to_momentum_array(psi.amplitudes, psi.grid, psi.hbar)
            self.coords, self.cell = mgrid.axes[0], mgrid.spacing[0]
        else:
            self.base = np.array(psi.amplitudes)
            self.coords, self.cell = psi.grid.axes[0], psi.grid.spacing[0]
        prob = np.abs(self.base) ** 2
        self.cdf = np.cumsum(prob) / prob.sum()
        mean = np.sum(prob * self.coords) / prob.sum()
        spread = np.sqrt(np.sum(prob * (self.coords - mean) ** 2) / prob.sum())
        if pointer.sigma < 3 * spread:
            warnings.warn(
                f"pointer sigma {pointer.sigma:.3g} is below 3x the state spread {spread:.3g}; "
                "the measurement is not weak",
                stacklevel=3,
            )

    def _to_config(self, amps):
        return to_position_array(amps, self.grid, self.hbar) if self.momentum else amps

    def _from_config(self, amps):
        return to_momentum_array(amps, self.grid, self.hbar) if self.momentum else amps

    def conditioned(self, y: np.ndarray) -> np.ndarray:
        """Unnormalized post-measurement amplitudes, one row per readout."""
        s = self.pointer.sigma
        return self.base[None, :] * np.exp(-((y[:, None] - self.coords[None, :]) ** 2) / (4 * s * s))

    def evolve(self, amps: np.ndarray) -> np.ndarray:
        return self._from_config(self.prop.advance(self._to_config(amps), self.n_steps))

    def run_block(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray, int]:
        s = self.pointer.sigma
        idx = np.minimum(np.searchsorted(self.cdf, rng.random(n), side="right"), len(self.cdf) - 1)
        y = self.coords[idx] + s * rng.standard_normal(n)
        cond = self.conditioned(y)
        norm2 = np.sum(np.abs(cond) ** 2, axis=1)
        resamples = 0
        bad = norm2 < UNDERFLOW
        while np.any(bad):
            k = int(bad.sum())
            resamples += k
            idx_k = np.minimum(np.searchsorted(self.cdf, rng.random(k), side="right"), len(self.cdf) - 1)
            y[bad] = self.coords[idx_k] + s * rng.standard_normal(k)
            cond[bad] = self.conditioned(y[bad])
            norm2[bad] = np.sum(np.abs(cond[bad]) ** 2, axis=1)
            bad = norm2 < UNDERFLOW
        cond /= np.sqrt(norm2)[:, None]
        dens = np.abs(self.evolve(cond)) ** 2
        cdf = np.cumsum(dens, axis=1)
        cdf /= cdf[:, -1:]
        u = rng.random(n)
        j = np.minimum((cdf < u[:, None]).sum(axis=1), dens.shape[1] - 1)
        strong = self.coords[j] + self.cell * (rng.random(n) - 0.5)
        return y, strong, resamples


def simulate_run(
    psi: WaveFunction,
    H: Hamiltonian,
    pointer: PointerModel,
    tau: float,
    rng: np.random.Generator,
    cfg: PropagatorConfig | None = None,
    run_index: int = 0,
) -> WeakMeasurementRecord:
    """One weak-evolve-strong run. ``tau`` must be a whole number of steps of ``cfg.dt``
    (default ``dt = tau / 10``)."""
    proto = _Protocol(psi, H, pointer, tau, cfg)
    y, strong, _ = proto.run_block(rng, 1)
    return WeakMeasurementRecord(float(y[0]), float(strong[0]), tau, run_index)


def simulate_runs(
    psi: WaveFunction,
    H: Hamiltonian,
    pointer: PointerModel,
    tau: float,
    n_runs: int,
    seed: int,
    cfg: PropagatorConfig | None = None,
    *,
    stream: int = 0,
    block_size: int = BLOCK_SIZE,
    workers: int = 1,
) -> MeasurementRecords:
    """``n_runs`` independent runs; identical for any ``workers`` given the same seed and block size."""
    if n_runs < 1:
        raise ValueError("need at least one run")
    proto = _Protocol(psi, H, pointer, tau, cfg)
    starts = list(range(0, n_runs, block_size))

    def block(b: int):
        n = min(block_size, n_runs - starts[b])
        return proto.run_block(rng_stream(seed, stream, b), n)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(block, range(len(starts))))
    else:
        results = [block(b) for b in range(len(starts))]
    resamples = sum(r[2] for r in results)
    if resamples > 1e-6 * n_runs:
        raise RuntimeError(f"{resamples} resampled runs out of {n_runs}; the state is too sharply peaked")
    return MeasurementRecords(
        np.arange(n_runs),
        np.concatenate([r[0] for r in results]),
        np.concatenate([r[1] for r in results]),
        tau,
        pointer.sigma,
        pointer.observable,
        resamples,
    )


def estimate_velocity(records, bins: np.ndarray, min_count: int = 100) -> VelocityEstimate:
    """Per-bin mean of ``(strong - weak) / tau`` conditioned on the strong readout.

    ``records`` is a :class:`MeasurementRecords` or a list of
    :class:`WeakMeasurementRecord`. Records whose strong readout falls outside
    ``bins`` are dropped.
    """
    if not isinstance(records, MeasurementRecords):
        records = MeasurementRecords.from_records(records)
    if len(records) == 0:
        raise ValueError("empty record list")
    edges = np.asarray(bins, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise BinningError("bins must be increasing edges")
    disp = (records.strong - records.weak) / records.tau
    which = np.searchsorted(edges, records.strong, side="right") - 1
    inside = (which >= 0) & (which < len(edges) - 1)
    which, disp = which[inside], disp[inside]
    nb = len(edges) - 1
    counts = np.bincount(which, minlength=nb)
    sums = np.bincount(which, weights=disp, minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = sums / counts
        sq = np.bincount(which, weights=(disp - mean[which]) ** 2, minlength=nb)
        std_error = np.sqrt(sq / (counts - 1)) / np.sqrt(counts)
    masked = counts < max(min_count, 2)
    mean[masked] = np.nan
    std_error[masked] = np.nan
    return VelocityEstimate(
        edges, mean, std_error, counts, records.tau, records.sigma, int(counts.sum()), min_count,
        "momentum" if records.observable == "momentum" else "position",
    )


def estimate_momentum_velocity(
    psi: WaveFunction,
    H: Hamiltonian,
    pointer: PointerModel,
    tau: float,
    N: int,
    seed: int = 0,
    bins: np.ndarray | None = None,
    min_count: int = 100,
    cfg: PropagatorConfig | None = None,
    **kwargs,
) -> VelocityEstimate:
    """Weak measurement of momentum, evolution, strong momentum measurement, binned in ``p``.

    Default bins are momentum-grid cells merged four at a time.
    """
    if pointer.observable != "momentum":
        pointer = PointerModel(pointer.sigma, "momentum")
    records = simulate_runs(psi, H, pointer, tau, N, seed, cfg, **kwargs)
    if bins is None:
        bins = psi.grid.conjugate(psi.hbar).cell_edges(0, coarsen=4)
    return estimate_velocity(records, bins, min_count)


def extrapolate_bias(estimates: Sequence[VelocityEstimate]) -> VelocityEstimate:
    """Weighted least-squares fit ``v = v0 + a tau + b / sigma^2`` per bin, reported at ``(0, 0)``.

    Bins masked in any input stay masked. ``std_error`` is the standard error
    of ``v0``; the slopes ``a`` and ``b`` are attached as ``tau_slope`` and
    ``inv_sigma2_slope``.
    """
    estimates = list(estimates)
    if not estimates:
        raise ValueError("no estimates to extrapolate")
    edges = estimates[0].bin_edges
    for e in estimates[1:]:
        if e.bin_edges.shape != edges.shape or not np.allclose(e.bin_edges, edges):
            raise BinningError("estimates do not share bins")
    taus = np.array([e.tau for e in estimates], dtype=float)
    inv_s2 = np.array([1.0 / e.sigma ** 2 for e in estimates], dtype=float)
    if len(np.unique(taus)) < 2 or len(np.unique(inv_s2)) < 2:
        raise ValueError("need at least two tau values and two sigma values")
    X = np.column_stack([np.ones_like(taus), taus, inv_s2])
    if np.linalg.matrix_rank(X) < 3:
        raise ValueError("the (tau, 1/sigma^2) design does not determine a plane")
    V = np.array([e.v_hat for e in estimates])
    S = np.array([e.std_error for e in estimates])
    masked = np.any([e.mask for e in estimates], axis=0)
    nb = len(edges) - 1
    v0, se0, a, b = (np.full(nb, np.nan) for _ in range(4))
    for k in np.flatnonzero(~masked):
        s = S[:, k]
        w = np.ones_like(s) if np.any(s <= 0) else 1.0 / s ** 2
        cov = np.linalg.inv(X.T @ (w[:, None] * X))
        coef = cov @ (X.T @ (w * V[:, k]))
        v0[k], a[k], b[k] = coef
        se0[k] = np.sqrt(cov[0, 0]) if np.all(s > 0) else 0.0
    counts = np.sum([e.counts for e in estimates], axis=0)
    counts = np.where(masked, 0, counts)
    return VelocityEstimate(
        edges, v0, se0, counts, 0.0, np.inf, int(sum(e.N_total for e in estimates)),
        max(e.min_count for e in estimates), estimates[0].representation, a, b,
    )


def bin_average_velocity(psi: WaveFunction, H: Hamiltonian, bins: np.ndarray, representation="position"):
    """Density-weighted analytic velocity per bin: sum of flux over grid points in the bin
    divided by their total density (the quantity the estimator targets)."""
    if representation == "momentum":
        phi, (flux,) = momentum_current(psi, H)
        dens, coords = np.abs(phi.amplitudes) ** 2, phi.grid.axes[0]
    else:
        (flux,) = current(psi).components
        dens, coords = np.abs(psi.amplitudes) ** 2, psi.grid.axes[0]
    which = np.searchsorted(bins, coords, side="right") - 1
    nb = len(bins) - 1
    ok = (which >= 0) & (which < nb)
    num = np.bincount(which[ok], weights=flux[ok], minlength=nb)
    den = np.bincount(which[ok], weights=dens[ok], minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / den


def expected_estimate(
    psi: WaveFunction,
    H: Hamiltonian,
    pointer: PointerModel,
    tau: float,
    bins: np.ndarray,
    cfg: PropagatorConfig | None = None,
    n_quad: int | None = None,
) -> np.ndarray:
    """Infinite-ensemble mean of the binned estimator, by quadrature over the weak readout.

    No sampling: the joint density of (weak readout, strong cell) is
    evaluated on a uniform readout grid and integrated. Used to separate
    the estimator's bias from its statistical error.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        proto = _Protocol(psi, H, pointer, tau, cfg)
    s = pointer.sigma
    lo, hi = proto.coords.min() - 9 * s, proto.coords.max() + 9 * s
    n_quad = n_quad or int(np.ceil((hi - lo) / (s / 6)))
    ys = np.linspace(lo, hi, n_quad)
    joint = np.empty((n_quad, len(proto.coords)))
    for start in range(0, n_quad, 1024):
        chunk = ys[start:start + 1024]
        joint[start:start + 1024] = np.abs(proto.evolve(proto.conditioned(chunk))) ** 2
    mass = joint.sum(axis=0)
    mean_y = (ys @ joint) / mass
    which = np.searchsorted(bins, proto.coords, side="right") - 1
    nb = len(bins) - 1
    ok = (which >= 0) & (which < nb)
    num = np.bincount(which[ok], weights=(mass * (proto.coords - mean_y))[ok], minlength=nb)
    den = np.bincount(which[ok], weights=mass[ok], minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / den / tau


def estimate_to_field(
    estimate: VelocityEstimate, grid: Grid, time: float, values: np.ndarray | None = None
) -> tuple[VelocityField, np.ndarray]:
    """Linear interpolation of binned values (default ``v_hat``) between bin centres onto a 1D grid.

    Grid points that are not bracketed by two reported bins are masked.
    Returns the field (provenance ``"estimated"``) and the standard error of
    the interpolated value.
    """
    if grid.dims != 1:
        raise NotImplementedError("binned estimates map onto 1D grids only")
    centers = estimate.bin_centers
    vals = estimate.v_hat if values is None else np.asarray(values, dtype=float)
    good = ~estimate.mask & np.isfinite(vals)
    x = grid.axes[0]
    j = np.clip(np.searchsorted(centers, x, side="right") - 1, 0, len(centers) - 2)
    inside = (x >= centers[0]) & (x <= centers[-1])
    mask = ~(inside & good[j] & good[j + 1])
    w = np.clip((x - centers[j]) / (centers[j + 1] - centers[j]), 0.0, 1.0)

    def interp(a, power=1):
        a = np.nan_to_num(a, nan=0.0) ** power
        return np.where(mask, 0.0, (1 - w) ** power * a[j] + w ** power * a[j + 1])

    field = VelocityField(grid, (interp(vals),), time, estimate.representation, "estimated", mask)
    # bins are independent, so variances combine with squared weights
    return field, np.sqrt(interp(estimate.std_error, 2))
