"""End-to-end studies on a scenario: field equivalence, continuity, weak-measurement
estimation, path reconstruction, prior covariance and relaxation.

Each study returns a small result object with a ``summary()`` dict of plain
numbers, which the command line writes to JSON.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import (
    continuity_residual,
    momentum_snapshots,
    not_reduced,
    position_snapshots,
    resolution_limited,
    snapshot_window,
)
from .equilibrium import HFunctionSeries, PriorCandidate, covariance_residual, relaxation_series
from .measurement import (
    PointerModel,
    VelocityEstimate,
    bin_average_velocity,
    estimate_velocity,
    extrapolate_bias,
    rng_stream,
    simulate_runs,
)
from .propagation import evolve
from .scenarios import STREAM_ESTIMATED, STREAM_PARTICLES, STREAM_PATHS, STREAM_WEAKSIM, Scenario
from .trajectories import (
    EstimatedPathComparison,
    FieldStack,
    TrajectorySet,
    compare_estimated_paths,
    integrate,
    ks_distance,
    sample_density,
)
from .wavefield import WaveFunction, position_density
from .weakvalue import current, velocity_field

__all__ = [
    "field_equivalence",
    "continuity_study",
    "covariance_study",
    "weak_study",
    "path_study",
    "relaxation_study",
    "spread",
    "rms_error",
]


def spread(psi) -> float:
    """Position standard deviation of a 1D state."""
    p = np.abs(psi.amplitudes) ** 2
    x = psi.grid.axes[0]
    m = np.sum(p * x) / p.sum()
    return float(np.sqrt(np.sum(p * (x - m) ** 2) / p.sum()))


# -- weak-value field against the standard current ---------------------------------


@dataclass
class FieldEquivalence:
    max_deviation: float
    n_snapshots: int
    tolerance: float = 1e-9

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance

    def summary(self) -> dict:
        return {"max_deviation": self.max_deviation, "snapshots": self.n_snapshots, "passed": self.passed}


def field_equivalence(scn: Scenario, states=None) -> FieldEquivalence:
    """Largest pointwise ``|v - j/P| / max(1, |j/P|)`` over unmasked points of every snapshot."""
    states = scn.snapshots() if states is None else states
    H = scn.hamiltonian
    worst = 0.0
    for psi in states:
        v = velocity_field(psi, H)
        j = current(psi)
        dens = np.abs(psi.amplitudes) ** 2
        ok = ~v.mask
        for vc, jc in zip(v.components, j.components):
            ref = jc[ok] / dens[ok]
            dev = np.abs(vc[ok] - ref) / np.maximum(1.0, np.abs(ref))
            worst = max(worst, float(dev.max(initial=0.0)))
    return FieldEquivalence(worst, len(states))


# -- continuity in position and momentum space ---------------------------------------


@dataclass
class ContinuityStudy:
    levels: list[dict]
    position_rel: list[float]
    momentum_rel: list[float] | None
    score: float | None
    verdict: str | None
    incompatible_above: float = 100.0
    compatible_below: float = 3.0
    base_report: object = field(default=None, repr=False)
    base_grid: object = field(default=None, repr=False)

    @property
    def position_resolution_limited(self) -> bool:
        return resolution_limited(self.position_rel)

    @property
    def momentum_resolution_limited(self) -> bool | None:
        return None if self.momentum_rel is None else resolution_limited(self.momentum_rel)

    @property
    def momentum_not_reduced(self) -> bool | None:
        return None if self.momentum_rel is None else not_reduced(self.momentum_rel)

    def summary(self) -> dict:
        return {
            "levels": self.levels,
            "position_rel": self.position_rel,
            "position_resolution_limited": self.position_resolution_limited,
            "momentum_rel": self.momentum_rel,
            "momentum_resolution_limited": self.momentum_resolution_limited,
            "momentum_not_reduced": self.momentum_not_reduced,
            "score": self.score,
            "verdict": self.verdict,
            "thresholds": {"incompatible_above": self.incompatible_above, "compatible_below": self.compatible_below},
        }


def _verdict(score, hi, lo) -> str:
    if score > hi:
        return "momentum incompatible"
    if score < lo:
        return "both compatible"
    return "inconclusive"


def continuity_study(scn: Scenario, refinements: int | None = None, momentum: bool | None = None) -> ContinuityStudy:
    """Position (and momentum) continuity residuals at the base resolution and under refinement.

    The incompatibility score is the momentum/position ratio of relative
    residuals at the base resolution.
    """
    d = scn.config.diagnostics
    refinements = d.refinements if refinements is None else refinements
    momentum = d.momentum if momentum is None else momentum
    levels, pos, mom = [], [], []
    base = None
    for lvl in range(refinements + 1):
        s = scn.refined(lvl)
        states = snapshot_window(s.initial_state(), s.hamiltonian, s.propagator, d.t_center, d.stride)
        rp = continuity_residual(*position_snapshots(states, s.hamiltonian), representation="position")
        entry = {"level": lvl, "position": rp.to_dict()}
        pos.append(rp.residual_norm_rel)
        if lvl == 0:
            base = (rp, s.grid)
        if momentum:
            rm = continuity_residual(*momentum_snapshots(states, s.hamiltonian), representation="momentum")
            entry["momentum"] = rm.to_dict()
            mom.append(rm.residual_norm_rel)
        levels.append(entry)
    score = verdict = None
    if momentum:
        if not pos[0]:
            raise ValueError("position residual is degenerate (zero); the score is undefined")
        score = mom[0] / pos[0]
        verdict = _verdict(score, d.incompatible_above, d.compatible_below)
    return ContinuityStudy(levels, pos, mom if momentum else None, score, verdict,
                           d.incompatible_above, d.compatible_below, *base)


# -- covariance of candidate priors --------------------------------------------------


def _prior(entry) -> PriorCandidate:
    return PriorCandidate.uniform() if entry == "uniform" else PriorCandidate.power(float(entry))


@dataclass
class CovarianceStudy:
    residuals: dict[str, list[float]]

    def resolution_limited(self, label) -> bool:
        return resolution_limited(self.residuals[label])

    def not_reduced(self, label) -> bool:
        return not_reduced(self.residuals[label])

    def summary(self) -> dict:
        return {
            label: {"residuals": r, "resolution_limited": resolution_limited(r), "not_reduced": not_reduced(r)}
            for label, r in self.residuals.items()
        }


def covariance_study(scn: Scenario, priors=None, refinements: int | None = None) -> CovarianceStudy:
    eq, d = scn.config.equilibrium, scn.config.diagnostics
    priors = [_prior(p) for p in (priors if priors is not None else eq.priors)]
    t_center = eq.t_center if eq.t_center is not None else d.t_center
    stride = eq.stride if eq.stride is not None else d.stride
    refinements = eq.refinements if refinements is None else refinements
    out: dict[str, list[float]] = {p.label: [] for p in priors}
    for lvl in range(refinements + 1):
        s = scn.refined(lvl)
        H = s.hamiltonian
        states = snapshot_window(s.initial_state(), H, s.propagator, t_center, stride)
        fields = [velocity_field(psi, H) for psi in states]
        for p in priors:
            out[p.label].append(covariance_residual(p, states, fields).residual)
    return CovarianceStudy(out)


# -- Monte Carlo weak measurements --------------------------------------------------


def rms_error(est: VelocityEstimate, reference: np.ndarray, where: np.ndarray | None = None) -> float:
    ok = ~est.mask & np.isfinite(est.v_hat) if where is None else where
    return float(np.sqrt(np.mean((est.v_hat[ok] - reference[ok]) ** 2)))


@dataclass
class WeakStudy:
    estimates: list[VelocityEstimate]
    analytic: np.ndarray
    within_fraction: float
    reported_bins: int
    extrapolated: VelocityEstimate | None = None
    single_runs: list[VelocityEstimate] = field(default_factory=list)
    rms_extrapolated: float | None = None
    rms_single: list[float] = field(default_factory=list)

    @property
    def rms_best_single(self) -> float | None:
        return min(self.rms_single) if self.rms_single else None

    def summary(self) -> dict:
        out = {
            "within_3se_fraction": self.within_fraction,
            "reported_bins": self.reported_bins,
            "n_runs": [int(e.N_total) for e in self.estimates],
        }
        if self.extrapolated is not None:
            out.update(
                rms_extrapolated=self.rms_extrapolated,
                rms_single=self.rms_single,
                rms_best_single=self.rms_best_single,
                extrapolation_improves=self.rms_extrapolated < self.rms_best_single,
            )
        return out


def weak_study(scn: Scenario, workers: int = 1, extrapolate: bool = True, keep_records: bool = False):
    """Simulate the protocol at each configured ``tau`` and optionally extrapolate the bias.

    The analytic comparator is the density-weighted bin average of the
    velocity field at the weak-measurement time. Returns the study and, when
    ``keep_records`` is set, the raw records of the first ``tau``.
    """
    pr = scn.config.protocol
    if pr is None:
        raise ValueError(f"scenario {scn.name} has no protocol section")
    H, cfg = scn.hamiltonian, scn.propagator
    psi = scn.states_at(pr.time)
    bins = pr.bins.edges()
    ref = bin_average_velocity(psi, H, bins, pr.observable)
    sx = spread(psi)
    ests, first_records = [], None
    for i, tau in enumerate(pr.tau):
        rec = simulate_runs(psi, H, PointerModel(pr.sigma_factor * sx, pr.observable), tau, pr.n_runs,
                            scn.seed, cfg, stream=STREAM_WEAKSIM + i, workers=workers)
        if i == 0 and keep_records:
            first_records = rec
        ests.append(estimate_velocity(rec, bins, pr.min_count))
    e0 = ests[0]
    rep = ~e0.mask
    within = np.abs(e0.v_hat[rep] - ref[rep]) <= 3 * e0.std_error[rep]
    study = WeakStudy(ests, ref, float(within.mean()) if rep.any() else 0.0, int(rep.sum()))
    ex = pr.extrapolation
    if extrapolate and ex is not None:
        singles, k = [], 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for tau in ex.tau:
                for sf in ex.sigma_factors:
                    rec = simulate_runs(psi, H, PointerModel(sf * sx, pr.observable), tau, ex.n_runs,
                                        scn.seed, cfg, stream=STREAM_WEAKSIM + 50 + k, workers=workers)
                    singles.append(estimate_velocity(rec, bins, ex.min_count))
                    k += 1
        extr = extrapolate_bias(singles)
        ok = ~extr.mask
        study.extrapolated = extr
        study.single_runs = singles
        study.rms_extrapolated = rms_error(extr, ref, ok)
        study.rms_single = [rms_error(e, ref, ok) for e in singles + [e0]]
    return study, first_records


# -- trajectories -------------------------------------------------------------------


@dataclass
class PathStudy:
    trajectories: TrajectorySet
    final_state: WaveFunction
    ks: float
    crossings: int
    order_violations: int
    comparison: EstimatedPathComparison | None = None

    def summary(self) -> dict:
        out = {
            "n_paths": int(len(self.trajectories.paths)),
            "ks_distance": self.ks,
            "escape_fraction": self.trajectories.escape_fraction,
            "axis_crossings": self.crossings,
            "order_violations": self.order_violations,
        }
        if self.comparison is not None:
            c = self.comparison
            out["estimated_field"] = {
                "n_paths": int(len(c.estimated.paths)),
                "rms_discrepancy": c.rms_discrepancy,
                "rms_propagated_std_error": c.rms_std_error,
                "ratio": c.ratio,
                "estimated_escape_fraction": c.estimated.escape_fraction,
                "analytic_escape_fraction": c.analytic.escape_fraction,
            }
        return out


def path_study(scn: Scenario, workers: int = 1, estimated: bool = True, chunk: int = 20000) -> PathStudy:
    """Paths from equilibrium-sampled starts through the scenario's snapshot stack.

    Paths are integrated in chunks recorded at every stack time, so axis
    crossings (sign changes about ``x = 0``) and 1D order violations are
    checked at full time resolution; only every ``record_every``-th time is
    kept in the returned set.
    """
    tr = scn.config.trajectories
    H = scn.hamiltonian
    states = scn.snapshots()
    stack = FieldStack.from_states(states, H)
    psi0 = states[0]
    x0 = sample_density(position_density(psi0), tr.n_paths, rng_stream(scn.seed, STREAM_PATHS))
    if psi0.grid.dims == 1:
        x0 = np.sort(x0, axis=0)
    n_t = len(stack.times)
    keep = list(range(0, n_t, tr.record_every))
    if keep[-1] != n_t - 1:
        keep.append(n_t - 1)
    kept, escaped = [], []
    crossings = violations = 0
    prev_last = None
    for start in range(0, len(x0), chunk):
        part = integrate(x0[start:start + chunk], stack, tr.dt_path, max_escape_fraction=1.0, workers=workers)
        p = part.paths
        ok = ~part.escaped
        sign0 = np.sign(p[:, :1, 0])
        crossings += int(np.any(np.sign(p[ok, :, 0]) * sign0[ok] < 0, axis=1).sum())
        if psi0.grid.dims == 1:
            q = p[ok, :, 0]
            violations += int(np.sum(np.diff(q, axis=0) < -1e-8))
            if prev_last is not None and len(q):
                violations += int(np.sum(q[0] < prev_last - 1e-8))
            if len(q):
                prev_last = q[-1]
        kept.append(p[:, keep])
        escaped.append(part.escaped)
    esc = np.concatenate(escaped)
    paths = TrajectorySet(np.concatenate(kept), stack.times[keep], "analytic_field", esc)
    good = paths.endpoints[~esc]
    final = states[-1]
    ks = ks_distance(good, position_density(final))
    comparison = None
    if estimated and tr.estimated is not None:
        e = tr.estimated
        coarse = scn.snapshots(stride=e.stride)
        xe = sample_density(position_density(psi0), e.n_paths, rng_stream(scn.seed, STREAM_PATHS, 1))
        comparison = compare_estimated_paths(
            coarse, H, xe, tr.dt_path, tau=e.tau, sigma_factor=e.sigma_factor, n_runs=e.n_runs,
            bins=e.bins.edges(), min_count=e.min_count, seed=scn.seed, cfg=scn.propagator,
            stream=STREAM_ESTIMATED, workers=workers,
        )
    return PathStudy(paths, final, ks, crossings, violations, comparison)


# -- relaxation ----------------------------------------------------------------------


def relaxation_study(scn: Scenario, workers: int = 1) -> HFunctionSeries:
    """Coarse-grained ``H`` of particles started in the configured non-equilibrium density."""
    r = scn.config.equilibrium.relaxation
    H, cfg = scn.hamiltonian, scn.propagator
    psi0 = scn.initial_state()
    if r.initial == "ground_mode":
        p0 = scn.ground_mode_density()
    else:
        p0 = np.abs(psi0.amplitudes) ** 2
    particles = sample_density(p0, r.n_particles, rng_stream(scn.seed, STREAM_PARTICLES), grid=psi0.grid)
    n_seg = int(round(r.t_final / r.segment))

    def segments():
        cur = psi0
        for _ in range(n_seg):
            seg = evolve(cur, H, cfg, cur.time + r.segment, r.stride)
            yield seg
            cur = seg[-1]

    cell = r.cell * psi0.grid.spacing[0]
    return relaxation_series(segments(), H, particles, cell, r.dt_path, window=scn.box_window(), workers=workers)
