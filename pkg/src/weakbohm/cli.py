"""Command-line front end: ``weakbohm SUBCOMMAND --config PATH|NAME [options]``.

Every run validates the config and the propagator guardrails before any
computation, writes its artifacts under ``--out`` and finishes by writing
``manifest.json`` (its presence marks a completed run). Artifact names:

``evolve/snapshots.bwl``       wavefunction snapshots (BWL1 records)
``evolve/observables.csv``     t, norm, energy
``field/velocity.bwl``         analytic position-space velocity at every written snapshot
``field/velocity_final.csv``   velocity field at the final time
``field/momentum_velocity_final.csv``  momentum-space velocity at the final time
``field/equivalence.json``     largest deviation from the standard current ratio
``weaksim/estimate_tau{i}.csv``  binned estimate for the i-th protocol ``tau``
``weaksim/analytic.csv``       bin-averaged analytic velocity
``weaksim/extrapolated.csv``   bias-extrapolated estimate
``weaksim/records.csv``        raw records of the first ``tau`` (optional)
``weaksim/report.json``
``paths/bundle.bin``, ``paths/bundle.csv``  first ``bundle`` paths
``paths/endpoints.csv``        final positions of all paths
``paths/histogram.csv``        endpoint histogram against the Born probability per bin
``paths/estimated_endpoints.csv``  estimated-field against analytic-field endpoints
``paths/report.json``
``diagnose/report.json``, ``diagnose/position_residual.csv``
``equilibrium/covariance.json``, ``equilibrium/h_series.csv``
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, pipeline
from ._io import write_json, write_table_csv
from .config import ConfigError, resolved
from .errors import GuardrailError
from .propagation import check_guardrails, energy
from .scenarios import BUNDLED, Scenario, bundled, from_file
from .wavefield import save_binary
from .weakvalue import momentum_velocity_field, velocity_field

log = logging.getLogger("weakbohm")

EXIT_OK, EXIT_ERROR, EXIT_VALIDATION, EXIT_GUARDRAIL, EXIT_CHECK = 0, 1, 2, 3, 4
SUBCOMMANDS = ("evolve", "field", "weaksim", "paths", "diagnose", "equilibrium", "all")


class Run:
    """Output directory, artifact registry and summary metrics of one invocation."""

    def __init__(self, scn: Scenario, out: Path, workers: int, check: bool):
        self.scn, self.out, self.workers, self.check = scn, out, workers, check
        self.summary: dict = {}
        self.failures: list[str] = []

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def fail_if(self, bad: bool, message: str):
        if bad:
            self.failures.append(message)
            log.warning("check failed: %s", message)

    def manifest(self, subcommand: str) -> Path:
        files = sorted(p for p in self.out.rglob("*") if p.is_file() and p.name != "manifest.json")
        artifacts = {p.relative_to(self.out).as_posix(): _sha256(p) for p in files}
        return write_json(self.out / "manifest.json", {
            "version": __version__,
            "subcommand": subcommand,
            "scenario": self.scn.name,
            "seed": self.scn.seed,
            "config": resolved(self.scn.config),
            "artifacts": artifacts,
            "summary": self.summary,
            "checks": {"failures": self.failures} if self.check else None,
        })


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require(section, name: str, scn: Scenario):
    if section is None:
        raise ConfigError([(name, None, f"scenario {scn.name} has no {name} section")])
    return section


# -- subcommands ---------------------------------------------------------------------


def cmd_evolve(run: Run):
    scn = run.scn
    states = scn.snapshots()
    every = scn.config.output.snapshot_every
    written = states[::every]
    if written[-1] is not states[-1]:
        written.append(states[-1])
    with open(run.path("evolve/snapshots.bwl"), "wb") as fh:
        for psi in written:
            tmp = run.path("evolve/.snapshot.tmp")
            save_binary(psi, tmp)
            fh.write(tmp.read_bytes())
            tmp.unlink()
    H = scn.hamiltonian
    t = np.array([s.time for s in states])
    norms = np.array([s.norm() for s in states])
    energies = np.array([energy(s, H) for s in states])
    write_table_csv(run.path("evolve/observables.csv"), ["t", "norm", "energy"], [t, norms, energies])
    drift = float(np.max(np.abs(energies - energies[0])) / max(abs(energies[0]), 1e-300))
    run.summary["evolve"] = {
        "snapshots": len(states),
        "written": len(written),
        "max_norm_error": float(np.max(np.abs(norms - 1.0))),
        "relative_energy_drift": drift,
    }
    return states


def cmd_field(run: Run, states=None):
    scn = run.scn
    states = scn.snapshots() if states is None else states
    H = scn.hamiltonian
    every = scn.config.output.snapshot_every
    picked = states[::every]
    if picked[-1] is not states[-1]:
        picked.append(states[-1])
    with open(run.path("field/velocity.bwl"), "wb") as fh:
        for psi in picked:
            tmp = run.path("field/.field.tmp")
            velocity_field(psi, H).to_binary(tmp)
            fh.write(tmp.read_bytes())
            tmp.unlink()
    velocity_field(states[-1], H).to_csv(run.path("field/velocity_final.csv"))
    momentum_velocity_field(states[-1], H).to_csv(run.path("field/momentum_velocity_final.csv"))
    eq = pipeline.field_equivalence(scn, states)
    write_json(run.path("field/equivalence.json"), eq.summary())
    run.summary["field"] = eq.summary()


def cmd_weaksim(run: Run):
    scn = run.scn
    pr = _require(scn.config.protocol, "protocol", scn)
    study, records = pipeline.weak_study(scn, workers=run.workers, keep_records=pr.write_records)
    for i, est in enumerate(study.estimates):
        est.to_csv(run.path(f"weaksim/estimate_tau{i}.csv"))
    centers = 0.5 * (pr.bins.edges()[1:] + pr.bins.edges()[:-1])
    write_table_csv(run.path("weaksim/analytic.csv"), ["bin_center", "v"], [centers, study.analytic])
    if study.extrapolated is not None:
        study.extrapolated.to_csv(run.path("weaksim/extrapolated.csv"))
    if records is not None:
        records.to_csv(run.path("weaksim/records.csv"))
    summary = study.summary()
    write_json(run.path("weaksim/report.json"), summary)
    run.summary["weaksim"] = summary


def _born_per_bin(psi, edges):
    dens = np.abs(psi.amplitudes) ** 2
    x, dx = psi.grid.axes[0], psi.grid.spacing[0]
    cdf = np.concatenate([[0.0], np.cumsum(dens) * dx])
    cell_edges = np.concatenate([[x[0] - dx / 2], x + dx / 2])
    return np.diff(np.interp(edges, cell_edges, cdf))


def cmd_paths(run: Run):
    scn = run.scn
    tr = _require(scn.config.trajectories, "trajectories", scn)
    study = pipeline.path_study(scn, workers=run.workers)
    ts = study.trajectories
    bundle = type(ts)(ts.paths[: tr.bundle], ts.times, ts.origin, ts.escaped[: tr.bundle])
    bundle.to_binary(run.path("paths/bundle.bin"))
    bundle.to_csv(run.path("paths/bundle.csv"))
    ends = ts.endpoints
    cols = [np.arange(len(ends))] + [ends[:, i] for i in range(ends.shape[1])] + [ts.escaped.astype(int)]
    write_table_csv(run.path("paths/endpoints.csv"), ["path_id", "x", "y"][: 1 + ends.shape[1]] + ["escaped"], cols)
    summary = study.summary()
    if tr.histogram_bins is not None and ends.shape[1] == 1:
        edges = tr.histogram_bins.edges()
        good = ends[~ts.escaped, 0]
        counts, _ = np.histogram(good, edges)
        width = np.diff(edges)
        born = _born_per_bin(study.final_state, edges)
        write_table_csv(
            run.path("paths/histogram.csv"),
            ["bin_center", "count", "density", "born_probability"],
            [0.5 * (edges[1:] + edges[:-1]), counts, counts / (len(good) * width), born],
        )
    c = study.comparison
    if c is not None:
        cols = [c.estimated.endpoints[:, 0], c.analytic.endpoints[:, 0], c.std_error,
                c.estimated.escaped.astype(int), c.analytic.escaped.astype(int)]
        write_table_csv(
            run.path("paths/estimated_endpoints.csv"),
            ["estimated", "analytic", "std_error", "estimated_escaped", "analytic_escaped"], cols,
        )
    write_json(run.path("paths/report.json"), summary)
    run.summary["paths"] = summary
    if run.check:
        run.fail_if(study.ks >= 0.02, f"KS distance {study.ks:.3g} >= 0.02")
        if c is not None:
            run.fail_if(not c.within(3.0), f"estimated-field endpoints off by {c.ratio:.3g} standard errors")


def cmd_diagnose(run: Run):
    scn = run.scn
    d = _require(scn.config.diagnostics, "diagnostics", scn)
    study = pipeline.continuity_study(scn)
    summary = study.summary()
    write_json(run.path("diagnose/report.json"), summary)
    study.base_report.residual_to_csv(run.path("diagnose/position_residual.csv"), study.base_grid)
    run.summary["diagnose"] = {
        "position_rel": study.position_rel[0],
        "position_resolution_limited": study.position_resolution_limited,
        "momentum_rel": study.momentum_rel[0] if study.momentum_rel else None,
        "score": study.score,
        "verdict": study.verdict,
    }
    if run.check:
        run.fail_if(study.position_rel[0] >= 1e-3, f"position residual {study.position_rel[0]:.3g} >= 1e-3")
        run.fail_if(not study.position_resolution_limited, "position residual is not resolution-limited")
        if d.expect is not None and study.verdict is not None:
            run.fail_if(study.verdict != d.expect, f"verdict {study.verdict!r}, expected {d.expect!r}")


def cmd_equilibrium(run: Run):
    scn = run.scn
    eq = _require(scn.config.equilibrium, "equilibrium", scn)
    if scn.config.diagnostics is None and (eq.t_center is None or eq.stride is None):
        raise ConfigError([("equilibrium", None, "needs t_center and stride without a diagnostics section")])
    cov = pipeline.covariance_study(scn)
    summary = {"covariance": cov.summary()}
    if eq.relaxation is not None:
        r = eq.relaxation
        series = pipeline.relaxation_study(scn, workers=run.workers)
        series.to_csv(run.path("equilibrium/h_series.csv"))
        summary["relaxation"] = {
            "H": series.H_values,
            "relative_decrease": series.relative_decrease,
            "max_ratio": series.max_ratio,
            "escaped": series.escaped,
            "n_particles": series.N_particles,
        }
        if run.check:
            run.fail_if(series.relative_decrease < r.min_decrease,
                        f"H decreased by {series.relative_decrease:.3g} < {r.min_decrease}")
            run.fail_if(series.max_ratio > r.max_ratio, f"H rose to {series.max_ratio:.3g} H(0)")
    write_json(run.path("equilibrium/covariance.json"), summary)
    run.summary["equilibrium"] = summary
    if run.check:
        for label, res in cov.residuals.items():
            if label == "equilibrium":
                run.fail_if(res[0] >= 1e-3, f"equilibrium residual {res[0]:.3g} >= 1e-3")
                run.fail_if(not cov.resolution_limited(label), "equilibrium residual is not resolution-limited")
            else:
                run.fail_if(res[0] <= 0.1, f"{label} residual {res[0]:.3g} <= 0.1")
                run.fail_if(cov.resolution_limited(label), f"{label} residual is resolution-limited")


def cmd_all(run: Run):
    cfg = run.scn.config
    states = cmd_evolve(run)
    cmd_field(run, states)
    del states
    if cfg.protocol is not None:
        cmd_weaksim(run)
    if cfg.trajectories is not None:
        cmd_paths(run)
    if cfg.diagnostics is not None:
        cmd_diagnose(run)
    if cfg.equilibrium is not None:
        cmd_equilibrium(run)


COMMANDS = {
    "evolve": cmd_evolve,
    "field": cmd_field,
    "weaksim": cmd_weaksim,
    "paths": cmd_paths,
    "diagnose": cmd_diagnose,
    "equilibrium": cmd_equilibrium,
    "all": cmd_all,
}


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakbohm", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help=f"YAML scenario file or a bundled name ({', '.join(BUNDLED)})")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        p.add_argument("--out", default=None, help="output directory (overrides output.directory)")
        p.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")
        p.add_argument("--check", action="store_true", help="exit 4 when an acceptance check fails")
        p.add_argument("--verbose", "-v", action="store_true")
    return parser


def load_scenario(source: str, seed: int | None) -> Scenario:
    if Path(source).exists() or source not in BUNDLED:
        return from_file(source, seed)
    return bundled(source, seed)


def _preflight(scn: Scenario):
    """Refuse unstable propagators at every resolution the run will use."""
    cfg = scn.config
    levels = 0
    if cfg.diagnostics is not None:
        levels = max(levels, cfg.diagnostics.refinements)
    if cfg.equilibrium is not None:
        levels = max(levels, cfg.equilibrium.refinements)
    for lvl in range(levels + 1):
        s = scn.refined(lvl)
        check_guardrails(s.hamiltonian, s.grid, s.propagator)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise ConfigError([("--threads", None, "must be >= 1")], "<command line>")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError([("--seed", None, "must be an unsigned 64-bit integer")], "<command line>")
        scn = load_scenario(args.config, args.seed)
        _preflight(scn)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except GuardrailError as exc:
        print(f"refusing to run: {exc}", file=sys.stderr)
        return EXIT_GUARDRAIL

    out = Path(args.out if args.out is not None else scn.config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").unlink(missing_ok=True)
    run = Run(scn, out, args.threads, args.check)
    log.info("%s on %s (seed %d) -> %s", args.subcommand, scn.name, scn.seed, out)
    try:
        COMMANDS[args.subcommand](run)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except GuardrailError as exc:
        print(f"refusing to run: {exc}", file=sys.stderr)
        return EXIT_GUARDRAIL
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    run.manifest(args.subcommand)
    for msg in run.failures:
        print(f"check failed: {msg}", file=sys.stderr)
    return EXIT_CHECK if run.failures else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
