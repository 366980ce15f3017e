"""Scenario configuration files: YAML text validated by strict pydantic models.

Unknown keys are rejected. Validation errors carry the YAML line of the
offending field when it can be located.
"""
from __future__ import annotations

from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

__all__ = [
    "ScenarioConfig",
    "ConfigError",
    "load_config",
    "parse_config",
]


class ConfigError(ValueError):
    """Config text that does not parse or validate; ``problems`` lists ``(location, line, message)``."""

    def __init__(self, problems: list[tuple[str, int | None, str]], source: str = "<config>"):
        self.problems = problems
        self.source = source
        lines = [f"{source}:{line if line else '?'}: {loc}: {msg}" for loc, line, msg in problems]
        super().__init__("invalid configuration\n" + "\n".join(lines))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Vector = Union[float, list[float]]


class GridSpec(_Strict):
    extents: list[tuple[float, float]]
    points: list[int]

    @model_validator(mode="after")
    def _shape(self):
        if len(self.extents) != len(self.points) or len(self.points) not in (1, 2):
            raise ValueError("extents and points need one entry per axis (1 or 2 axes)")
        for n in self.points:
            if n < 8 or n & (n - 1):
                raise ValueError(f"points must be powers of two >= 8, got {n}")
        for a, b in self.extents:
            if not b > a:
                raise ValueError(f"empty extent [{a}, {b})")
        return self


class Constants(_Strict):
    hbar: float = Field(1.0, gt=0)
    mass: float = Field(1.0, gt=0)


class GaussianSpec(_Strict):
    kind: Literal["gaussian"] = "gaussian"
    center: Vector
    width: Vector
    kick: Vector = 0.0

    @field_validator("width")
    @classmethod
    def _positive(cls, v):
        if np.any(np.asarray(v) <= 0):
            raise ValueError("widths must be positive")
        return v


class Component(_Strict):
    weight: float | tuple[float, float] = 1.0
    center: Vector
    width: Vector
    kick: Vector = 0.0


class SuperpositionSpec(_Strict):
    kind: Literal["superposition"]
    components: list[Component] = Field(min_length=1)


class Mode(_Strict):
    n: list[int]
    amplitude: float = 1.0
    phase: float = 0.0


class ModesSpec(_Strict):
    """Standing waves ``prod_i sin(n_i pi x_i / L_i)`` of a hard-wall box ``[0, L_i]``.

    Give either an explicit ``modes`` list or ``lowest`` (all quantum numbers
    ``1..lowest`` per axis, equal amplitudes, phases drawn from the master
    seed when ``random_phases`` is set).
    """

    kind: Literal["modes"]
    box: list[float]
    modes: list[Mode] | None = None
    lowest: int | None = Field(None, ge=1)
    random_phases: bool = False

    @model_validator(mode="after")
    def _one_source(self):
        if (self.modes is None) == (self.lowest is None):
            raise ValueError("give exactly one of 'modes' or 'lowest'")
        if any(b <= 0 for b in self.box):
            raise ValueError("box sides must be positive")
        return self


StateSpec = Annotated[Union[GaussianSpec, SuperpositionSpec, ModesSpec], Field(discriminator="kind")]


class HamiltonianSpec(_Strict):
    potential: Literal["free", "harmonic", "quartic", "double_slit"] = "free"
    omega: float = Field(0.0, ge=0)
    lam: float = Field(0.0, ge=0)
    barrier_height: float = 0.0
    slit_separation: float = 0.0
    slit_width: float = 0.0
    barrier_thickness: float = 0.0

    @model_validator(mode="after")
    def _params(self):
        if self.potential == "harmonic" and not self.omega > 0:
            raise ValueError("harmonic potential needs omega > 0")
        if self.potential == "quartic" and not self.lam > 0:
            raise ValueError("quartic potential needs lam > 0")
        return self


class PropagatorSpec(_Strict):
    dt: float = Field(gt=0)
    t_final: float = Field(gt=0)
    snapshot_stride: int = Field(1, ge=1)


class BinSpec(_Strict):
    lo: float
    hi: float
    count: int = Field(ge=1)

    @model_validator(mode="after")
    def _order(self):
        if not self.hi > self.lo:
            raise ValueError("bins need hi > lo")
        return self

    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.count + 1)


class ExtrapolationSpec(_Strict):
    tau: list[float] = Field(min_length=2)
    sigma_factors: list[float] = Field(min_length=2)
    n_runs: int = Field(ge=1)
    min_count: int = Field(100, ge=2)


class ProtocolSpec(_Strict):
    time: float = Field(ge=0)
    observable: Literal["position", "momentum"] = "position"
    sigma_factor: float = Field(gt=0)
    tau: list[float] = Field(min_length=1)
    n_runs: int = Field(ge=1)
    bins: BinSpec
    min_count: int = Field(100, ge=2)
    extrapolation: ExtrapolationSpec | None = None
    write_records: bool = False

    @field_validator("tau")
    @classmethod
    def _tau_positive(cls, v):
        if any(t <= 0 for t in v):
            raise ValueError("tau values must be positive")
        return v


class EstimatedPathsSpec(_Strict):
    stride: int = Field(ge=1)
    tau: float = Field(gt=0)
    sigma_factor: float = Field(gt=0)
    n_runs: int = Field(ge=1)
    bins: BinSpec
    min_count: int = Field(200, ge=2)
    n_paths: int = Field(2000, ge=1)


class TrajectorySpec(_Strict):
    n_paths: int = Field(ge=1)
    dt_path: float = Field(gt=0)
    record_every: int = Field(1, ge=1)
    bundle: int = Field(200, ge=0)
    histogram_bins: BinSpec | None = None
    estimated: EstimatedPathsSpec | None = None


class DiagnosticsSpec(_Strict):
    continuity: bool = True
    momentum: bool = True
    t_center: float = Field(ge=0)
    stride: int = Field(ge=1)
    refinements: int = Field(2, ge=0, le=3)
    incompatible_above: float = 100.0
    compatible_below: float = 3.0
    expect: Literal["both compatible", "momentum incompatible", "inconclusive"] | None = None


class RelaxationSpec(_Strict):
    n_particles: int = Field(ge=1)
    cell: int = Field(8, ge=1)
    t_final: float = Field(gt=0)
    segment: float = Field(gt=0)
    stride: int = Field(ge=1)
    dt_path: float = Field(gt=0)
    initial: Literal["ground_mode", "equilibrium"] = "ground_mode"
    min_decrease: float = 0.5
    max_ratio: float = 1.1


class EquilibriumSpec(_Strict):
    """Covariance window defaults to the diagnostics window when omitted."""

    priors: list[Union[float, Literal["uniform"]]] = Field(default_factory=lambda: [1.0, 2.0, "uniform"])
    t_center: float | None = Field(None, ge=0)
    stride: int | None = Field(None, ge=1)
    refinements: int = Field(2, ge=0, le=3)
    relaxation: RelaxationSpec | None = None

    @field_validator("priors")
    @classmethod
    def _positive_powers(cls, v):
        if any(not isinstance(p, str) and p <= 0 for p in v):
            raise ValueError("prior powers must be positive")
        return v


class OutputSpec(_Strict):
    directory: str = "out"
    snapshot_every: int = Field(1, ge=1)


class ScenarioConfig(_Strict):
    name: str
    description: str = ""
    seed: int = Field(0, ge=0, lt=2 ** 64)
    grid: GridSpec
    constants: Constants = Constants()
    state: StateSpec
    hamiltonian: HamiltonianSpec = HamiltonianSpec()
    propagator: PropagatorSpec
    protocol: ProtocolSpec | None = None
    trajectories: TrajectorySpec | None = None
    diagnostics: DiagnosticsSpec | None = None
    equilibrium: EquilibriumSpec | None = None
    output: OutputSpec = OutputSpec()

    @model_validator(mode="after")
    def _consistency(self):
        dims = len(self.grid.points)
        st = self.state
        vectors = []
        if isinstance(st, GaussianSpec):
            vectors = [st.center, st.width, st.kick]
        elif isinstance(st, SuperpositionSpec):
            vectors = [v for c in st.components for v in (c.center, c.width, c.kick)]
        else:
            if len(st.box) != dims:
                raise ValueError("state.box needs one side per grid axis")
            for m in st.modes or []:
                if len(m.n) != dims or min(m.n) < 1:
                    raise ValueError("mode quantum numbers need one positive entry per axis")
        for v in vectors:
            if isinstance(v, list) and len(v) != dims:
                raise ValueError(f"state vectors need {dims} entries")
        if self.hamiltonian.potential == "double_slit" and dims != 2:
            raise ValueError("double_slit potential needs a 2D grid")
        dt = self.propagator.dt
        _whole(self.propagator.t_final, dt, "propagator.t_final")
        if self.protocol is not None:
            if dims != 1:
                raise ValueError("the measurement protocol needs a 1D grid")
            _whole(self.protocol.time, dt, "protocol.time")
            for t in self.protocol.tau:
                _whole(t, dt, "protocol.tau")
            if self.protocol.extrapolation:
                for t in self.protocol.extrapolation.tau:
                    _whole(t, dt, "protocol.extrapolation.tau")
        if self.trajectories is not None:
            step = self.propagator.snapshot_stride * dt
            if self.trajectories.dt_path > step * (1 + 1e-12):
                raise ValueError("trajectories.dt_path exceeds the snapshot spacing")
            if self.trajectories.estimated is not None:
                if dims != 1:
                    raise ValueError("estimated-field paths need a 1D grid")
                _whole(self.trajectories.estimated.tau, dt, "trajectories.estimated.tau")
        eq = self.equilibrium
        if eq is not None and (eq.t_center is None or eq.stride is None) and self.diagnostics is None:
            raise ValueError("equilibrium needs t_center and stride (or a diagnostics section)")
        if self.equilibrium and self.equilibrium.relaxation:
            r = self.equilibrium.relaxation
            if not isinstance(st, ModesSpec):
                raise ValueError("relaxation needs a box-mode state")
            _whole(r.segment, dt * r.stride, "equilibrium.relaxation.segment")
            _whole(r.t_final, r.segment, "equilibrium.relaxation.t_final")
        return self


def _whole(span: float, step: float, what: str):
    n = span / step
    if abs(n - round(n)) > 1e-6:
        raise ValueError(f"{what} = {span} is not a whole number of steps of {step}")


def _line_of(node, loc) -> int | None:
    """Line (1-based) of the YAML node at pydantic location ``loc``."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(key):
                    nxt = v
                    line = k.start_mark.line + 1
                    break
            if nxt is None:
                return line
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def parse_config(text: str, source: str = "<config>", seed: int | None = None) -> ScenarioConfig:
    """Validate YAML ``text``; ``seed`` overrides the master seed."""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError([("<syntax>", mark.line + 1 if mark else None, str(exc))], source) from None
    if not isinstance(data, dict):
        raise ConfigError([("<root>", 1, "config must be a mapping")], source)
    if seed is not None:
        data["seed"] = seed
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            loc = tuple(k for k in err["loc"] if not (isinstance(k, str) and k in _UNION_TAGS))
            problems.append((".".join(map(str, loc)) or "<root>", _line_of(root, loc), err["msg"]))
        raise ConfigError(problems, source) from None


_UNION_TAGS = {"gaussian", "superposition", "modes", "float", "literal['uniform']"}


def load_config(path, seed: int | None = None) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([("<file>", None, str(exc))], str(path)) from None
    return parse_config(text, str(path), seed)


def resolved(cfg: ScenarioConfig) -> dict:
    """Fully resolved config as plain data (defaults filled in)."""
    return cfg.model_dump(mode="json")

