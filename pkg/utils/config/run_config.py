"""
Run configuration: an INI file with one validated section per concern.

    [grid]          nx, nz, h, true_model, initial_model
    [acquisition]   source/receiver lines, data_file, wavelet, PML
    [schedule]      frequency batches and stopping rules
    [regularizer]   kind, alpha, alpha_grid, mixed_hessian
    [penalties]     dimensionless penalty knobs
    [bounds]        benchmark | fixed | none
    [output]        per-batch rasters

Relative file paths are resolved against the directory of the INI file.
"""
import configparser
import logging
import os
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.field_ops import ModelGrid
from core.helmholtz import Acquisition, PMLSettings
from core.irwri import ContinuationSchedule, PenaltySettings, build_paths
from core.regularizers import BoxBounds, RegularizerKind, RegularizerSpec
from utils.errors import ConfigError

logger = logging.getLogger("run_config")


def _split_floats(value: Any, separator: str = ",") -> Any:
    if isinstance(value, str):
        return [float(item) for item in value.replace(";", separator).split(separator) if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSection(_Section):
    nx: int = Field(ge=3)
    nz: int = Field(default=1, ge=1)
    h: float = Field(gt=0)
    true_model: Optional[str] = None
    initial_model: Optional[str] = None

    def model_grid(self) -> ModelGrid:
        return ModelGrid(nx=self.nx, nz=self.nz, h=self.h)


class AcquisitionSection(_Section):
    """Sources and receivers on horizontal lines of cells (index z = line_z)."""

    source_line_z: int = Field(default=0, ge=0)
    source_first_x: int = Field(ge=0)
    source_last_x: Optional[int] = None
    source_step: int = Field(default=1, ge=1)
    receiver_line_z: int = Field(default=0, ge=0)
    receiver_first_x: int = Field(default=0, ge=0)
    receiver_last_x: Optional[int] = None
    receiver_step: int = Field(default=1, ge=1)
    amplitude: float = 1.0
    wavelet_peak_hz: Optional[float] = Field(default=None, gt=0)
    pml_width: int = Field(default=10, ge=0)
    pml_strength: Optional[float] = Field(default=None, gt=0)
    pml_velocity: Optional[float] = Field(default=None, gt=0)
    data_file: Optional[str] = None

    def build(self, grid: ModelGrid) -> Acquisition:
        def line(first, last, step, z):
            last = first if last is None else last
            if last < first:
                raise ConfigError(f"acquisition line runs backwards: first_x={first}, last_x={last}")
            try:
                return [grid.index(ix, z) for ix in range(first, last + 1, step)]
            except ValueError as err:
                raise ConfigError(f"acquisition: {err}") from err

        sources = line(self.source_first_x, self.source_last_x, self.source_step, self.source_line_z)
        receiver_last = grid.nx - 1 if self.receiver_last_x is None else self.receiver_last_x
        receivers = line(self.receiver_first_x, receiver_last, self.receiver_step, self.receiver_line_z)
        try:
            return Acquisition(grid, tuple(sources), tuple(receivers), amplitudes=[self.amplitude] * len(sources),
                               wavelet_peak_hz=self.wavelet_peak_hz)
        except ValueError as err:
            raise ConfigError(f"acquisition: {err}") from err

    def pml(self) -> PMLSettings:
        settings = {"width": self.pml_width, "velocity": self.pml_velocity}
        if self.pml_strength is not None:
            settings["strength"] = self.pml_strength
        return PMLSettings(**settings)


class ScheduleSection(_Section):
    """Either explicit `batches` ("3 3.5; 3.5 4") or `ranges` ("3.5:6, 4:8.5")."""

    batches: Optional[List[List[float]]] = None
    ranges: Optional[List[Tuple[float, float]]] = None
    batch_size: int = Field(default=2, ge=1)
    step: float = Field(default=0.5, gt=0)
    overlap: int = Field(default=1, ge=0)
    k_max: int = Field(default=15, ge=1)
    first_batch_k_max: Optional[int] = Field(default=None, ge=1)
    eps_b: float = Field(default=1e-3, ge=0)
    eps_d: float = Field(default=1e-5, ge=0)
    bound_activation: int = Field(default=0, ge=0)
    paths: int = Field(default=1, ge=1)

    @field_validator("batches", mode="before")
    @classmethod
    def _parse_batches(cls, value):
        if isinstance(value, str):
            return [[float(f) for f in chunk.replace(",", " ").split()] for chunk in value.split(";") if chunk.strip()]
        return value

    @field_validator("ranges", mode="before")
    @classmethod
    def _parse_ranges(cls, value):
        if isinstance(value, str):
            pairs = []
            for chunk in value.split(","):
                if chunk.strip():
                    start, stop = chunk.split(":")
                    pairs.append((float(start), float(stop)))
            return pairs
        return value

    @model_validator(mode="after")
    def _one_source_of_batches(self):
        if (self.batches is None) == (self.ranges is None):
            raise ValueError("exactly one of 'batches' or 'ranges' must be given")
        return self

    def frequency_batches(self) -> List[List[float]]:
        if self.batches is not None:
            return [list(batch) for batch in self.batches]
        return build_paths(self.ranges, self.batch_size, self.step, self.overlap)

    def schedule(self) -> ContinuationSchedule:
        return ContinuationSchedule(batches=self.frequency_batches(), k_max=self.k_max,
                                    first_batch_k_max=self.first_batch_k_max, eps_b=self.eps_b,
                                    eps_d=self.eps_d, bound_activation=self.bound_activation, paths=self.paths)


class RegularizerSection(_Section):
    kind: RegularizerKind
    alpha: float = 0.5
    mixed_hessian: bool = False
    alpha_grid: List[float] = Field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 10)])

    @field_validator("alpha_grid", mode="before")
    @classmethod
    def _parse_alpha_grid(cls, value):
        return _split_floats(value)

    def spec(self, alpha: Optional[float] = None) -> RegularizerSpec:
        return RegularizerSpec(kind=self.kind, alpha=self.alpha if alpha is None else alpha,
                               mixed_hessian=self.mixed_hessian)


class PenaltiesSection(PenaltySettings):
    model_config = ConfigDict(extra="forbid", frozen=True)

    def settings(self) -> PenaltySettings:
        return PenaltySettings(**self.model_dump())


class BoundsSection(_Section):
    """benchmark: 50 % of the true minimum and 150 % of the true maximum velocity."""

    mode: Literal["benchmark", "fixed", "none"] = "benchmark"
    v_min: Optional[float] = Field(default=None, gt=0)
    v_max: Optional[float] = Field(default=None, gt=0)
    lower_fraction: float = Field(default=0.5, gt=0)
    upper_fraction: float = Field(default=1.5, gt=0)

    @model_validator(mode="after")
    def _fixed_needs_velocities(self):
        if self.mode == "fixed" and (self.v_min is None or self.v_max is None):
            raise ValueError("fixed bounds need v_min and v_max")
        if self.v_min is not None and self.v_max is not None and self.v_min > self.v_max:
            raise ValueError("v_min exceeds v_max")
        return self

    def box(self, true_velocity=None) -> Optional[BoxBounds]:
        if self.mode == "none":
            return None
        if self.mode == "fixed":
            return BoxBounds.from_velocities(self.v_min, self.v_max)
        if true_velocity is None:
            raise ConfigError("bounds.mode = benchmark needs grid.true_model")
        return BoxBounds.from_velocities(self.lower_fraction * float(true_velocity.min()),
                                         self.upper_fraction * float(true_velocity.max()))


class OutputSection(_Section):
    per_batch_models: bool = False
    log_name: str = "convergence.csv"
    header_name: str = "run_header.yaml"
    model_name: str = "final_model.bin"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    grid: GridSection
    acquisition: AcquisitionSection
    schedule: ScheduleSection
    regularizer: RegularizerSection
    penalties: PenaltiesSection = Field(default_factory=PenaltiesSection)
    bounds: BoundsSection = Field(default_factory=BoundsSection)
    output: OutputSection = Field(default_factory=OutputSection)
    base_dir: str = "."

    def resolve(self, path: Optional[str]) -> Optional[str]:
        if path is None or os.path.isabs(path):
            return path
        return os.path.join(self.base_dir, path)

    def resolved(self) -> Dict[str, Any]:
        """Every numerics-affecting parameter, including the expanded schedule."""
        echo = self.model_dump(mode="json", exclude={"base_dir"})
        echo["schedule"]["resolved_batches"] = self.schedule.frequency_batches()
        return echo

    def to_ini(self) -> str:
        lines = []
        for name in ("grid", "acquisition", "schedule", "regularizer", "penalties", "bounds", "output"):
            values = getattr(self, name).model_dump(exclude_none=True, exclude_defaults=True)
            lines.append(f"[{name}]")
            lines.extend(f"{key} = {_ini_value(key, value)}" for key, value in values.items())
            lines.append("")
        return "\n".join(lines)


def _ini_value(key: str, value: Any) -> str:
    if key == "batches":
        return "; ".join(" ".join(repr(float(f)) for f in batch) for batch in value)
    if key == "ranges":
        return ", ".join(f"{float(a)!r}:{float(b)!r}" for a, b in value)
    if isinstance(value, (list, tuple)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def _config_error(err: ValidationError) -> ConfigError:
    problems = []
    for item in err.errors():
        location = ".".join(str(part) for part in item["loc"])
        problems.append(f"{location}: {item['msg']}")
    return ConfigError("invalid configuration: " + "; ".join(problems))


def parse_run_config(text: str, base_dir: str = ".") -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed configuration file: {err}") from err

    known = set(RunConfig.model_fields) - {"base_dir"}
    unknown = [name for name in parser.sections() if name not in known]
    if unknown:
        raise ConfigError(f"unknown configuration section(s): {', '.join(unknown)}")
    sections = {name: dict(parser[name]) for name in parser.sections()}
    try:
        return RunConfig(**sections, base_dir=base_dir)
    except ValidationError as err:
        raise _config_error(err) from err


def load_run_config(path: str) -> RunConfig:
    """
    Read and validate an INI run configuration.

    Raises:
        ConfigError: missing file, unknown section or key, or invalid value;
            the message names section.key.
    """
    if not os.path.isfile(path):
        raise ConfigError(f"configuration file not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    config = parse_run_config(text, os.path.dirname(os.path.abspath(path)))
    logger.info(f"Loaded configuration {path}: {config.regularizer.kind.value}, "
                f"{len(config.schedule.frequency_batches())} batch(es)")
    return config
