"""
Data models for run configuration and artifacts
Every section rejects unknown keys so typos fail loudly
"""

import json
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, ValidationError, field_validator, model_validator

from .errors import ConfigError, DataError
from .logger import get_logger

logger = get_logger("models")

BoundaryKindName = Literal["robin", "abc", "dirichlet", "neumann"]
Quantity = Literal["pressure", "velocity_x", "velocity_y", "velocity_z"]
Parameter = Literal["wave_speed", "kappa_inv"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MeshSection(StrictModel):
    """Either a structured generator (extent + cells_per_axis) or a mesh file"""
    extent: Optional[List[Tuple[float, float]]] = None
    cells_per_axis: Optional[List[int]] = None
    path: Optional[str] = None

    @model_validator(mode="after")
    def one_source(self):
        generated = self.extent is not None or self.cells_per_axis is not None
        if generated and self.path is not None:
            raise ValueError("conflicting mesh sources: give either extent/cells_per_axis or path")
        if not generated and self.path is None:
            raise ValueError("mesh needs extent/cells_per_axis or path")
        if generated and (self.extent is None or self.cells_per_axis is None):
            raise ValueError("structured mesh needs both extent and cells_per_axis")
        if generated and len(self.extent) != len(self.cells_per_axis):
            raise ValueError("extent and cells_per_axis must have the same length")
        return self

    @property
    def dimension(self) -> Optional[int]:
        """None for mesh files, whose dimension is only known after import"""
        return len(self.extent) if self.extent is not None else None


def check_model_dimension(section: "ModelSection", dim: Optional[int], key: str):
    """Raise ConfigError when an inclusion centre or the gradient does not have `dim` entries"""
    if dim is None:
        return
    if section.gradient is not None and len(section.gradient) != dim:
        raise ConfigError(
            f"{key}.gradient has {len(section.gradient)} entries on a {dim}D mesh", key=f"{key}.gradient"
        )
    for k, inclusion in enumerate(section.inclusions):
        if len(inclusion.center) != dim:
            raise ConfigError(
                f"{key}.inclusions.{k}.center has {len(inclusion.center)} coordinates on a {dim}D mesh",
                key=f"{key}.inclusions.{k}.center",
            )


class InclusionSection(StrictModel):
    center: List[float]
    radius: PositiveFloat
    wave_speed: PositiveFloat


class ModelSection(StrictModel):
    wave_speed: PositiveFloat = 1500.0
    density: PositiveFloat = 1000.0
    order: int = Field(0, ge=0, le=2)
    gradient: Optional[List[float]] = None   # wave speed increase per unit length along each axis
    inclusions: List[InclusionSection] = []
    path: Optional[str] = None
    bounds: Tuple[PositiveFloat, PositiveFloat] = (1.0, 1.0e5)

    @field_validator("bounds")
    @classmethod
    def ordered_bounds(cls, value):
        if value[0] >= value[1]:
            raise ValueError("bounds must satisfy c_min < c_max")
        return value


class BoundaryConditionSection(StrictModel):
    kind: BoundaryKindName
    alpha: float = 0.0
    beta: float = 1.0


class BoundarySection(StrictModel):
    default: BoundaryConditionSection = BoundaryConditionSection(kind="abc")
    tags: Dict[str, BoundaryConditionSection] = {"top": BoundaryConditionSection(kind="dirichlet")}


class SourceSection(StrictModel):
    position: List[float]
    amplitude: Tuple[float, float] = (1.0, 0.0)   # (real, imaginary)


class LineSection(StrictModel):
    count: int = Field(ge=1)
    offset: Optional[PositiveFloat] = None       # below the top boundary; one cell height when absent


class AcquisitionSection(StrictModel):
    sources: List[SourceSection] = []
    receivers: List[List[float]] = []
    source_line: Optional[LineSection] = None
    receiver_line: Optional[LineSection] = None
    quantity: Quantity = "pressure"

    @model_validator(mode="after")
    def has_receivers(self):
        if not self.receivers and self.receiver_line is None:
            raise ValueError("acquisition needs receivers or a receiver_line")
        return self


class DiscretizationSection(StrictModel):
    order: int = Field(3, ge=0, le=8)
    adaptive: bool = False
    dofs_per_wavelength: PositiveFloat = 6.0
    p_min: Optional[int] = Field(None, ge=0)
    p_max: Optional[int] = Field(None, ge=0, le=8)


class ScheduledMesh(StrictModel):
    frequency: PositiveFloat
    mesh: MeshSection


class InversionSection(StrictModel):
    iterations: int = Field(30, ge=0)
    parameter: Parameter = "wave_speed"
    initial_model: Optional[ModelSection] = None
    data_path: Optional[str] = None
    initial_step_fraction: PositiveFloat = 0.05
    # Later trials start at step_growth x the last accepted change, capped at max_step_fraction
    step_growth: float = Field(2.0, ge=1.0)
    max_step_fraction: PositiveFloat = 0.5
    preconditioner: Literal["none", "pseudo_hessian"] = "pseudo_hessian"
    preconditioner_damping: float = Field(1e-2, gt=0)
    armijo_c1: float = Field(1e-4, gt=0, lt=1)
    max_halvings: int = Field(20, ge=1)
    gradient_tolerance: float = Field(0.0, ge=0)
    checkpoint_every: int = Field(10, ge=0)
    mesh_schedule: List[ScheduledMesh] = []


class SynthesisSection(StrictModel):
    snr_db: Optional[float] = None
    truth: Optional[ModelSection] = None
    mesh: Optional[MeshSection] = None
    order: Optional[int] = Field(None, ge=0, le=8)


class GradcheckSection(StrictModel):
    cells: int = Field(5, ge=1)
    steps: List[PositiveFloat] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8]
    parameter: Parameter = "wave_speed"


class RunConfig(StrictModel):
    mesh: MeshSection
    model: ModelSection = ModelSection()
    frequencies: List[PositiveFloat] = Field(min_length=1)   # Hz
    laplace_shift: float = Field(0.0, ge=0)
    boundary: BoundarySection = BoundarySection()
    acquisition: AcquisitionSection
    discretization: DiscretizationSection = DiscretizationSection()
    inversion: InversionSection = InversionSection()
    synthesis: SynthesisSection = SynthesisSection()
    gradcheck: GradcheckSection = GradcheckSection()
    output_dir: str = "output"
    seed: int = 0

    def sigma(self, frequency: float) -> complex:
        """sigma = i 2 pi f - s"""
        return complex(-self.laplace_shift, 2.0 * math.pi * frequency)

    @property
    def sigmas(self) -> List[complex]:
        return [self.sigma(f) for f in self.frequencies]

    @model_validator(mode="after")
    def matching_dimensions(self):
        """Points and gradients must live in the mesh dimension (checked for generated meshes)"""
        dim = self.mesh.dimension
        check_model_dimension(self.model, dim, "model")
        if self.inversion.initial_model is not None:
            check_model_dimension(self.inversion.initial_model, dim, "inversion.initial_model")
        if self.synthesis.truth is not None:
            truth_dim = self.synthesis.mesh.dimension if self.synthesis.mesh is not None else dim
            check_model_dimension(self.synthesis.truth, truth_dim, "synthesis.truth")
        if dim is not None:
            points = [(f"acquisition.sources.{k}.position", s.position) for k, s in enumerate(self.acquisition.sources)]
            points += [(f"acquisition.receivers.{k}", r) for k, r in enumerate(self.acquisition.receivers)]
            for key, point in points:
                if len(point) != dim:
                    raise ConfigError(f"{key} has {len(point)} coordinates on a {dim}D mesh", key=key)
        return self


class DataSetHeader(StrictModel):
    """JSON sidecar describing a measurement array indexed (frequency, source, receiver)"""
    frequencies: List[float]
    laplace_shift: float = 0.0
    sources: List[List[float]]
    amplitudes: List[Tuple[float, float]]
    receivers: List[List[float]]
    quantity: Quantity = "pressure"
    units: Dict[str, str] = {"frequency": "Hz", "position": "m", "value": "Pa"}
    layout: Literal["csv", "binary"] = "csv"
    values_file: str
    seed: Optional[int] = None
    snr_db: Optional[float] = None
    version: str = ""

    @property
    def shape(self) -> Tuple[int, int, int]:
        return len(self.frequencies), len(self.sources), len(self.receivers)


class IterationRecord(StrictModel):
    frequency: float
    iteration: int
    misfit: float
    step: float
    gradient_norm: float
    trials: int
    accepted: bool
    restarted: bool
    wall_time: float = 0.0


def _error_path(error: ValidationError) -> str:
    first = error.errors()[0]
    return ".".join(str(part) for part in first["loc"]) or "<root>"


def parse_config(source: Union[str, Path, dict]) -> RunConfig:
    """Read and validate a RunConfig from a JSON file (or an already-parsed dict)"""
    if isinstance(source, dict):
        raw = source
    else:
        path = Path(source)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}", path=str(path)) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}", path=str(path)) from exc

    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as exc:
        key = _error_path(exc)
        message = exc.errors()[0]["msg"]
        raise ConfigError(f"invalid config at {key}: {message}", key=key) from exc

    logger.info(
        f"Config: {len(config.frequencies)} frequencies, order {config.discretization.order}"
        f"{' (adaptive)' if config.discretization.adaptive else ''}, seed {config.seed}"
    )
    return config
