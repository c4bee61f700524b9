"""
Run configuration: package defaults plus validated TOML run files.
"""

import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, model_validator

from .materials import DriveSpec, MaterialsSpec
from .mesh import Mesh, load_mesh
from .mesh_template import (DiskParams, RectangleParams, TemplateParams, generate_disk,
                            generate_rectangle, generate_template)
from .shared_utils import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

# Load package defaults
settings_path = Path(__file__).parent / "config" / "settings.json"
with open(settings_path) as f:
    settings: Dict[str, Any] = json.load(f)


def get_settings() -> Dict[str, Any]:
    """Package defaults from config/settings.json."""
    return settings


def _default(section: str, key: str) -> Any:
    return settings[section][key]


class SolverSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    newton_tol: float = Field(_default("solver", "newton_tol"), gt=0.0)
    newton_abs_floor: float = Field(_default("solver", "newton_abs_floor"), gt=0.0)
    max_newton_iterations: int = Field(_default("solver", "max_newton_iterations"), ge=1)
    max_halvings: int = Field(_default("solver", "max_halvings"), ge=0)
    linear_tol: float = Field(_default("solver", "linear_tol"), gt=0.0)
    initial_condition: Literal["magnetostatic", "zero"] = "magnetostatic"


class CostSpec(BaseModel):
    """Cost weights and the geometry constants of the power and torque formulas."""

    model_config = ConfigDict(extra="forbid")

    lambda1: float = Field(1.0, ge=0.0)
    lambda2: float = Field(0.0, ge=0.0)
    axial_length: float = Field(0.1, gt=0.0)
    r_rotor: Optional[float] = Field(None, gt=0.0)
    r_stator: Optional[float] = Field(None, gt=0.0)

    @model_validator(mode="after")
    def _annulus_order(self) -> "CostSpec":
        if self.r_rotor is not None and self.r_stator is not None and self.r_rotor >= self.r_stator:
            raise ValueError("torque annulus needs r_rotor < r_stator")
        return self


class FlagsSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    per_component_mean: bool = True
    paper_literal_torque_sum: bool = False
    include_initial_adjoint: bool = True


class ShapeOptSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    step_fraction: float = Field(_default("shapeopt", "step_fraction"), gt=0.0)
    quality_floor: float = Field(_default("shapeopt", "quality_floor"), ge=0.0)
    max_iters: int = Field(_default("shapeopt", "max_iters"), ge=0)
    alpha_cr: float = Field(_default("shapeopt", "alpha_cr"), ge=0.0)
    eps0: float = Field(_default("shapeopt", "eps0"), gt=0.0)
    max_halvings: int = Field(_default("shapeopt", "max_halvings"), ge=0)
    step_floor: float = Field(_default("shapeopt", "step_floor"), gt=0.0)


class GradCheckSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    samples: int = Field(_default("gradcheck", "samples"), ge=1)
    eps_factor: float = Field(_default("gradcheck", "eps_factor"), ge=0.0)
    noise_margin: float = Field(_default("gradcheck", "noise_margin"), gt=0.0)
    gate: float = Field(_default("gradcheck", "gate"), ge=0.0)
    seed: int = _default("gradcheck", "seed")


class OutputSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    directory: str = _default("output", "directory")
    dump_fields: bool = False
    dump_adjoint: bool = False
    dump_iterations: bool = False


class MeshSection(BaseModel):
    """Exactly one mesh source: a file or one of the built-in generators."""

    model_config = ConfigDict(extra="forbid")

    path: Optional[str] = None
    template: Optional[TemplateParams] = None
    disk: Optional[DiskParams] = None
    rectangle: Optional[RectangleParams] = None

    @model_validator(mode="after")
    def _one_source(self) -> "MeshSection":
        given = [name for name in ("path", "template", "disk", "rectangle") if getattr(self, name) is not None]
        if len(given) != 1:
            raise ValueError(f"[mesh] needs exactly one of path, template, disk, rectangle (got {given or 'none'})")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mesh: MeshSection
    materials: MaterialsSpec = Field(default_factory=MaterialsSpec)
    drive: DriveSpec = Field(default_factory=DriveSpec)
    cost: CostSpec = Field(default_factory=CostSpec)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    shapeopt: ShapeOptSettings = Field(default_factory=ShapeOptSettings)
    gradcheck: GradCheckSettings = Field(default_factory=GradCheckSettings)
    flags: FlagsSpec = Field(default_factory=FlagsSpec)
    output: OutputSpec = Field(default_factory=OutputSpec)

    _base_dir: Path = PrivateAttr(default_factory=Path.cwd)

    @classmethod
    def from_text(cls, text: str, base_dir: Optional[Path] = None) -> "RunConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML: {e}") from e
        try:
            config = cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(str(e)) from e
        if base_dir is not None:
            config._base_dir = base_dir
        return config

    @classmethod
    def load(cls, path: Union[str, Path]) -> Tuple["RunConfig", str]:
        """Validated config and the SHA-256 of the file bytes."""
        path = Path(path)
        raw = path.read_bytes()
        digest = hashlib.sha256(raw).hexdigest()
        config = cls.from_text(raw.decode("utf-8"), base_dir=path.resolve().parent)
        logger.info(f"Loaded run config {path} (sha256 {digest[:12]})")
        return config, digest

    @property
    def base_dir(self) -> Path:
        return self._base_dir


def build_mesh(config: RunConfig) -> Mesh:
    """Load or generate the initial mesh of a run."""
    section = config.mesh
    if section.path is not None:
        path = Path(section.path)
        if not path.is_absolute():
            path = config.base_dir / path
        return load_mesh(path)
    if section.template is not None:
        params = section.template
        if params.poles != 2 * config.drive.pole_pairs:
            raise ConfigError(
                f"template has {params.poles} poles but drive pole_pairs = {config.drive.pole_pairs}")
        params = params.model_copy(update={"steps_per_period": config.drive.steps_per_period})
        return generate_template(params)
    if section.disk is not None:
        return generate_disk(section.disk)
    assert section.rectangle is not None
    return generate_rectangle(section.rectangle)


def output_directory(config: RunConfig, override: Optional[Union[str, Path]] = None) -> Path:
    """EMSHAPE_OUT (environment or .env) wins over --out, which wins over [output]."""
    load_dotenv()
    env = os.getenv("EMSHAPE_OUT")
    if env:
        return Path(env)
    if override is not None:
        return Path(override)
    return Path(config.output.directory)
