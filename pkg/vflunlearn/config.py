import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import List, Literal, Optional

from dotenv import load_dotenv
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from vflunlearn.data import BackdoorSpec
from vflunlearn.exceptions import ConfigError
from vflunlearn.protocol import ArchitectureName, TrainConfig
from vflunlearn.unlearn import UnlearnConfig
from vflunlearn.verify import MIAConfig

Arm = Literal[
    "fedavg", "retrain", "constrained", "unlearn", "unlearn_pt", "grid_t", "grid_r", "mia"
]
DatasetName = Literal["mnist", "fashion-mnist", "cifar10", "synth"]
LogLevel = Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


class ExperimentSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "experiment"
    arm: Arm = "fedavg"
    seed: int = 0
    output_dir: str = "runs"
    log_level: LogLevel = "INFO"
    timing_in_metrics: bool = False
    allow_cifar: bool = False

    @field_validator("log_level", mode="before")
    @classmethod
    def _upper_level(cls, value):
        return value.upper() if isinstance(value, str) else value


class DatasetSection(BaseModel):
    """Where samples come from and which split architecture consumes them.

    ``path`` is the directory holding the four IDX files (MNIST,
    Fashion-MNIST) or the CIFAR-10 binary batches. The ``synth_*`` keys size
    the generated dataset when ``name = "synth"``.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: DatasetName = "synth"
    path: Optional[str] = None
    train_limit: Optional[int] = Field(None, ge=1)
    test_limit: Optional[int] = Field(None, ge=1)
    architecture: ArchitectureName = "cnn"
    hidden: int = Field(32, ge=1)
    synth_train: int = Field(600, ge=1)
    synth_test: int = Field(200, ge=1)
    synth_noise: float = Field(0.1, ge=0)
    synth_height: int = Field(28, ge=2)
    synth_width: int = Field(28, ge=2)


class GridSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    thresholds: List[float] = Field(default_factory=lambda: [1.0, 2.0, 5.0, 10.0, 20.0])
    radius_multipliers: List[float] = Field(default_factory=lambda: [1 / 3, 1.0, 3.0])
    workers: int = Field(1, ge=1)


class ExperimentConfig(BaseModel):
    """Root of an experiment config file."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    train: TrainConfig = Field(default_factory=TrainConfig)
    unlearn: UnlearnConfig = Field(default_factory=UnlearnConfig)
    backdoor: BackdoorSpec = Field(default_factory=BackdoorSpec)
    mia: MIAConfig = Field(default_factory=MIAConfig)
    grid: GridSection = Field(default_factory=GridSection)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        if self.unlearn.target_client > self.train.num_clients:
            raise ValueError(
                f"unlearn.target_client {self.unlearn.target_client} is not among "
                f"{self.train.num_clients} clients"
            )
        if self.unlearn.target_client not in self.train.active():
            raise ValueError(
                f"unlearn.target_client {self.unlearn.target_client} is not among "
                f"train.participants {list(self.train.active())}"
            )
        if self.unlearn.selected_party != self.backdoor.selected_party:
            raise ValueError("unlearn.selected_party and backdoor.selected_party differ")
        if self.dataset.name == "cifar10" and not self.experiment.allow_cifar:
            raise ValueError("cifar10 runs need experiment.allow_cifar = true")
        if self.dataset.name != "synth" and self.dataset.path is None:
            raise ValueError(f"dataset {self.dataset.name} needs dataset.path")
        return self

    @property
    def run_dir(self) -> str:
        return os.path.join(self.experiment.output_dir, self.experiment.name, self.experiment.arm)


def _location(loc) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def apply_env_overrides(cfg: ExperimentConfig) -> ExperimentConfig:
    """Apply ``VFLU_OUTPUT_ROOT`` and ``VFLU_LOG_LEVEL`` from the environment or ``.env``.

    Raises:
        ConfigError: If an overridden value fails validation.
    """
    load_dotenv()
    updates = {}
    output_root = os.getenv("VFLU_OUTPUT_ROOT")
    if output_root:
        updates["output_dir"] = output_root
    log_level = os.getenv("VFLU_LOG_LEVEL")
    if log_level:
        updates["log_level"] = log_level.upper()
    if not updates:
        return cfg
    # model_copy skips validation, so the overridden section is validated again
    try:
        experiment = ExperimentSection.model_validate({**cfg.experiment.model_dump(), **updates})
    except ValidationError as exc:
        diagnostics = [f"experiment.{_location(e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid environment override", diagnostics) from exc
    return cfg.model_copy(update={"experiment": experiment})


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate a TOML experiment config.

    Args:
        path (str): Path to the config file.

    Returns:
        ExperimentConfig: The validated config with environment overrides applied.

    Raises:
        ConfigError: If the file is missing, is not valid TOML or fails
            validation. Diagnostics carry the line (parse errors) or the dotted
            field path (validation errors).
    """
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}", [str(exc)]) from exc

    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        diagnostics = [f"{_location(e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError(f"invalid config {path}", diagnostics) from exc
    return apply_env_overrides(cfg)
