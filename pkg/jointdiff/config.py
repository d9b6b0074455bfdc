# jointdiff/config.py
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import yaml
from platformdirs import user_config_dir
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from jointdiff.data.synthdata import DEFAULT_FRACTIONS, GeneratorConfig
from jointdiff.diffusion.schedule import ScheduleConfig
from jointdiff.errors import ConfigError
from jointdiff.model.sampler import SamplerConfig
from jointdiff.model.trainer import TrainConfig
from jointdiff.nn.denoiser import DenoiserConfig

logger = logging.getLogger(__name__)

CONFIG_ECHO = "config.yaml"


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_subjects: int = Field(2000, ge=1)
    fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)


class RunConfig(BaseModel):
    """Root of every tunable setting; echoed into each output directory."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    @model_validator(mode="after")
    def _consistent(self) -> "RunConfig":
        K = self.schedule.n_categories
        if self.denoiser.n_categories != K or self.data.generator.n_categories != K:
            raise ValueError(
                f"n_categories disagree: schedule {K}, denoiser {self.denoiser.n_categories}, "
                f"generator {self.data.generator.n_categories}"
            )
        if self.denoiser.side != self.data.generator.side:
            raise ValueError(f"denoiser side {self.denoiser.side} != generator side {self.data.generator.side}")
        if self.sampler.n_continuous > self.schedule.T:
            raise ValueError(f"sampler.n_continuous {self.sampler.n_continuous} exceeds T {self.schedule.T}")
        return self


def default_config_path() -> Path:
    return Path(user_config_dir("jointdiff")) / "config.yaml"


def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"Cannot set {dotted}: {key} is not a section")
        node = child
    node[keys[-1]] = value


def parse_override(item: str) -> Tuple[str, Any]:
    """Split 'a.b=value'; the value is parsed as YAML so numbers and lists work."""
    if "=" not in item:
        raise ConfigError(f"Override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"Override {item!r} has an empty key")
    try:
        return key, yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"Override {item!r} has an unparsable value: {e}") from e


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Resolve the run config from a YAML file plus --set overrides.

    Args:
        path: Explicit config file; when None the user-level default file is
            used if it exists.
        overrides: Items of the form 'section.key=value'.

    Returns:
        Validated RunConfig.
    """
    tree: Dict[str, Any] = {}
    if path is None and default_config_path().exists():
        path = default_config_path()
        logger.debug(f"Using user config {path}")

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file {path} does not exist")
        try:
            with open(path, "r") as f:
                tree = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Config file {path} is not valid YAML: {e}") from e
        if not isinstance(tree, dict):
            raise ConfigError(f"Config file {path} must hold a mapping at top level")

    for item in overrides:
        key, value = parse_override(item)
        _set_dotted(tree, key, value)

    try:
        return RunConfig(**tree)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e.errors(include_url=False)}") from e


def dump_run_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True)


def echo_run_config(config: RunConfig, out_dir: Union[str, Path]) -> Path:
    """Write the fully resolved config next to a command's outputs."""
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    path = out_dir / CONFIG_ECHO
    path.write_text(dump_run_config(config))
    return path
