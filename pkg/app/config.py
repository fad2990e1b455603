"""Presets, run-configuration loading and logging setup for the command line."""

import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveFloat, PositiveInt, ValidationError, field_validator

from app.cine_segmenter import SegmenterConfig
from app.errors import ConfigError
from app.fusion import MODALITIES
from app.synthetic_cohort import CohortSpec
from app.text_encoder import TextEncoderConfig
from app.training import TrainConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "PRTM_"
CONSOLE_FORMAT = "%(levelname)s %(name)s: %(message)s"
FILE_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Preset(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    cohort: CohortSpec
    segmenter: SegmenterConfig
    text: TextEncoderConfig
    train: TrainConfig


PRESETS: Dict[str, Preset] = {
    "desk": Preset(
        name="desk",
        cohort=CohortSpec(cine_shape=(64, 64, 8)),
        segmenter=SegmenterConfig(height=64, width=64, depth=8, patch_size=4, dims=(32, 64, 128)),
        text=TextEncoderConfig(max_len=64, width=768, blocks=2),
        train=TrainConfig(epochs=50),
    ),
    "paper": Preset(
        name="paper",
        cohort=CohortSpec(cine_shape=(512, 512, 16)),
        segmenter=SegmenterConfig(height=512, width=512, depth=16, patch_size=4, dims=(32, 64, 128)),
        text=TextEncoderConfig(max_len=512, width=768),
        train=TrainConfig(epochs=500),
    ),
}


# alternative names accepted on the command line
PRESET_ALIASES = {"full": "paper"}


def preset_names() -> List[str]:
    return sorted(set(PRESETS) | set(PRESET_ALIASES))


def get_preset(name: str) -> Preset:
    name = PRESET_ALIASES.get(name, name)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}' (choose from {', '.join(preset_names())})")
    return PRESETS[name]


class RunConfig(BaseModel):
    """Flat run settings shared by the config file, the environment and the flags."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: Optional[NonNegativeInt] = None
    preset: str = "desk"
    cohort: Optional[str] = None
    out: Optional[str] = None
    model: Optional[str] = None
    epochs: Optional[PositiveInt] = None
    batch_size: Optional[PositiveInt] = None
    learning_rate: Optional[PositiveFloat] = None
    strategy: str = "self"
    modalities: Tuple[str, ...] = MODALITIES
    workers: PositiveInt = 1
    log_level: str = "INFO"
    n: Optional[PositiveInt] = None
    cine: Optional[NonNegativeInt] = None
    repeats: PositiveInt = Field(5, description="permutation repeats for importance")

    @field_validator("modalities", mode="before")
    @classmethod
    def _split_modalities(cls, value: Any) -> Any:
        if isinstance(value, str):
            value = tuple(part.strip() for part in value.replace("+", ",").split(",") if part.strip())
        unknown = set(value) - set(MODALITIES)
        if unknown or not value:
            raise ValueError(f"modalities must be a nonempty subset of {MODALITIES}, got {value}")
        return tuple(m for m in MODALITIES if m in set(value))

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, value: str) -> str:
        value = value.upper()
        if value not in LOG_LEVELS:
            raise ValueError(f"unknown log level '{value}' (choose from {', '.join(LOG_LEVELS)})")
        return value


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Config file < ``PRTM_*`` environment < command-line overrides."""
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for key, value in dotenv_values(path).items():
            name = key.strip().lower()
            if name not in RunConfig.model_fields:
                raise ConfigError(f"{path}: unknown config key '{key}'")
            if value is None:
                raise ConfigError(f"{path}: config key '{key}' has no value")
            values[name] = value

    for name in RunConfig.model_fields:
        env = os.getenv(f"{ENV_PREFIX}{name.upper()}")
        if env is not None:
            values[name] = env

    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig(**values)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid run configuration: {problems}") from e


def apply_overrides(preset: Preset, run: RunConfig) -> Preset:
    """Fold seed, cohort size and optimizer overrides from the run config into a preset."""
    cohort = preset.cohort.model_dump()
    train = preset.train.model_dump()
    if run.seed is not None:
        cohort["seed"] = run.seed
        train["seed"] = run.seed
    if run.n is not None:
        cohort["n_clinical"] = run.n
    if run.cine is not None:
        cohort["n_cine"] = run.cine
    for name in ("epochs", "batch_size", "learning_rate"):
        if getattr(run, name) is not None:
            train[name] = getattr(run, name)
    try:
        return preset.model_copy(update={"cohort": CohortSpec(**cohort), "train": TrainConfig(**train)})
    except ValidationError as e:
        raise ConfigError(f"invalid overrides for preset '{preset.name}': {e}") from e


def configure_logging(level: str = "INFO", log_file: Optional[Union[str, Path]] = None) -> None:
    """Console logs go to stderr without timestamps; only the run log carries them."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.setLevel(level.upper())

    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    root.addHandler(console)

    if log_file is not None:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(log_file)
        handler.setFormatter(logging.Formatter(FILE_FORMAT))
        root.addHandler(handler)
        logger.debug(f"Logging to {log_file}")
