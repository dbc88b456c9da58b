import json
import logging
import os
from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError
from feature_service import CorpusConfig
from network_service import PRESETS, ModelConfig, apply_preset
from training_service import OptimizerConfig, TrainingSchedule

# Configure logging
logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = "runs"
DEFAULT_MAPPING_DIR = "assets"


class CorpusSource(BaseModel):
    """Either corpus directories on disk or a synthetic corpus split into train/valid."""

    model_config = ConfigDict(extra="forbid")

    train_path: Optional[str] = None
    valid_path: Optional[str] = None
    synth: Optional[CorpusConfig] = None
    valid_utterances: int = Field(5, ge=1)

    @model_validator(mode="after")
    def _check_source(self):
        if (self.train_path is None) == (self.synth is None):
            raise ValueError("give exactly one of corpus.train_path or corpus.synth")
        if self.train_path is not None and self.valid_path is None:
            raise ValueError("corpus.valid_path is required with corpus.train_path")
        return self


class GradCheckConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tolerance: float = Field(1e-4, gt=0.0)
    eps: float = Field(1e-5, gt=0.0)
    floor: float = Field(1e-4, gt=0.0)
    utterances: int = Field(1, ge=1)


class ExperimentConfig(BaseModel):
    """
    One experiment: where the data comes from, the model, the schedule and
    the optimizer. `seed` drives every random choice; it overrides
    schedule.seed.
    """

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    output_dir: Optional[str] = None
    preset: Optional[Literal["desk", "paper"]] = None
    corpus: CorpusSource
    model: ModelConfig = ModelConfig()
    schedule: TrainingSchedule = TrainingSchedule()
    optimizer: OptimizerConfig = OptimizerConfig()
    grad_check: GradCheckConfig = GradCheckConfig()

    @model_validator(mode="after")
    def _sync(self):
        if self.preset is not None:
            self.model = apply_preset(self.model, self.preset)
        if self.schedule.seed != self.seed:
            self.schedule = self.schedule.model_copy(update={"seed": self.seed})
        synth = self.corpus.synth
        if synth is not None:
            expected = {"num_bins": synth.num_bins, "visual_dim": synth.visual_dim,
                        "num_classes": synth.num_phones + 1}
            actual = {name: getattr(self.model, name) for name in expected}
            if actual != expected:
                raise ValueError(f"model dims {actual} do not match the synthetic corpus {expected}")
        return self

    def resolved_output_dir(self, override: Optional[str] = None) -> str:
        return override or self.output_dir or os.getenv("AVSE_OUTPUT_DIR", DEFAULT_OUTPUT_DIR)


def parse_experiment_config(data: Dict[str, Any], seed: Optional[int] = None, preset: Optional[str] = None,
                            output_dir: Optional[str] = None) -> ExperimentConfig:
    """Validate a raw config dict, applying command-line overrides first."""
    data = dict(data)
    if seed is not None:
        data["seed"] = seed
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}', expected one of {sorted(PRESETS)}")
        data["preset"] = preset
    if output_dir is not None:
        data["output_dir"] = output_dir
    try:
        return ExperimentConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {e}")


def load_experiment_config(path: str, seed: Optional[int] = None, preset: Optional[str] = None,
                           output_dir: Optional[str] = None) -> ExperimentConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    config = parse_experiment_config(data, seed=seed, preset=preset, output_dir=output_dir)
    logger.info(f"Loaded experiment config from {path} (seed={config.seed}, "
                f"strategy={config.schedule.strategy.kind}, architecture={config.model.architecture})")
    return config


def resolve_mapping_path(name_or_path: str) -> str:
    """A mapping file path as given, or `<name>.map` inside AVSE_MAPPING_DIR."""
    if os.path.isfile(name_or_path):
        return name_or_path
    filename = name_or_path if name_or_path.endswith(".map") else f"{name_or_path}.map"
    candidate = os.path.join(os.getenv("AVSE_MAPPING_DIR", DEFAULT_MAPPING_DIR), filename)
    if os.path.isfile(candidate):
        return candidate
    raise ConfigError(f"phone mapping not found: {name_or_path}")
