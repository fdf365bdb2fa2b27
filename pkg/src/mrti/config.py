"""Versioned run configuration (YAML on disk, validated with pydantic).

Every section rejects unknown keys, so a typo in a config file fails before
any work starts instead of silently falling back to a default.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .corpus import DEFAULT_HELDOUT, SHAPES, TEXTURES, ConceptSpec
from .diffusion import ModelConfig, NoiseSchedule
from .errors import ConfigurationError
from .evaluation import DEFAULT_T_GRID
from .inversion import InversionConfig, PretrainConfig

CONFIG_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CorpusSection(_Section):
    jitters: int = Field(32, ge=1)
    seed: int = 0
    heldout_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    exclude_concept: bool = False  # drop the concept's (shape, texture) pair from the training grid


class ConceptSection(_Section):
    name: str = "concept"
    shape: str = DEFAULT_HELDOUT.shape
    texture: str = DEFAULT_HELDOUT.texture
    scale: float = Field(DEFAULT_HELDOUT.scale, gt=0.0, le=1.0)
    contrast: float = Field(DEFAULT_HELDOUT.contrast, gt=0.0, le=1.0)
    N: int = Field(4, ge=1)
    seed: int = 0

    @field_validator("shape")
    @classmethod
    def _shape(cls, v):
        if v not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        return v

    @field_validator("texture")
    @classmethod
    def _texture(cls, v):
        if v not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}")
        return v

    def spec(self) -> ConceptSpec:
        return ConceptSpec(self.shape, self.texture, self.scale, self.contrast)


class ScheduleSection(_Section):
    num_steps: int = Field(100, ge=2)
    beta_start: float = Field(1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(0.2, gt=0.0, lt=1.0)

    def build(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.num_steps, self.beta_start, self.beta_end)


class ModelSection(_Section):
    embed_dim: int = Field(16, ge=1)
    cond_dim: int = Field(32, ge=1)
    time_dim: int = Field(16, ge=2)
    hidden: int = Field(256, ge=1)
    enc_hidden: int = Field(64, ge=1)
    max_len: int = Field(8, ge=6)

    def build(self) -> ModelConfig:
        return ModelConfig(**self.model_dump())


class PretrainSection(_Section):
    steps: int = Field(PretrainConfig.steps, ge=1)
    batch_size: int = Field(PretrainConfig.batch_size, ge=1)
    learning_rate: float = Field(PretrainConfig.learning_rate, gt=0.0)
    warmup: int = Field(PretrainConfig.warmup, ge=1)
    cond_dropout: float = Field(PretrainConfig.cond_dropout, ge=0.0, le=1.0)
    word_dropout: float = Field(PretrainConfig.word_dropout, ge=0.0, le=1.0)
    ema_decay: float = Field(PretrainConfig.ema_decay, ge=0.0, lt=1.0)
    seed: int = 0

    def build(self) -> PretrainConfig:
        return PretrainConfig(**self.model_dump())


class InversionSection(_Section):
    objective: Literal["vanilla", "multires"] = "multires"
    T: int = Field(10, ge=1)
    steps: int = Field(InversionConfig.steps, ge=1)
    batch_size: int = Field(InversionConfig.batch_size, ge=1)
    learning_rate: float = Field(InversionConfig.learning_rate, gt=0.0)
    init_word: Optional[str] = DEFAULT_HELDOUT.shape
    init_std: float = Field(0.02, gt=0.0)
    seed: int = 0

    def build(self) -> InversionConfig:
        data = self.model_dump()
        if data["objective"] == "vanilla":
            data["T"] = 1
        return InversionConfig(**data)


class SampleSection(_Section):
    prompts: list[str] = ["a photo of <concept>", "a photo of <concept(0.5)>"]
    n: int = Field(16, ge=1)
    seed: int = 0


class EvalSection(_Section):
    policies: list[Literal["fixed", "semi", "full"]] = ["fixed", "semi", "full"]
    t_grid: list[float] = list(DEFAULT_T_GRID)
    samples_per_point: int = Field(500, ge=2)
    seeds: list[int] = [0, 1, 2]
    workers: int = Field(1, ge=1)
    uncond_full_prompt: bool = False
    bucketed_lookup: bool = False

    @field_validator("t_grid")
    @classmethod
    def _grid(cls, v):
        if any(not 0.0 <= t <= 1.0 for t in v):
            raise ValueError("t_grid values must lie in [0, 1]")
        return v


class RunConfig(_Section):
    version: Literal[1] = CONFIG_VERSION
    corpus: CorpusSection = CorpusSection()
    concept: ConceptSection = ConceptSection()
    schedule: ScheduleSection = ScheduleSection()
    model: ModelSection = ModelSection()
    pretrain: PretrainSection = PretrainSection()
    inversion: InversionSection = InversionSection()
    sample: SampleSection = SampleSection()
    eval: EvalSection = EvalSection()


def load_config(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config(data, str(path))


def parse_config(data, source: str = "<config>") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: top level must be a mapping")
    if "version" not in data:
        raise ConfigurationError(f"{source}: missing 'version' field")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"{source}: {exc}") from None


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True))
