from __future__ import annotations

import hashlib
import json
import os
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError

SEED_ENV_VAR = "CLNET_SEED"


class ViewId(str, Enum):
    GROUND = "ground"
    SATELLITE = "satellite"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EncoderConfig(_Section):
    stage_channels: List[int] = Field(default_factory=lambda: [16, 32, 64, 128])
    stage_strides: List[int] = Field(default_factory=lambda: [2, 2, 2, 2])
    ground_input_hw: Tuple[int, int] = (32, 128)
    satellite_input_hw: Tuple[int, int] = (64, 64)
    embedding_dim: Optional[int] = None
    weight_sharing: Literal["shared", "separate"] = "separate"

    @model_validator(mode="after")
    def _check_stages(self) -> "EncoderConfig":
        if len(self.stage_channels) != 4 or len(self.stage_strides) != 4:
            raise ValueError("encoder needs exactly 4 stage_channels and 4 stage_strides")
        if any(s < 1 for s in self.stage_strides):
            raise ValueError(f"every stage stride must be >= 1, got {self.stage_strides}")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError(f"stage_channels must be strictly increasing, got {self.stage_channels}")
        for view, hw in (("ground", self.ground_input_hw), ("satellite", self.satellite_input_hw)):
            factor = 1
            for stage, stride in enumerate(self.stage_strides, start=1):
                factor *= stride
                if hw[0] % factor or hw[1] % factor:
                    raise ValueError(
                        f"{view} input {hw[0]}x{hw[1]} not divisible by stride product {factor} at stage {stage}"
                    )
        if self.embedding_dim is None:
            self.embedding_dim = self.stage_channels[-1]
        elif self.embedding_dim != self.stage_channels[-1]:
            raise ValueError(
                f"embedding_dim {self.embedding_dim} must equal stage_channels[3]={self.stage_channels[-1]}"
            )
        return self

    def input_hw(self, view: ViewId) -> Tuple[int, int]:
        return self.ground_input_hw if ViewId(view) is ViewId.GROUND else self.satellite_input_hw

    def stage_hw(self, view: ViewId, stage: int) -> Tuple[int, int]:
        """Spatial size of the stage output (stage 0 is the image itself)."""
        h, w = self.input_hw(view)
        for stride in self.stage_strides[:stage]:
            h, w = h // stride, w // stride
        return h, w

    def stage_shape(self, view: ViewId, stage: int) -> Tuple[int, int, int]:
        h, w = self.stage_hw(view, stage)
        return self.stage_channels[stage - 1], h, w


class AblationPreset(_Section):
    """One row of the component ablation table."""

    use_gfr: bool = True
    use_norm: bool = True
    gfr_residual_source: Optional[Literal["neural_map", "feature_map"]] = "neural_map"
    use_nec: bool = True


PRESETS: Dict[str, AblationPreset] = {
    "1": AblationPreset(use_norm=False, gfr_residual_source=None, use_nec=False),
    "2": AblationPreset(use_norm=False, gfr_residual_source=None, use_nec=True),
    "3": AblationPreset(use_norm=False, gfr_residual_source="neural_map", use_nec=True),
    "4": AblationPreset(use_norm=False, gfr_residual_source="feature_map", use_nec=True),
    "5": AblationPreset(use_norm=True, gfr_residual_source="neural_map", use_nec=True),
    "6": AblationPreset(use_norm=True, gfr_residual_source="feature_map", use_nec=True),
}
PRESETS["full"] = PRESETS["5"]

PresetName = Literal["1", "2", "3", "4", "5", "6", "full"]


def get_preset(name: str) -> AblationPreset:
    key = str(name).lstrip("#")
    if key not in PRESETS:
        raise ConfigurationError(f"unknown ablation preset {name!r}; expected one of {sorted(PRESETS)}")
    return PRESETS[key]


class TrainConfig(_Section):
    epochs: int = Field(40, ge=1)
    batch_size: int = Field(32, ge=2)
    base_lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-2, ge=0)
    # None means 5% of the total step count
    warmup_steps: Optional[int] = Field(None, ge=0)
    tau: float = Field(0.07, gt=0)
    learnable_tau: bool = False
    direction: Literal["g2s", "s2g", "symmetric"] = "symmetric"
    ablation_preset: PresetName = "full"
    seed: int = 0
    augment: bool = True
    num_threads: Optional[int] = Field(None, ge=1)
    num_workers: int = Field(0, ge=0)
    eval_after: bool = False

    @field_validator("ablation_preset", mode="before")
    @classmethod
    def _strip_hash(cls, value):
        return str(value).lstrip("#")

    @property
    def preset(self) -> AblationPreset:
        return PRESETS[self.ablation_preset]

    def resolve_warmup(self, total_steps: int) -> int:
        warmup = self.warmup_steps if self.warmup_steps is not None else int(0.05 * total_steps)
        if warmup >= total_steps:
            raise ConfigurationError(f"warmup_steps={warmup} must be < total steps {total_steps}")
        return warmup


class DataConfig(_Section):
    # A directory dataset (manifest.csv) when set, otherwise synthetic scenes.
    root: Optional[str] = None
    manifest: str = "manifest.csv"
    eval_root: Optional[str] = None
    seed: int = 0
    num_train: int = Field(512, ge=1)
    num_eval: int = Field(128, ge=1)
    mode: Literal["center_aligned", "offset"] = "center_aligned"
    noise: float = Field(0.02, ge=0)
    extent: float = Field(100.0, gt=0)


class EvalConfig(_Section):
    batch_size: int = Field(64, ge=1)
    hit_rate: bool = False
    average_precision: bool = True


class VizConfig(_Section):
    scale: int = Field(8, ge=1)
    colormap: str = "viridis"
    kernel_sizes: List[int] = Field(default_factory=lambda: [5, 4, 3, 1])

    @field_validator("kernel_sizes")
    @classmethod
    def _four_levels(cls, value: List[int]) -> List[int]:
        if len(value) != 4 or any(k < 1 for k in value):
            raise ValueError("kernel_sizes needs 4 positive entries (levels 1-4)")
        return value


class RunConfig(_Section):
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    viz: VizConfig = Field(default_factory=VizConfig)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def build_config(raw: Optional[dict] = None) -> RunConfig:
    try:
        return RunConfig(**(raw or {}))
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigurationError(f"invalid config at {where or '<root>'}: {first['msg']}") from exc


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, dict]] = None) -> RunConfig:
    """
    Read a YAML/JSON run config, then apply CLNET_SEED and per-section overrides.
    """
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            with path.open("r", encoding="utf-8") as f:
                raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" at line {mark.line + 1}" if mark is not None else ""
            raise ConfigurationError(f"config file {path} is not valid YAML{where}") from exc
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config file {path} must contain a mapping")

    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigurationError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from exc
        raw.setdefault("train", {})["seed"] = seed

    for section, values in (overrides or {}).items():
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            raw.setdefault(section, {}).update(values)
    return build_config(raw)


def write_config(path: Path, cfg: RunConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
