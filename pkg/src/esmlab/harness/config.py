"""Run configuration: strict JSON schema, validated before any compute."""
from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..distill import DistillConfig

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "ESMLAB_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Bad or inconsistent configuration; maps to exit code 1."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ScheduleSpec(_Strict):
    T: int = Field(1000, ge=2)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(2e-2, gt=0, lt=1)
    kind: Literal["linear"] = "linear"

    @model_validator(mode="after")
    def _ordered(self):
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        return self


class DatasetSpec(_Strict):
    kind: Literal["shapes", "gaussian", "npz"] = "shapes"
    path: Optional[str] = None
    n_per_class: int = Field(256, ge=1)
    side: int = Field(32, ge=4)
    seed: int = 0
    n: int = Field(2048, ge=1, description="sample count for the gaussian kind")
    mean: float = 0.0
    var_d: float = Field(0.25, gt=0)

    @model_validator(mode="after")
    def _path_present(self):
        if self.kind == "npz":
            if not self.path:
                raise ValueError("dataset.kind='npz' needs dataset.path")
            if not Path(self.path).is_file():
                raise ValueError(f"dataset file not found: {self.path}")
        return self


class ModelSpec(_Strict):
    hidden: int = Field(256, ge=1)
    depth: int = Field(3, ge=1)
    temb_dim: int = Field(64, ge=2)
    cemb_dim: int = Field(32, ge=1)
    dtype: Literal["float32", "float64"] = "float32"

    @field_validator("temb_dim")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("temb_dim must be even")
        return v


class TrainSpec(_Strict):
    steps: int = Field(4000, ge=0)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(64, ge=1)
    cond_drop_prob: float = Field(0.1, ge=0, le=1)


class SceneSpec(_Strict):
    init: Literal["random", "data_fitted"] = "random"
    n_splats: int = Field(256, ge=1)


class DistillSpec(_Strict):
    loss: Literal["sds", "ism", "esm"] = "esm"
    rho: float = Field(0.93, gt=0, le=1)
    delta_S: int = Field(200, ge=1)
    delta_T: int = Field(50, ge=1)
    iterations: int = Field(5000, ge=0)
    omega_mode: Literal["constant", "one_minus_alpha_bar"] = "constant"
    omega_scale: float = Field(1.0, ge=0)
    guidance: float = 1.0
    t_min: int = Field(1, ge=1)
    t_max: int = Field(1000, ge=2)
    lr: float = Field(1e-2, gt=0)
    lr_centers: float = Field(0.1, gt=0)
    lora_lr: float = Field(1e-3, gt=0)
    lora_rank: int = Field(4, ge=1)
    lora_batch: int = Field(1, ge=1)
    target_label: int = Field(0, ge=0)
    pose_angle_range: float = Field(2 * math.pi, ge=0)
    pose_translation: float = Field(0.0, ge=0)
    pose_zoom_jitter: float = Field(0.0, ge=0)
    eval_every: int = Field(10, ge=1, description="iterations between MSE evaluations")
    final_window: int = Field(10, ge=1, description="evaluations averaged into final_mse")
    snapshot_every: int = Field(500, ge=1)

    @model_validator(mode="after")
    def _t_range(self):
        if self.t_min >= self.t_max:
            raise ValueError("t_min must be below t_max")
        return self

    def to_config(self, seed: int) -> DistillConfig:
        keys = DistillConfig.__dataclass_fields__.keys()
        return DistillConfig(**{k: v for k, v in self.model_dump().items() if k in keys}, seed=seed)


class RoundtripSpec(_Strict):
    delta_T: list[int] = Field(default_factory=lambda: [25, 50, 150, 200], min_length=1)
    n_states: int = Field(100, ge=1)
    rho: float = Field(0.93, gt=0, le=1)
    dtype: Literal["float32", "float64"] = "float32"

    @field_validator("delta_T")
    @classmethod
    def _positive(cls, v):
        if any(d < 1 for d in v):
            raise ValueError("delta_T values must be >= 1")
        return v


class SweepSpec(_Strict):
    parameter: Literal["rho", "delta_S", "delta_T"] = "rho"
    values: list[float] = Field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9], min_length=1)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _values_fit(self):
        if self.parameter == "rho":
            if any(not 0 < v <= 1 for v in self.values):
                raise ValueError("rho values must lie in (0, 1]")
        elif any(v != int(v) or v < 1 for v in self.values):
            raise ValueError(f"{self.parameter} values must be positive integers")
        return self

    def typed_values(self) -> list:
        return list(self.values) if self.parameter == "rho" else [int(v) for v in self.values]


class InitCompareSpec(_Strict):
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)


class RunConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = 0
    output_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    resume: Optional[str] = None
    schedule: ScheduleSpec = ScheduleSpec()
    dataset: DatasetSpec = DatasetSpec()
    model: ModelSpec = ModelSpec()
    train: TrainSpec = TrainSpec()
    scene: SceneSpec = SceneSpec()
    distill: DistillSpec = DistillSpec()
    roundtrip: RoundtripSpec = RoundtripSpec()
    sweep: SweepSpec = SweepSpec()
    init_compare: InitCompareSpec = InitCompareSpec()

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.distill.t_max > self.schedule.T:
            raise ValueError("distill.t_max exceeds schedule.T")
        if max(self.roundtrip.delta_T) >= self.schedule.T:
            raise ValueError("roundtrip.delta_T must stay below schedule.T")
        return self

    def replace(self, **updates: Any) -> "RunConfig":
        """Copy with dotted-path updates, re-validated."""
        return build_config(self.model_dump(), updates)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), indent=2, sort_keys=True) + "\n"


def _set_path(data: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        child = node.get(k)
        if child is None:
            child = node[k] = {}
        if not isinstance(child, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
        node = child
    node[keys[-1]] = value


def _format_error(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def build_config(data: dict | None = None, updates: dict[str, Any] | None = None) -> RunConfig:
    data = json.loads(json.dumps(data or {}))  # deep copy; never touch the caller's dict
    for path, value in (updates or {}).items():
        _set_path(data, path, value)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None


def load_config(path: str | os.PathLike | None, updates: dict[str, Any] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{p}: invalid JSON ({err})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be an object")
    return build_config(data, updates)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve_output(cfg: RunConfig, default_name: str) -> Path:
    if cfg.output_dir is None:
        return output_root() / default_name
    p = Path(cfg.output_dir)
    return p if p.is_absolute() else output_root() / p
