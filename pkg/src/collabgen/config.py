"""Experiment configuration: schema, loading, canonical form and hashing."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .diffusion import DiffusionSchedule
from .errors import ConfigError
from .losses import LossWeights
from .model import ModelHyper, Variant
from .scene import DEFAULT_SLOT_ZONES, SceneConfig
from .training import TrainConfig
from .zoo import DEPTH_BLOCKS, AgentSpec

SCHEMA_VERSION = 1
ENV_OUTPUT = "COLLABGEN_OUTPUT_DIR"
ENV_SEED = "COLLABGEN_SEED"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WorldConfig(_Strict):
    extent: tuple[float, float] = (204.8, 102.4)
    n_objects: tuple[int, int] = (8, 14)
    occlusion: bool = True
    n_occluders: tuple[int, int] = (6, 10)
    occluder_size: tuple[float, float] = (8.0, 20.0)
    object_length: tuple[float, float] = (9.0, 11.0)
    object_width: tuple[float, float] = (4.5, 5.5)
    speed: tuple[float, float] = (0.0, 8.0)
    frame_dt: float = 0.5
    slot_zones: tuple[tuple[float, float, float, float], ...] = DEFAULT_SLOT_ZONES
    splits: dict[str, int] = Field(default_factory=lambda: {"train": 160, "val": 40, "test": 200})
    test_frames: int = 3
    eval_frame: int = 2

    @model_validator(mode="after")
    def _check(self):
        if self.eval_frame >= self.test_frames or self.eval_frame < 0:
            raise ValueError("eval_frame must index a test frame")
        if any(n < 0 for n in self.splits.values()):
            raise ValueError("split sizes must be nonnegative")
        return self

    def scene_config(self) -> SceneConfig:
        cfg = SceneConfig(extent=self.extent, n_objects=self.n_objects, occlusion=self.occlusion,
                          n_occluders=self.n_occluders, occluder_size=self.occluder_size,
                          object_length=self.object_length, object_width=self.object_width,
                          speed=self.speed, frame_dt=self.frame_dt, slot_zones=self.slot_zones)
        cfg.validate()
        return cfg


class AgentConfig(_Strict):
    agent_id: int
    name: str
    encoder_depth: Literal["identity", "shallow", "medium", "deep"]
    feature_channels: int
    feature_hw: tuple[int, int]
    obs_hw: tuple[int, int]
    fov_kind: Literal["wide", "square"]
    semantic_space_id: str
    noise_profile_id: str = "clean"
    max_range_m: float | None = None
    slot: int = 0

    def spec(self) -> AgentSpec:
        d = self.model_dump()
        d.pop("slot")
        try:
            return AgentSpec(**d)
        except ValueError as e:
            raise ConfigError(f"agents[{self.name}]: {e}") from None


class ModelConfig(_Strict):
    message_channels: int = Field(2, ge=1, le=255)
    kernel_size: int = 3
    denoiser_base: int = 16
    head_neck_layers: int = 3
    anchor_size: tuple[float, float] = (10.0, 5.0)
    per_location_modulation: bool = False
    enhancer_norm: Literal["linear", "layernorm"] = "linear"
    rescale_attention: bool = False

    @field_validator("kernel_size")
    @classmethod
    def _odd(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        return v

    def hyper(self, **override) -> ModelHyper:
        return ModelHyper(**{**self.model_dump(), **override})


class DiffusionConfig(_Strict):
    T: int = 3
    beta_start: float = 1e-4
    beta_end: float = 0.2

    @model_validator(mode="after")
    def _check(self):
        DiffusionSchedule(self.T, self.beta_start, self.beta_end)
        return self

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.T, self.beta_start, self.beta_end)


class LossConfig(_Strict):
    cls: float = 1.0
    reg: float = 2.0
    gen: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def weights(self) -> LossWeights:
        return LossWeights(self.cls, self.reg, self.gen)


class StageConfig(_Strict):
    epochs: int = 20
    lr: float = 2e-3
    milestones: tuple[int, ...] = (10, 15)
    gamma: float = 0.1
    batch_size: int = 8
    solo_prob: float = 0.25

    @model_validator(mode="after")
    def _check(self):
        if self.epochs > 0 and any(m >= self.epochs for m in self.milestones):
            raise ValueError("milestones must be < epochs")
        return self

    def train_config(self, seed: int, loss: LossConfig, n_slots: int = 4) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr, self.milestones, self.gamma, self.batch_size, seed,
                           self.solo_prob, tuple(range(1, n_slots)), loss.focal_alpha, loss.focal_gamma)


class NoiseLevels(_Strict):
    pose: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4)
    delay: tuple[int, ...] = (0, 1, 2)
    degrade: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8)


class AblationRow(_Strict):
    dme: bool
    ce: bool
    align: bool


DEFAULT_ROWS = (
    AblationRow(dme=False, ce=False, align=False),
    AblationRow(dme=False, ce=True, align=False),
    AblationRow(dme=True, ce=False, align=False),
    AblationRow(dme=True, ce=False, align=True),
    AblationRow(dme=True, ce=True, align=False),
    AblationRow(dme=True, ce=True, align=True),
)


class AblationConfig(_Strict):
    collaborator: int = 2
    rows: tuple[AblationRow, ...] = DEFAULT_ROWS


class EvalConfig(_Strict):
    iou_thresholds: tuple[float, ...] = (0.3, 0.5, 0.7)
    score_thresh: float = 0.1
    nms_iou: float = 0.15
    max_range_m: float = 70.0
    cprime_sweep: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    timing_repeats: int = 5


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = 1
    seed: int = 0
    output_dir: str = "runs/toy"
    world: WorldConfig = WorldConfig()
    agents: tuple[AgentConfig, ...]
    ego: int | None = None
    join_order: tuple[int, ...] | None = None
    model: ModelConfig = ModelConfig()
    diffusion: DiffusionConfig = DiffusionConfig()
    loss: LossConfig = LossConfig()
    stage1: StageConfig = StageConfig()
    stage2: StageConfig = StageConfig(epochs=30, lr=2e-3, milestones=(15, 22), solo_prob=0.0)
    adapter: StageConfig = StageConfig(epochs=30, lr=2e-3, milestones=(15, 22), solo_prob=0.0)
    noise: NoiseLevels = NoiseLevels()
    ablation: AblationConfig = AblationConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _check(self):
        ids = [a.agent_id for a in self.agents]
        if not ids:
            raise ValueError("at least one agent is required")
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        spaces = [a.semantic_space_id for a in self.agents]
        if len(set(spaces)) != len(spaces):
            raise ValueError("semantic spaces must be unique")
        slots = [a.slot for a in self.agents]
        if len(set(slots)) != len(slots) or any(not 0 <= s < len(self.world.slot_zones) for s in slots):
            raise ValueError("agent slots must be distinct indices into world.slot_zones")
        if self.ego is not None and self.ego not in ids:
            raise ValueError(f"ego {self.ego} is not a declared agent")
        if self.agent(self.ego_id).slot != 0:
            raise ValueError("the ego agent must occupy slot 0")
        if self.join_order is not None and sorted(self.join_order) != sorted(ids):
            raise ValueError("join_order must be a permutation of the agent ids")
        if self.ablation.collaborator not in ids and len(ids) > 1:
            raise ValueError("ablation collaborator must be a declared agent")
        for a in self.agents:
            a.spec()
        return self

    @property
    def ego_id(self) -> int:
        return self.ego if self.ego is not None else self.agents[0].agent_id

    @property
    def order(self) -> tuple[int, ...]:
        return self.join_order or tuple(a.agent_id for a in self.agents)

    def agent(self, agent_id: int) -> AgentConfig:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise ConfigError(f"agents: no agent with id {agent_id}")

    def specs(self) -> list[AgentSpec]:
        return [a.spec() for a in self.agents]


def _format_error(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict, apply_env: bool = True) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    if apply_env:
        if os.environ.get(ENV_OUTPUT):
            data["output_dir"] = os.environ[ENV_OUTPUT]
        if os.environ.get(ENV_SEED):
            try:
                data["seed"] = int(os.environ[ENV_SEED])
            except ValueError:
                raise ConfigError(f"{ENV_SEED} must be an integer") from None
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_error(e)) from None
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_config(path, apply_env: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML ({e})") from None
    return parse_config(data or {}, apply_env)


def canonical(cfg: ExperimentConfig) -> dict:
    return json.loads(cfg.model_dump_json())


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(canonical(cfg), sort_keys=True)


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything except the output location."""
    d = canonical(cfg)
    d.pop("output_dir", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def default_config_path() -> Path:
    return Path(__file__).parent / "configs" / "toy.yaml"
