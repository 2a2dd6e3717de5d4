"""On-disk layout of one experiment and typed access to its artifacts."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch
from torch import nn

from .checkpoint import file_sha256, load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from .config import ExperimentConfig, config_hash
from .data import SceneCache
from .diffusion import DiffusionSchedule
from .errors import MissingArtifactError
from .model import AgentModel, ModelHyper, Variant, make_extractor
from .scene import read_dataset
from .zoo import AgentSpec

FULL = Variant(True, True)


def variant_suffix(variant: Variant) -> str:
    return "" if variant == FULL else f"__{variant.tag}"


def hyper_from_meta(d: dict) -> ModelHyper:
    d = dict(d)
    d["anchor_size"] = tuple(d["anchor_size"])
    return ModelHyper(**d)


def save_stage1(path, model: AgentModel, extra: dict | None = None) -> str:
    s = model.schedule
    meta = {
        "kind": "stage1",
        "spec": model.spec.to_dict(),
        "variant": {"use_dme": model.variant.use_dme, "use_ce": model.variant.use_ce},
        "hyper": asdict(model.hyper),
        "schedule": {"T": s.T, "beta_start": s.beta_start, "beta_end": s.beta_end},
        "extent": list(model.extent),
        **(extra or {}),
    }
    return save_checkpoint(path, module_arrays(model, "model."), meta)


def load_stage1(path) -> AgentModel:
    arrays, meta = load_checkpoint(path, "train-stage1")
    if meta.get("kind") != "stage1":
        raise ValueError(f"{path} is not a stage-1 checkpoint")
    model = AgentModel(AgentSpec.from_dict(meta["spec"]), tuple(meta["extent"]),
                       DiffusionSchedule(**meta["schedule"]), hyper_from_meta(meta["hyper"]),
                       Variant(**meta["variant"]))
    load_module_arrays(model, arrays, "model.")
    model.eval()
    return model


def save_pair(path, extractor: nn.Module, meta: dict) -> str:
    return save_checkpoint(path, module_arrays(extractor, "extractor."), {"kind": "pair", **meta})


def load_pair(path) -> tuple[nn.Module, dict]:
    arrays, meta = load_checkpoint(path, "align-stage2")
    if meta.get("kind") != "pair":
        raise ValueError(f"{path} is not a pair checkpoint")
    ext = make_extractor(meta["in_channels"], hyper_from_meta(meta["hyper"]), meta["use_dme"])
    load_module_arrays(ext, arrays, "extractor.")
    ext.eval()
    return ext, meta


class Workspace:
    def __init__(self, cfg: ExperimentConfig, root=None):
        self.cfg = cfg
        self.root = Path(root if root is not None else cfg.output_dir)
        self._caches: dict[str, SceneCache] = {}
        self._models: dict[tuple, AgentModel] = {}

    # paths
    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    def stage1_path(self, agent_id: int, variant: Variant = FULL) -> Path:
        name = self.cfg.agent(agent_id).name
        return self.root / "ckpt" / "stage1" / f"{agent_id}_{name}{variant_suffix(variant)}.ckpt"

    def pair_path(self, sender: int, receiver: int, variant: Variant = FULL) -> Path:
        return self.root / "ckpt" / "pair" / f"{sender}_to_{receiver}{variant_suffix(variant)}.ckpt"

    def adapter_path(self, sender: int, receiver: int) -> Path:
        return self.root / "ckpt" / "adapter" / f"{sender}_to_{receiver}.ckpt"

    def log_path(self, name: str) -> Path:
        return self.root / "logs" / f"{name}.jsonl"

    def report_path(self, name: str) -> Path:
        return self.root / "reports" / name

    @property
    def config_hash(self) -> str:
        return config_hash(self.cfg)

    # artifacts
    def cache(self, split: str) -> SceneCache:
        if split not in self._caches:
            if not (self.data_dir / "manifest.json").exists():
                raise MissingArtifactError(self.data_dir / "manifest.json", "gen-data")
            scenes = read_dataset(self.data_dir, [split])[split]
            self._caches[split] = SceneCache(scenes, seed=self.cfg.seed)
        return self._caches[split]

    def model(self, agent_id: int, variant: Variant = FULL) -> AgentModel:
        key = (agent_id, variant)
        if key not in self._models:
            self._models[key] = load_stage1(self.stage1_path(agent_id, variant))
        return self._models[key]

    def pair(self, sender: int, receiver: int, variant: Variant = FULL) -> nn.Module:
        return load_pair(self.pair_path(sender, receiver, variant))[0]

    def slot(self, agent_id: int) -> int:
        return self.cfg.agent(agent_id).slot

    def sha(self, path) -> str:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(path, "train-stage1")
        return file_sha256(path)

    def drop_models(self):
        self._models.clear()
