"""Two-stage training: homogeneous end-to-end pre-training, then extractor-only
alignment for a new heterogeneous pair."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import SceneCache
from .diffusion import DiffusionSchedule
from .dme import Resizer
from .errors import ConfigError, FrozenParameterError, NumericalError
from .losses import LossWeights, focal_cls_loss, smooth_l1_reg_loss
from .model import AgentModel, ModelHyper, Variant
from .zoo import AgentSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 2e-3
    milestones: tuple[int, ...] = (10, 15)
    gamma: float = 0.1
    batch_size: int = 8
    seed: int = 0
    solo_prob: float = 0.25
    collab_slots: tuple[int, ...] = (1, 2, 3)
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 are required")
        if any(m >= self.epochs for m in self.milestones) and self.epochs > 0:
            raise ConfigError(f"milestones {self.milestones} must be < epochs {self.epochs}")
        if not 0.0 <= self.solo_prob <= 1.0:
            raise ConfigError("solo_prob must lie in [0, 1]")


def param_checksums(modules: dict[str, nn.Module]) -> dict[str, str]:
    """SHA-256 of every parameter array, keyed ``module.param``."""
    out = {}
    for prefix, mod in modules.items():
        if mod is None:
            continue
        for name, p in mod.state_dict().items():
            data = p.detach().cpu().contiguous().numpy()
            out[f"{prefix}.{name}"] = hashlib.sha256(data.tobytes()).hexdigest()
    return out


def seed_for(*parts) -> int:
    return zlib.crc32(json.dumps(parts, sort_keys=True, default=str).encode()) % 2**31


def _check_finite(loss: torch.Tensor, parts: dict, where: str):
    if not torch.isfinite(loss):
        diag = ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items())
        raise NumericalError(f"non-finite loss during {where}: {diag}")


class MetricLog:
    """Line-delimited metric records, optionally mirrored to a file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, rec: dict):
        self.records.append(rec)
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def _epoch_batches(n: int, cfg: TrainConfig, epoch: int, salt: int):
    rng = np.random.default_rng([cfg.seed, salt, epoch])
    order = rng.permutation(n)
    slots = rng.choice(np.array(cfg.collab_slots), size=n)
    solo = rng.random(n) < cfg.solo_prob
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        yield idx, slots[idx], solo[idx]


def detection_losses(cls, reg, labels, targets, cfg: TrainConfig):
    l_cls = focal_cls_loss(cls, labels, cfg.focal_alpha, cfg.focal_gamma)
    l_reg = smooth_l1_reg_loss(reg, targets, labels > 0)
    return l_cls, l_reg


def _noise(shape, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(shape, generator=gen)


def build_model(spec: AgentSpec, extent, schedule: DiffusionSchedule, hyper: ModelHyper,
                variant: Variant, seed: int) -> AgentModel:
    torch.manual_seed(seed_for("init", seed, spec.semantic_space_id, variant.tag))
    return AgentModel(spec, extent, schedule, hyper, variant)


# stage 1 --------------------------------------------------------------------


def stage1_step(model: AgentModel, cache: SceneCache, idx, slots, solo, cfg: TrainConfig,
                weights: LossWeights, gen: torch.Generator):
    spec = model.spec
    B = len(idx)
    ego_obs = cache.obs(spec, 0)[idx]
    collab = [k for k in range(B) if not solo[k]]
    c_obs = [cache.obs(spec, int(slots[k]))[idx[k]] for k in collab]
    obs = torch.cat([ego_obs, torch.stack(c_obs)]) if c_obs else ego_obs
    feats = model.encode(obs)
    f_ego, f_col = feats[:B], feats[B:]
    rosters = [[(spec, 0)] + ([] if solo[k] else [(spec, int(slots[k]))]) for k in range(B)]
    labels, targets = cache.targets(idx, rosters, model.anchors)
    owner = torch.tensor(collab, dtype=torch.long)
    msgs = model.message(f_col) if len(collab) else f_ego.new_zeros((0, model.hyper.message_channels,
                                                                         *model.feature_hw))
    (cls, reg), generated = model.collaborate(f_ego, msgs, owner, _noise(f_ego.shape, gen))
    l_cls, l_reg = detection_losses(cls, reg, labels, targets, cfg)
    if len(collab):
        per_pair = ((generated - f_col.detach()) ** 2).mean(dim=(1, 2, 3))
        l_gen = per_pair.sum() / len(collab)
    else:
        l_gen = f_ego.sum() * 0.0
    return l_cls, l_reg, l_gen


def train_stage1(spec: AgentSpec, cache: SceneCache, cfg: TrainConfig, weights: LossWeights | None = None,
                 hyper: ModelHyper | None = None, variant: Variant | None = None,
                 schedule: DiffusionSchedule | None = None, log_path=None,
                 model: AgentModel | None = None) -> tuple[AgentModel, list[dict]]:
    """Homogeneous self-collaboration training of every component of one semantic space."""
    weights = weights or LossWeights()
    hyper = hyper or ModelHyper()
    variant = variant or Variant()
    schedule = schedule or DiffusionSchedule()
    if model is None:
        model = build_model(spec, cache.scenes[0].extent, schedule, hyper, variant, cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(cfg.milestones), cfg.gamma)
    gen = torch.Generator().manual_seed(seed_for("stage1-noise", cfg.seed, spec.semantic_space_id, variant.tag))
    salt = seed_for("stage1", spec.semantic_space_id, variant.tag)
    metrics = MetricLog(log_path)
    model.train()
    for epoch in range(cfg.epochs):
        sums = np.zeros(4)
        n = 0
        lr = opt.param_groups[0]["lr"]
        for idx, slots, solo in _epoch_batches(len(cache), cfg, epoch, salt):
            l_cls, l_reg, l_gen = stage1_step(model, cache, idx, slots, solo, cfg, weights, gen)
            loss = weights.total(l_cls, l_reg, l_gen, stage=1)
            _check_finite(loss, {"l_cls": l_cls, "l_reg": l_reg, "l_gen": l_gen}, f"stage-1 epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += [l_cls.item(), l_reg.item(), l_gen.item(), loss.item()]
            n += 1
        sched.step()
        m = sums / max(n, 1)
        metrics.append({"epoch": epoch, "l_cls": m[0], "l_reg": m[1], "l_gen": m[2], "loss": m[3], "lr": lr})
        log.info("stage1 %s epoch %d loss %.4f", spec.name, epoch, m[3])
    model.eval()
    return model, metrics.records


# stage 2 --------------------------------------------------------------------


def freeze(module: nn.Module):
    for p in module.parameters():
        p.requires_grad_(False)


class FrozenFeatures:
    """Encoder outputs of frozen agents, computed once per (agent, slot)."""

    def __init__(self, cache: SceneCache, frame: int = 0):
        self.cache = cache
        self.frame = frame
        self._feats: dict[tuple[int, int], torch.Tensor] = {}

    def get(self, model: AgentModel, slot: int) -> torch.Tensor:
        key = (id(model), slot)
        if key not in self._feats:
            with torch.no_grad():
                self._feats[key] = model.encode(self.cache.obs(model.spec, slot, self.frame))
        return self._feats[key]

    def batch(self, model: AgentModel, idx, slots) -> torch.Tensor:
        return torch.stack([self.get(model, int(s))[i] for i, s in zip(idx, slots)])


def pair_forward(ego: AgentModel, collab: AgentModel, extractor: nn.Module, feats: FrozenFeatures,
                 idx, slots, noise: torch.Tensor):
    f_ego = feats.get(ego, 0)[idx]
    f_col = feats.batch(collab, idx, slots)
    msgs = extractor(f_col, ego.feature_hw)
    owner = torch.arange(len(idx))
    (cls, reg), _ = ego.collaborate(f_ego, msgs, owner, noise)
    return cls, reg


def align_stage2(ego: AgentModel, collab: AgentModel, cache: SceneCache, cfg: TrainConfig,
                 weights: LossWeights | None = None, log_path=None) -> tuple[nn.Module, list[dict], dict]:
    """Fine-tune a copy of the collaborator's extractor against the frozen ego stack.

    Returns (pair extractor, metric records, frozen checksums). Gradients pass
    through the frozen generator and head; only the pair extractor is updated.
    """
    weights = weights or LossWeights()
    extractor = copy.deepcopy(collab.extractor)
    for p in extractor.parameters():
        p.requires_grad_(True)
    frozen_modules = {"ego": ego, "collab_encoder": collab.encoder}
    for m in frozen_modules.values():
        freeze(m)
    before = param_checksums(frozen_modules)
    metrics = MetricLog(log_path)
    if cfg.epochs > 0:
        opt = torch.optim.Adam(extractor.parameters(), lr=cfg.lr)
        sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(cfg.milestones), cfg.gamma)
        gen = torch.Generator().manual_seed(seed_for("stage2-noise", cfg.seed, ego.spec.agent_id,
                                                     collab.spec.agent_id))
        salt = seed_for("stage2", ego.spec.agent_id, collab.spec.agent_id)
        stage_cfg = TrainConfig(**{**asdict(cfg), "solo_prob": 0.0})
        ego.eval()
        collab.eval()
        feats = FrozenFeatures(cache)
        for epoch in range(cfg.epochs):
            sums = np.zeros(3)
            n = 0
            lr = opt.param_groups[0]["lr"]
            for idx, slots, _ in _epoch_batches(len(cache), stage_cfg, epoch, salt):
                noise = _noise((len(idx), ego.spec.feature_channels, *ego.feature_hw), gen)
                cls, reg = pair_forward(ego, collab, extractor, feats, idx, slots, noise)
                rosters = [[(ego.spec, 0), (collab.spec, int(s))] for s in slots]
                labels, targets = cache.targets(idx, rosters, ego.anchors)
                l_cls, l_reg = detection_losses(cls, reg, labels, targets, cfg)
                loss = weights.total(l_cls, l_reg, stage=2)
                _check_finite(loss, {"l_cls": l_cls, "l_reg": l_reg}, f"stage-2 epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                sums += [l_cls.item(), l_reg.item(), loss.item()]
                n += 1
            sched.step()
            m = sums / max(n, 1)
            metrics.append({"epoch": epoch, "l_cls": m[0], "l_reg": m[1], "l_gen": 0.0, "loss": m[2], "lr": lr})
    after = param_checksums(frozen_modules)
    changed = sorted(k for k in before if before[k] != after[k])
    if changed:
        raise FrozenParameterError(f"frozen parameters changed during alignment: {changed[:5]}")
    extractor.eval()
    return extractor, metrics.records, before


# adapter baseline -----------------------------------------------------------


class FeatureAdapter(nn.Module):
    """Collaborator feature -> ego channels (1x1 conv) -> ego grid (resizer)."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, 1)
        self.resizer = Resizer(out_channels)

    def forward(self, x, target_hw):
        return self.resizer(self.proj(x), target_hw)


class AdapterBaseline(nn.Module):
    """One-stage adaptation: the adapter plus a retrained copy of the ego's fusion and head."""

    def __init__(self, ego: AgentModel, collab_spec: AgentSpec):
        super().__init__()
        self.adapter = FeatureAdapter(collab_spec.feature_channels, ego.spec.feature_channels)
        self.fusion = copy.deepcopy(ego.fusion)
        self.head = copy.deepcopy(ego.head)

    def trained_modules(self) -> dict[str, nn.Module]:
        return {"adapter": self.adapter, "fusion": self.fusion, "head": self.head}

    def forward(self, f_ego, f_col, target_hw):
        others = self.adapter(f_col, target_hw).unsqueeze(0)
        return self.head(self.fusion(f_ego, others))


def train_adapter(ego: AgentModel, collab: AgentModel, cache: SceneCache, cfg: TrainConfig,
                  weights: LossWeights | None = None, log_path=None) -> tuple[AdapterBaseline, list[dict]]:
    weights = weights or LossWeights()
    torch.manual_seed(seed_for("adapter", cfg.seed, ego.spec.agent_id, collab.spec.agent_id))
    base = AdapterBaseline(ego, collab.spec)
    freeze(ego)
    freeze(collab.encoder)
    opt = torch.optim.Adam(base.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(cfg.milestones), cfg.gamma)
    salt = seed_for("adapter", ego.spec.agent_id, collab.spec.agent_id)
    stage_cfg = TrainConfig(**{**asdict(cfg), "solo_prob": 0.0})
    metrics = MetricLog(log_path)
    feats = FrozenFeatures(cache)
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        n = 0
        lr = opt.param_groups[0]["lr"]
        for idx, slots, _ in _epoch_batches(len(cache), stage_cfg, epoch, salt):
            f_ego = feats.get(ego, 0)[idx]
            f_col = feats.batch(collab, idx, slots)
            cls, reg = base(f_ego, f_col, ego.feature_hw)
            rosters = [[(ego.spec, 0), (collab.spec, int(s))] for s in slots]
            labels, targets = cache.targets(idx, rosters, ego.anchors)
            l_cls, l_reg = detection_losses(cls, reg, labels, targets, cfg)
            loss = weights.total(l_cls, l_reg, stage=2)
            _check_finite(loss, {"l_cls": l_cls, "l_reg": l_reg}, f"adapter epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += [l_cls.item(), l_reg.item(), loss.item()]
            n += 1
        sched.step()
        m = sums / max(n, 1)
        metrics.append({"epoch": epoch, "l_cls": m[0], "l_reg": m[1], "l_gen": 0.0, "loss": m[2], "lr": lr})
    base.eval()
    return base, metrics.records
