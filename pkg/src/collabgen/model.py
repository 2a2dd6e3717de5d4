"""One agent's full perception stack and its batched collaborative forward pass."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .diffusion import DiffusionSchedule, FeatureGenerator
from .dme import DeformableMessageExtractor, PlainMessageExtractor
from .enhancer import ChannelEnhancer
from .fusion import AnchorGrid, AttentionFusion, DetectionHead
from .zoo import AgentSpec, Encoder


@dataclass(frozen=True)
class Variant:
    """Component toggles used by the ablation grid."""

    use_dme: bool = True
    use_ce: bool = True

    @property
    def tag(self) -> str:
        return f"{'dme' if self.use_dme else 'plain'}-{'ce' if self.use_ce else 'noce'}"


@dataclass(frozen=True)
class ModelHyper:
    message_channels: int = 2
    kernel_size: int = 3
    denoiser_base: int = 16
    head_neck_layers: int = 3
    anchor_size: tuple[float, float] = (10.0, 5.0)
    per_location_modulation: bool = False
    enhancer_norm: str = "linear"
    rescale_attention: bool = False


def make_extractor(in_channels: int, hyper: ModelHyper, use_dme: bool = True) -> nn.Module:
    if use_dme:
        return DeformableMessageExtractor(in_channels, hyper.message_channels, hyper.kernel_size,
                                          hyper.per_location_modulation)
    return PlainMessageExtractor(in_channels, hyper.message_channels)


def pack_by_owner(items: torch.Tensor, owner: torch.Tensor, batch: int):
    """Scatter (M, ...) items into a padded (N, B, ...) stack plus an (N, B) mask."""
    counts = [0] * batch
    slot = []
    for o in owner.tolist():
        slot.append(counts[o])
        counts[o] += 1
    n = max(counts) if counts else 0
    stacked = items.new_zeros((n, batch, *items.shape[1:]))
    mask = torch.zeros((n, batch), dtype=torch.bool)
    if len(slot):
        idx = (torch.tensor(slot), owner)
        stacked = stacked.index_put(idx, items)
        mask[idx] = True
    return stacked, mask


class AgentModel(nn.Module):
    """Encoder, self-pair extractor, generator, enhancer, fusion and head for one
    semantic space."""

    def __init__(self, spec: AgentSpec, extent, schedule: DiffusionSchedule | None = None,
                 hyper: ModelHyper | None = None, variant: Variant | None = None):
        super().__init__()
        self.spec = spec
        self.extent = tuple(extent)
        self.schedule = schedule or DiffusionSchedule()
        self.hyper = hyper or ModelHyper()
        self.variant = variant or Variant()
        C = spec.feature_channels
        self.encoder = Encoder(spec)
        self.extractor = make_extractor(C, self.hyper, self.variant.use_dme)
        self.generator = FeatureGenerator(C, self.hyper.message_channels, self.schedule, self.hyper.denoiser_base)
        self.enhancer = ChannelEnhancer(C, norm=self.hyper.enhancer_norm,
                                        rescale_attention=self.hyper.rescale_attention) if self.variant.use_ce else None
        self.fusion = AttentionFusion(C)
        self.anchors = AnchorGrid(self.extent, spec.feature_hw, self.hyper.anchor_size)
        self.head = DetectionHead(C, self.anchors.per_cell, self.hyper.head_neck_layers)

    @property
    def feature_hw(self):
        return tuple(self.spec.feature_hw)

    def encode(self, obs: torch.Tensor) -> torch.Tensor:
        if obs.dim() == 3:
            obs = obs.unsqueeze(1)
        return self.encoder(obs)

    def message(self, feat: torch.Tensor, target_hw=None, extractor: nn.Module | None = None) -> torch.Tensor:
        ext = extractor if extractor is not None else self.extractor
        return ext(feat, target_hw or self.feature_hw)

    def refine(self, generated: torch.Tensor) -> torch.Tensor:
        return self.enhancer(generated) if self.enhancer is not None else generated

    def collaborate(self, f_ego: torch.Tensor, messages: torch.Tensor, owner: torch.Tensor,
                    noise: torch.Tensor):
        """Generate, refine and fuse. Returns (head outputs, generated features)."""
        gen = self.generator(f_ego, messages, owner, noise)
        if gen.shape[0] == 0:
            z = f_ego
        else:
            stacked, mask = pack_by_owner(self.refine(gen), owner, f_ego.shape[0])
            z = self.fusion(f_ego, stacked, mask)
        return self.head(z), gen

    def solo(self, f_ego: torch.Tensor):
        return self.head(self.fusion(f_ego))

    def component(self, name: str) -> nn.Module:
        return {"encoder": self.encoder, "extractor": self.extractor, "generator": self.generator,
                "enhancer": self.enhancer, "fusion": self.fusion, "head": self.head}[name]
