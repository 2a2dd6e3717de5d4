"""Trained-parameter and FLOP accounting.

Counting rules: one multiply-accumulate is 2 FLOPs; only convolutions (including
the deformable kernel), linear layers and the fusion attention products are
counted; biases, activations, normalisation, interpolation and bilinear
sampling are free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .dme import DeformConv
from .fusion import AttentionFusion


@dataclass
class ParameterPartition:
    """Trainable modules and frozen modules, keyed by a readable tag."""

    trainable: dict[str, nn.Module] = field(default_factory=dict)
    frozen: dict[str, nn.Module] = field(default_factory=dict)

    def __post_init__(self):
        t = {id(p) for m in self.trainable.values() for p in m.parameters()}
        f = {id(p) for m in self.frozen.values() for p in m.parameters()}
        if t & f:
            raise ValueError("a parameter cannot be both trainable and frozen")

    def trainable_count(self) -> int:
        seen, n = set(), 0
        for m in self.trainable.values():
            for p in m.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    n += p.numel()
        return n

    def tags(self) -> dict[str, str]:
        out = {}
        for tag, m in self.trainable.items():
            for name, _ in m.named_parameters():
                out[f"{tag}.{name}"] = "trainable"
        for tag, m in self.frozen.items():
            for name, _ in m.named_parameters():
                out[f"{tag}.{name}"] = "frozen"
        return out


@dataclass(frozen=True)
class CostReport:
    params: int
    flops: int

    @property
    def params_M(self) -> float:
        return self.params / 1e6

    @property
    def flops_G(self) -> float:
        return self.flops / 1e9

    def to_dict(self) -> dict:
        return {"params": self.params, "flops": self.flops, "params_M": self.params_M, "flops_G": self.flops_G}


def conv_flops(module: nn.Conv2d, out: torch.Tensor) -> int:
    k = module.kernel_size[0] * module.kernel_size[1]
    return 2 * (module.in_channels // module.groups) * k * out.numel()


def _module_flops(module: nn.Module, inputs, out) -> int:
    if isinstance(module, nn.Conv2d):
        return conv_flops(module, out)
    if isinstance(module, nn.Linear):
        return 2 * module.in_features * out.numel()
    if isinstance(module, DeformConv):
        cout, cin, k, _ = module.weight.shape
        return 2 * cin * k * k * out.numel()
    if isinstance(module, AttentionFusion):
        others = inputs[1] if len(inputs) > 1 else None
        if others is None or len(others) == 0:
            return 0
        ego = inputs[0]
        n_agents = 1 + len(others)
        B, C, H, W = ego.shape
        # query-key products plus the weighted sum over agents
        return 2 * n_agents * B * H * W * (module.key_dim + C)
    return 0


def count_cost(partition: ParameterPartition, probe) -> CostReport:
    """Run ``probe()`` once and add up the FLOPs spent inside trainable modules."""
    if not partition.trainable:
        return CostReport(0, 0)
    total = [0]
    handles = []
    seen = set()

    def hook(module, inputs, out):
        if isinstance(out, tuple):
            out = out[0]
        total[0] += _module_flops(module, inputs, out)

    for m in partition.trainable.values():
        for sub in m.modules():
            if id(sub) in seen:
                continue
            seen.add(id(sub))
            if isinstance(sub, (nn.Conv2d, nn.Linear, DeformConv, AttentionFusion)):
                handles.append(sub.register_forward_hook(hook))
    try:
        with torch.no_grad():
            probe()
    finally:
        for h in handles:
            h.remove()
    return CostReport(partition.trainable_count(), total[0])
