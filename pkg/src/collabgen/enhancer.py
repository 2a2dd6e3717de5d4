"""Channel refinement of generated features before fusion.

Partial conv on the modifiable split, depthwise-separable conv, gating against
the static split, then softmax channel attention from globally pooled context.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


def split_channels(feature: torch.Tensor, split_point: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Split along the channel axis (dim -3) into (modifiable, static)."""
    C = feature.shape[-3]
    if not 0 < split_point < C:
        raise ValueError(f"split point {split_point} must lie strictly inside (0, {C})")
    return feature[..., :split_point, :, :], feature[..., split_point:, :, :]


class ChannelEnhancer(nn.Module):
    def __init__(self, channels: int, split: int | None = None, hidden: int | None = None,
                 norm: str = "linear", rescale_attention: bool = False):
        super().__init__()
        if norm not in ("linear", "layernorm"):
            raise ValueError("norm must be 'linear' or 'layernorm'")
        self.channels = channels
        self.split = channels // 2 if split is None else split
        if not 0 < self.split < channels:
            raise ValueError(f"split {self.split} invalid for {channels} channels")
        c_conv, c_res = self.split, channels - self.split
        hidden = hidden or max(channels // 2, 1)
        self.norm_kind = norm
        self.rescale_attention = rescale_attention
        self.pconv = nn.Conv2d(c_conv, c_conv, 3, padding=1)
        self.dwconv = nn.Conv2d(c_conv, c_conv, 3, padding=1, groups=c_conv)
        self.pwconv = nn.Conv2d(c_conv, c_res, 1)
        # maps the gated static split back to the full channel count
        self.gate_norm = nn.Conv2d(c_res, channels, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.att_norm = nn.Linear(hidden, hidden) if norm == "linear" else nn.LayerNorm(hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.ln = nn.GroupNorm(1, channels) if norm == "layernorm" else None

    def gated(self, x: torch.Tensor) -> torch.Tensor:
        """F' before attention."""
        if x.shape[1] != self.channels:
            raise ValueError(f"enhancer expects {self.channels} channels, got {x.shape[1]}")
        f_conv, f_res = split_channels(x, self.split)
        g = self.pwconv(self.dwconv(self.pconv(f_conv))) * f_res
        g = self.gate_norm(g)
        if self.ln is not None:
            g = self.ln(g)
        return F.gelu(g)

    def attention(self, f_prime: torch.Tensor) -> torch.Tensor:
        """Channel weights (B, C), a softmax over channels."""
        ctx = f_prime.mean(dim=(2, 3))
        a = torch.softmax(self.fc2(F.gelu(self.att_norm(self.fc1(ctx)))), dim=1)
        return a

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f_prime = self.gated(x)
        a = self.attention(f_prime)
        if self.rescale_attention:
            a = a * self.channels
        return f_prime * a[:, :, None, None]


def enhance(feature, params: ChannelEnhancer) -> torch.Tensor:
    data = getattr(feature, "data", feature)
    return params(data.unsqueeze(0))[0]
