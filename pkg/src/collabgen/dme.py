"""Deformable message extraction: offsets, deformable sampling, channel
compression and a learnable resizer to the receiver's grid."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .zoo import BEVFeature


@dataclass
class OffsetField:
    """Per-location tap displacements, (B, 2K, H, W); channel 2k is dx, 2k+1 is dy."""

    offsets: torch.Tensor
    k: int

    @property
    def taps(self) -> int:
        return self.k * self.k


@dataclass
class SpatialMessage:
    sender_id: int
    receiver_id: int
    data: torch.Tensor  # (C', H_rx, W_rx)

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def kernel_taps(k: int) -> torch.Tensor:
    """Regular sampling grid as (K, 2) rows of (dx, dy), row-major like a conv kernel."""
    r = (k - 1) // 2
    ys, xs = torch.meshgrid(torch.arange(-r, r + 1), torch.arange(-r, r + 1), indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1).to(torch.get_default_dtype())


def _gather_corners(x: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    B, C, H, W = x.shape
    flat = x.reshape(B, C, H * W)
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.long()
    y0 = y0.long()
    out = x.new_zeros(B, C, px.shape[1])
    for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        cx, cy = x0 + dx, y0 + dy
        valid = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
        idx = (cy.clamp(0, H - 1) * W + cx.clamp(0, W - 1))
        vals = flat.gather(2, idx.unsqueeze(1).expand(B, C, idx.shape[1]))
        out = out + vals * (wgt * valid.to(x.dtype)).unsqueeze(1)
    return out


def bilinear_gather(x: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` (B, C, H, W) at fractional pixel positions (B, P).

    Corners outside the grid contribute zero. Returns (B, C, P). Pixel centres sit
    at integer positions, which is grid_sample's align_corners=True convention.
    """
    B, C, H, W = x.shape
    if H < 2 or W < 2:
        return _gather_corners(x, px, py)
    grid = torch.stack([2 * px / (W - 1) - 1, 2 * py / (H - 1) - 1], dim=-1).unsqueeze(1)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=True)[:, :, 0]


def deformable_conv(x: torch.Tensor, offsets: torch.Tensor, weight: torch.Tensor,
                    bias: torch.Tensor | None = None, modulation: torch.Tensor | None = None) -> torch.Tensor:
    """out(p0) = sum_k m_k * W_k . x(p0 + p_k + dp_k(p0)), stride 1, same padding.

    ``weight`` is (C_out, C_in, k, k). ``modulation`` is either (K,) shared across
    locations or (B, K, H, W) per location.
    """
    B, C, H, W = x.shape
    cout, cin, k, _ = weight.shape
    K = k * k
    if cin != C:
        raise ValueError(f"kernel expects {cin} input channels, feature has {C}")
    if offsets.shape != (B, 2 * K, H, W):
        raise ValueError(f"offsets shape {tuple(offsets.shape)} != {(B, 2 * K, H, W)}")
    if not torch.isfinite(offsets).all():
        raise ValueError("offsets contain non-finite values")
    taps = kernel_taps(k).to(x.dtype)
    gy, gx = torch.meshgrid(torch.arange(H, dtype=x.dtype), torch.arange(W, dtype=x.dtype), indexing="ij")
    off = offsets.reshape(B, K, 2, H, W)
    px = gx + taps[:, 0].view(K, 1, 1) + off[:, :, 0]
    py = gy + taps[:, 1].view(K, 1, 1) + off[:, :, 1]
    sampled = bilinear_gather(x, px.reshape(B, -1), py.reshape(B, -1)).reshape(B, C, K, H * W)
    w = weight.reshape(cout, cin, K)
    if modulation is not None:
        if modulation.dim() == 1:
            w = w * modulation.view(1, 1, K)
        else:
            sampled = sampled * modulation.reshape(B, 1, K, H * W)
    out = torch.einsum("bckp,ock->bop", sampled, w).reshape(B, cout, H, W)
    if bias is not None:
        out = out + bias.view(1, cout, 1, 1)
    return out


class DeformConv(nn.Module):
    """Deformable kernel with learnable per-tap attention weights."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.kernel_size = kernel_size
        ref = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        self.weight = nn.Parameter(ref.weight.detach().clone())
        self.bias = nn.Parameter(ref.bias.detach().clone())
        self.modulation = nn.Parameter(torch.ones(kernel_size * kernel_size))

    def forward(self, x, offsets, location_modulation=None):
        k = self.kernel_size
        w = self.weight * self.modulation.view(1, 1, k, k)
        return deformable_conv(x, offsets, w, self.bias, location_modulation)


class Resizer(nn.Module):
    """Bilinear resampling to a target grid followed by an identity-initialised 1x1 conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(channels, channels, 1)
        with torch.no_grad():
            self.proj.weight.copy_(torch.eye(channels).view(channels, channels, 1, 1))
            self.proj.bias.zero_()

    def forward(self, x: torch.Tensor, target_hw) -> torch.Tensor:
        target_hw = tuple(int(v) for v in target_hw)
        if min(target_hw) <= 0:
            raise ValueError(f"target size must be positive, got {target_hw}")
        if tuple(x.shape[-2:]) != target_hw:
            x = F.interpolate(x, size=target_hw, mode="bilinear", align_corners=False)
        return self.proj(x)


class DeformableMessageExtractor(nn.Module):
    """Offset net -> deformable kernel with C' filters -> resizer."""

    def __init__(self, in_channels: int, message_channels: int = 2, kernel_size: int = 3,
                 per_location: bool = False):
        super().__init__()
        self.kernel_size = kernel_size
        self.per_location = per_location
        K = kernel_size * kernel_size
        self.offset_net = nn.Conv2d(in_channels, 2 * K + (K if per_location else 0), 3, padding=1)
        nn.init.zeros_(self.offset_net.weight)
        nn.init.zeros_(self.offset_net.bias)
        self.kernel = DeformConv(in_channels, message_channels, kernel_size)
        self.resizer = Resizer(message_channels)

    @property
    def in_channels(self) -> int:
        return self.offset_net.in_channels

    @property
    def message_channels(self) -> int:
        return self.kernel.weight.shape[0]

    def predict_offsets(self, x: torch.Tensor) -> OffsetField:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"extractor expects {self.in_channels} channels, got {x.shape[1]}")
        K = self.kernel_size**2
        return OffsetField(self.offset_net(x)[:, : 2 * K], self.kernel_size)

    def extract_raw(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"extractor expects {self.in_channels} channels, got {x.shape[1]}")
        K = self.kernel_size**2
        head = self.offset_net(x)
        if self.per_location:
            return self.kernel(x, head[:, : 2 * K], torch.sigmoid(head[:, 2 * K:]) * 2.0)
        return self.kernel(x, head)

    def forward(self, x: torch.Tensor, target_hw) -> torch.Tensor:
        return self.resizer(self.extract_raw(x), target_hw)


class PlainMessageExtractor(nn.Module):
    """Ablation stand-in: per-pixel 1x1 projection to C' channels plus resizer."""

    def __init__(self, in_channels: int, message_channels: int = 2):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, message_channels, 1)
        self.resizer = Resizer(message_channels)

    @property
    def in_channels(self) -> int:
        return self.proj.in_channels

    @property
    def message_channels(self) -> int:
        return self.proj.out_channels

    def extract_raw(self, x):
        return self.proj(x)

    def forward(self, x, target_hw):
        return self.resizer(self.proj(x), target_hw)


# functional surface ---------------------------------------------------------


def predict_offsets(feature: BEVFeature, params: DeformableMessageExtractor) -> OffsetField:
    return params.predict_offsets(feature.data.unsqueeze(0))


def deformable_extract(feature: BEVFeature, offsets: OffsetField, params: DeformableMessageExtractor) -> torch.Tensor:
    """Raw (C', H, W) message before resizing."""
    x = feature.data.unsqueeze(0)
    if offsets.offsets.shape[-2:] != x.shape[-2:]:
        raise ValueError("offset field does not match feature size")
    return params.kernel(x, offsets.offsets)[0]


def resize_message(raw: torch.Tensor, target_hw, resizer: Resizer) -> torch.Tensor:
    return resizer(raw.unsqueeze(0), target_hw)[0]


class ExtractorRegistry:
    """Pair-indexed extractors ``(sender, receiver) -> (module, receiver grid)``."""

    def __init__(self):
        self._pairs: dict[tuple[int, int], tuple[nn.Module, tuple[int, int]]] = {}

    def register(self, sender: int, receiver: int, extractor: nn.Module, target_hw):
        self._pairs[(sender, receiver)] = (extractor, tuple(target_hw))

    def unregister(self, sender: int, receiver: int):
        self._pairs.pop((sender, receiver), None)

    def get(self, sender: int, receiver: int) -> tuple[nn.Module, tuple[int, int]]:
        try:
            return self._pairs[(sender, receiver)]
        except KeyError:
            raise KeyError(f"no message extractor registered for {sender}->{receiver}") from None

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self._pairs

    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self._pairs)


def extract(feature: BEVFeature, pair: tuple[int, int], registry: ExtractorRegistry) -> SpatialMessage:
    sender, receiver = pair
    ext, target_hw = registry.get(sender, receiver)
    data = ext(feature.data.unsqueeze(0), target_hw)[0]
    return SpatialMessage(sender, receiver, data)
