"""Message-conditioned diffusion generator for collaborator features.

The ego feature is noised in closed form to step T and then denoised T times
by a small conditional U-Net, once per received message. The U-Net predicts
the previous-step feature directly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 3
    beta_start: float = 1e-4
    beta_end: float = 0.2

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("diffusion needs T >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("betas must satisfy 0 < beta_start <= beta_end < 1")

    @property
    def betas(self) -> np.ndarray:
        if self.T == 1:
            return np.array([self.beta_start])
        return np.linspace(self.beta_start, self.beta_end, self.T)

    @property
    def alpha_bars(self) -> np.ndarray:
        """alpha_bar for t = 1..T."""
        return np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside 1..{self.T}")
        return float(self.alpha_bars[t - 1])


def _noise_like(x: torch.Tensor, rng_seed) -> torch.Tensor:
    if isinstance(rng_seed, torch.Generator):
        gen = rng_seed
    else:
        gen = torch.Generator().manual_seed(int(rng_seed))
    return torch.randn(x.shape, generator=gen, dtype=x.dtype)


def diffuse_with_alpha(f_init: torch.Tensor, alpha_bar: float, z: torch.Tensor) -> torch.Tensor:
    return math.sqrt(alpha_bar) * f_init + math.sqrt(1.0 - alpha_bar) * z


def forward_diffuse(f_init: torch.Tensor, t: int, schedule: DiffusionSchedule, rng_seed) -> torch.Tensor:
    """F_t = sqrt(abar_t) F_init + sqrt(1 - abar_t) z with z drawn from ``rng_seed``."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} outside 1..{schedule.T}")
    return diffuse_with_alpha(f_init, schedule.alpha_bar(t), _noise_like(f_init, rng_seed))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    args = t.float().view(-1, 1) * freqs.view(1, -1)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ConditionalUNet(nn.Module):
    """Two-level encoder-decoder with one skip; input is [F_t || M]."""

    def __init__(self, feat_channels: int, msg_channels: int, base: int = 16, time_dim: int = 16):
        super().__init__()
        self.feat_channels = feat_channels
        self.msg_channels = msg_channels
        self.time_dim = time_dim
        self.in_conv = nn.Conv2d(feat_channels + msg_channels, base, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, base)
        self.enc = nn.Conv2d(base, base, 3, padding=1)
        self.down = nn.Conv2d(base, 2 * base, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(2 * base, 2 * base, 3, padding=1)
        self.up = nn.Conv2d(2 * base, base, 3, padding=1)
        self.dec = nn.Conv2d(2 * base, base, 3, padding=1)
        self.out = nn.Conv2d(base, feat_channels, 3, padding=1)

    def forward(self, f_t: torch.Tensor, message: torch.Tensor, t: int) -> torch.Tensor:
        if f_t.shape[-2:] != message.shape[-2:]:
            raise ValueError(f"message grid {tuple(message.shape[-2:])} does not match feature grid "
                             f"{tuple(f_t.shape[-2:])}")
        temb = self.time_proj(timestep_embedding(torch.full((1,), t), self.time_dim).to(f_t.dtype))
        h = F.silu(self.in_conv(torch.cat([f_t, message], dim=1)) + temb.view(1, -1, 1, 1))
        skip = F.silu(self.enc(h))
        d = F.silu(self.down(skip))
        d = F.silu(self.mid(d))
        u = F.interpolate(d, size=skip.shape[-2:], mode="nearest")
        u = F.silu(self.up(u))
        h = F.silu(self.dec(torch.cat([u, skip], dim=1)))
        return self.out(h)


class FeatureGenerator(nn.Module):
    """Batched generation. Messages are flattened across egos; ``owner[m]`` is the
    batch index of the ego that received message ``m``."""

    def __init__(self, feat_channels: int, msg_channels: int, schedule: DiffusionSchedule, base: int = 16):
        super().__init__()
        self.schedule = schedule
        self.denoiser = ConditionalUNet(feat_channels, msg_channels, base)

    def forward(self, f_ego: torch.Tensor, messages: torch.Tensor, owner: torch.Tensor,
                noise: torch.Tensor) -> torch.Tensor:
        if messages.shape[0] == 0:
            return f_ego.new_zeros((0, *f_ego.shape[1:]))
        T = self.schedule.T
        f_T = diffuse_with_alpha(f_ego, self.schedule.alpha_bar(T), noise)
        x = f_T[owner]
        for t in range(T, 0, -1):
            x = self.denoiser(x, messages, t)
        return x


# functional surface ---------------------------------------------------------


@dataclass
class GeneratedFeature:
    data: torch.Tensor
    for_collaborator_id: int
    conditioned_on: str


def message_digest(data: torch.Tensor) -> str:
    return hashlib.sha256(data.detach().cpu().contiguous().numpy().astype("<f4").tobytes()).hexdigest()[:16]


def denoise_step(f_t, messages, t: int, params: ConditionalUNet) -> list[torch.Tensor]:
    """One reverse step per collaborator.

    ``f_t`` is either one shared (C, H, W) tensor or a list aligned with ``messages``.
    """
    if t < 1:
        raise ValueError("denoising step must be >= 1")
    if not messages:
        return []
    msgs = torch.stack([getattr(m, "data", m) for m in messages])
    if isinstance(f_t, torch.Tensor):
        x = f_t.unsqueeze(0).expand(len(messages), *f_t.shape)
    else:
        x = torch.stack(list(f_t))
    return list(params(x, msgs, t).unbind(0))


def generate(f_ego, messages, schedule: DiffusionSchedule, params: ConditionalUNet, rng_seed) -> list[GeneratedFeature]:
    """Noise the ego feature to step T, then run T conditioned reverse steps per message."""
    if not messages:
        return []
    data = getattr(f_ego, "data", f_ego)
    f_t = forward_diffuse(data, schedule.T, schedule, rng_seed)
    xs = f_t
    for t in range(schedule.T, 0, -1):
        xs = denoise_step(xs, messages, t, params)
    out = []
    for m, x in zip(messages, xs):
        out.append(GeneratedFeature(x, getattr(m, "sender_id", -1), message_digest(getattr(m, "data", m))))
    return out


def generation_loss(generated, targets) -> torch.Tensor:
    """Sum over collaborators of the per-pair mean squared error."""
    if len(generated) != len(targets):
        raise ValueError(f"{len(generated)} generated features but {len(targets)} targets")
    total = torch.zeros(())
    for g, tgt in zip(generated, targets):
        gid = getattr(g, "for_collaborator_id", None)
        tid = getattr(tgt, "agent_id", None)
        if gid is not None and tid is not None and gid != tid:
            raise ValueError(f"generated feature for {gid} paired with target of {tid}")
        gd, td = getattr(g, "data", g), getattr(tgt, "data", tgt)
        if gd.shape != td.shape:
            raise ValueError(f"shape mismatch {tuple(gd.shape)} vs {tuple(td.shape)}")
        total = total + F.mse_loss(gd, td)
    return total
