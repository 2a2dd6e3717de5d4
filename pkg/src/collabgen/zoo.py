"""Heterogeneous agents: declarative specs and their BEV encoders."""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass

import torch
from torch import nn

DEPTH_BLOCKS = {"identity": 0, "shallow": 1, "medium": 2, "deep": 3}


@dataclass(frozen=True)
class AgentSpec:
    agent_id: int
    name: str
    encoder_depth: str
    feature_channels: int
    feature_hw: tuple[int, int]
    obs_hw: tuple[int, int]
    fov_kind: str
    semantic_space_id: str
    noise_profile_id: str = "clean"
    max_range_m: float | None = None
    in_channels: int = 1

    def __post_init__(self):
        if self.encoder_depth not in DEPTH_BLOCKS:
            raise ValueError(f"encoder_depth must be one of {sorted(DEPTH_BLOCKS)}")
        if self.feature_channels <= 0:
            raise ValueError("feature_channels must be positive")
        if self.fov_kind not in ("wide", "square"):
            raise ValueError("fov_kind must be 'wide' or 'square'")
        if not 0 <= self.agent_id < 2**16:
            raise ValueError("agent_id must fit in u16")
        downsample(self.obs_hw, self.feature_hw)

    @property
    def is_camera(self) -> bool:
        return self.fov_kind == "square"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_hw"] = list(self.feature_hw)
        d["obs_hw"] = list(self.obs_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentSpec":
        d = dict(d)
        d["feature_hw"] = tuple(d["feature_hw"])
        d["obs_hw"] = tuple(d["obs_hw"])
        return cls(**d)


def downsample(obs_hw, feature_hw) -> int:
    """Number of 2x reductions from observation to feature grid."""
    fh, fw = obs_hw[0] / feature_hw[0], obs_hw[1] / feature_hw[1]
    if fh != fw or fh < 1 or fh != int(fh) or int(fh) & (int(fh) - 1):
        raise ValueError(f"obs grid {obs_hw} is not a power-of-two multiple of feature grid {feature_hw}")
    return int(math.log2(fh))


@dataclass
class BEVFeature:
    agent_id: int
    data: torch.Tensor
    semantic_space_id: str

    def __post_init__(self):
        if self.data.dim() != 3:
            raise ValueError("BEVFeature data must be C x H x W")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


class Encoder(nn.Module):
    """Stack of conv3x3 + SiLU blocks; the first blocks stride by two.

    When the agent spec asks for more downsampling than it has blocks, a parameter-free
    average-pool stem makes up the difference. Identity depth is a pooling stem
    followed by a 1x1 projection.
    """

    def __init__(self, spec: AgentSpec):
        super().__init__()
        self.spec = spec
        n_down = downsample(spec.obs_hw, spec.feature_hw)
        n_blocks = DEPTH_BLOCKS[spec.encoder_depth]
        stem = n_down - min(n_down, n_blocks)
        self.stem = nn.AvgPool2d(2**stem) if stem else nn.Identity()
        c = spec.feature_channels
        if n_blocks == 0:
            self.blocks = nn.Sequential(nn.Conv2d(spec.in_channels, c, 1))
            return
        widths = [max(c // 2 ** (n_blocks - 1 - i), 4) for i in range(n_blocks)]
        widths[-1] = c
        layers = []
        cin = spec.in_channels
        strided = min(n_down, n_blocks)
        for i, cout in enumerate(widths):
            layers += [nn.Conv2d(cin, cout, 3, stride=2 if i < strided else 1, padding=1), nn.SiLU()]
            cin = cout
        self.blocks = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(self.stem(x))


def encode(obs, spec: AgentSpec, encoder: Encoder) -> BEVFeature:
    """Encode one observation into a BEV feature of shape (C_i, H_i, W_i)."""
    grid = torch.as_tensor(obs.occupancy, dtype=torch.float32)
    if grid.dim() == 2:
        grid = grid.unsqueeze(0)
    if tuple(grid.shape) != (spec.in_channels, *spec.obs_hw):
        raise ValueError(f"observation shape {tuple(grid.shape)} does not match spec input "
                         f"{(spec.in_channels, *spec.obs_hw)}")
    data = encoder(grid.unsqueeze(0))[0]
    return BEVFeature(spec.agent_id, data, spec.semantic_space_id)


def space_seed(semantic_space_id: str, base_seed: int = 0) -> int:
    return (zlib.crc32(semantic_space_id.encode()) + 7919 * base_seed) % 2**31


@dataclass
class ZooEntry:
    spec: AgentSpec
    encoder: Encoder


class AgentZoo:
    """Registry ``agent_id -> (spec, encoder)``."""

    def __init__(self):
        self._entries: dict[int, ZooEntry] = {}

    def __len__(self):
        return len(self._entries)

    def __contains__(self, agent_id):
        return agent_id in self._entries

    def __getitem__(self, agent_id) -> ZooEntry:
        try:
            return self._entries[agent_id]
        except KeyError:
            raise KeyError(f"agent {agent_id} is not registered in the zoo") from None

    def __iter__(self):
        return iter(self._entries.values())

    def specs(self) -> list[AgentSpec]:
        return [e.spec for e in self._entries.values()]

    def by_name(self, name: str) -> ZooEntry:
        for e in self._entries.values():
            if e.spec.name == name:
                return e
        raise KeyError(f"no agent named {name!r}")

    def register(self, spec: AgentSpec, encoder: Encoder | None = None, seed: int = 0):
        if spec.agent_id in self._entries:
            raise ValueError(f"duplicate agent id {spec.agent_id}")
        if any(e.spec.semantic_space_id == spec.semantic_space_id for e in self._entries.values()):
            raise ValueError(f"semantic space {spec.semantic_space_id!r} already used")
        if encoder is None:
            with torch.random.fork_rng():
                torch.manual_seed(space_seed(spec.semantic_space_id, seed))
                encoder = Encoder(spec)
        self._entries[spec.agent_id] = ZooEntry(spec, encoder)


def build_zoo(configs: list[AgentSpec], seed: int = 0) -> AgentZoo:
    zoo = AgentZoo()
    for spec in configs:
        zoo.register(spec, seed=seed)
    return zoo
