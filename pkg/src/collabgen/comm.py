"""Message transport between agents: wire format, volume accounting, injected
pose noise, delay and degradation, and the collaboration graph that runs the
full encode -> extract -> transmit -> generate -> enhance -> fuse -> decode loop."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import SceneCache
from .dme import ExtractorRegistry, SpatialMessage
from .fusion import DetectionSet, decode_outputs
from .model import AgentModel
from .scene import Pose
from .training import seed_for

log = logging.getLogger(__name__)

HEADER = struct.Struct("<HHBHHB")
DTYPES = {1: np.dtype("<f4")}
DTYPE_CODES = {np.dtype("<f4"): 1}
MAX_RANGE_M = 70.0


def comm_volume_log2(channels: int, h: int, w: int, dtype_bytes: int = 4) -> float:
    if min(channels, h, w, dtype_bytes) <= 0:
        raise ValueError("dimensions must be positive")
    return math.log2(channels * h * w * dtype_bytes)


@dataclass
class WireMessage:
    sender: int
    receiver: int
    channels: int
    h: int
    w: int
    payload: bytes
    dtype_code: int = 1
    timestamp: int = 0

    def __post_init__(self):
        size = self.channels * self.h * self.w * DTYPES[self.dtype_code].itemsize
        if len(self.payload) != size:
            raise ValueError(f"payload holds {len(self.payload)} bytes, header implies {size}")

    @property
    def nbytes(self) -> int:
        return len(self.payload)

    @classmethod
    def from_tensor(cls, sender: int, receiver: int, data: torch.Tensor, timestamp: int = 0) -> "WireMessage":
        arr = np.ascontiguousarray(data.detach().cpu().numpy(), dtype="<f4")
        c, h, w = arr.shape
        return cls(sender, receiver, c, h, w, arr.tobytes(), 1, timestamp)

    @classmethod
    def from_message(cls, msg: SpatialMessage, timestamp: int = 0) -> "WireMessage":
        return cls.from_tensor(msg.sender_id, msg.receiver_id, msg.data, timestamp)

    def array(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=DTYPES[self.dtype_code]).reshape(self.channels, self.h, self.w)

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.array().astype(np.float32))

    def to_bytes(self) -> bytes:
        return HEADER.pack(self.sender, self.receiver, self.channels, self.h, self.w, self.dtype_code) + self.payload

    @classmethod
    def from_bytes(cls, buf: bytes, timestamp: int = 0) -> "WireMessage":
        sender, receiver, c, h, w, code = HEADER.unpack_from(buf)
        if code not in DTYPES:
            raise ValueError(f"unknown dtype code {code}")
        return cls(sender, receiver, c, h, w, bytes(buf[HEADER.size:]), code, timestamp)

    def with_payload(self, arr: np.ndarray) -> "WireMessage":
        return WireMessage(self.sender, self.receiver, self.channels, self.h, self.w,
                           np.ascontiguousarray(arr, dtype="<f4").tobytes(), self.dtype_code, self.timestamp)


@dataclass(frozen=True)
class NoiseSpec:
    sigma_xy: float = 0.0
    sigma_yaw: float = 0.0
    delay_frames: int = 0
    degradation: float = 0.0

    def __post_init__(self):
        if self.sigma_xy < 0 or self.sigma_yaw < 0 or self.delay_frames < 0:
            raise ValueError("noise levels must be nonnegative")
        if not 0.0 <= self.degradation <= 1.0:
            raise ValueError("degradation ratio must lie in [0, 1]")

    @property
    def pose_free(self) -> bool:
        return self.sigma_xy == 0 and self.sigma_yaw == 0


def apply_pose_noise(pose: Pose, spec: NoiseSpec, seed) -> Pose:
    """Gaussian perturbation of x, y (std sigma_xy) and yaw (std sigma_yaw, radians).

    The unit draws depend only on ``seed``, so sweeping the sigmas scales one fixed
    perturbation direction.
    """
    if spec.pose_free:
        return pose
    z = np.random.default_rng(seed).standard_normal(3)
    return Pose(pose.x + spec.sigma_xy * z[0], pose.y + spec.sigma_xy * z[1], pose.yaw + spec.sigma_yaw * z[2])


def cell_grid(extent, hw):
    H, W = hw
    xs = -extent[0] / 2 + (np.arange(W) + 0.5) * extent[0] / W
    ys = -extent[1] / 2 + (np.arange(H) + 0.5) * extent[1] / H
    return np.meshgrid(xs, ys)


def warp_message(data: np.ndarray, true_pose: Pose, noisy_pose: Pose, extent) -> np.ndarray:
    """Re-place a world-frame message as the ego sees it when the sender's pose is
    believed to be ``noisy_pose``. Nearest-neighbour sampling, zeros outside."""
    if true_pose == noisy_pose:
        return data
    C, H, W = data.shape
    gx, gy = cell_grid(extent, (H, W))
    # q -> sender-local under the believed pose -> world under the true pose
    cn, sn = math.cos(noisy_pose.yaw), math.sin(noisy_pose.yaw)
    dx, dy = gx - noisy_pose.x, gy - noisy_pose.y
    lx, ly = cn * dx + sn * dy, -sn * dx + cn * dy
    ct, st = math.cos(true_pose.yaw), math.sin(true_pose.yaw)
    sx = ct * lx - st * ly + true_pose.x
    sy = st * lx + ct * ly + true_pose.y
    col = np.floor((sx + extent[0] / 2) / (extent[0] / W)).astype(int)
    row = np.floor((sy + extent[1] / 2) / (extent[1] / H)).astype(int)
    valid = (col >= 0) & (col < W) & (row >= 0) & (row < H)
    out = np.zeros_like(data)
    out[:, valid] = data[:, row[valid], col[valid]]
    return out


def degradation_mask(n: int, rho: float, seed) -> np.ndarray:
    """Boolean mask with exactly round(rho * n) True entries. Masks for larger rho
    contain those for smaller rho under the same seed."""
    order = np.random.default_rng(seed).permutation(n)
    mask = np.zeros(n, dtype=bool)
    mask[order[: int(round(rho * n))]] = True
    return mask


def degrade_message(msg: WireMessage, rho: float, seed) -> WireMessage:
    if not 0.0 <= rho <= 1.0:
        raise ValueError("degradation ratio must lie in [0, 1]")
    if rho == 0.0:
        return msg
    arr = msg.array().copy().reshape(-1)
    arr[degradation_mask(arr.size, rho, seed)] = 0.0
    return msg.with_payload(arr.reshape(msg.channels, msg.h, msg.w))


def delay_messages(stream: dict[int, list], delay_frames: int) -> dict[int, list]:
    """Frame f receives what was sent at f - delay; nothing before the first frame."""
    if delay_frames < 0:
        raise ValueError("delay must be nonnegative")
    return {f: list(stream.get(f - delay_frames, [])) if f - delay_frames >= 0 else [] for f in stream}


class AccountingLedger:
    """Append-only transmission log."""

    def __init__(self):
        self.records: list[dict] = []

    def record(self, frame: int, sender: int, receiver: int, nbytes: int, scene_id: int | None = None):
        rec = {"frame": frame, "sender": sender, "receiver": receiver, "bytes": nbytes}
        if scene_id is not None:
            rec["scene_id"] = scene_id
        self.records.append(rec)

    def note(self, text: str, **kw):
        self.records.append({"note": text, **kw})

    @property
    def total_bytes(self) -> int:
        return sum(r.get("bytes", 0) for r in self.records)

    def merge(self, other: "AccountingLedger"):
        self.records.extend(other.records)

    def write(self, path):
        key = lambda r: json.dumps(r, sort_keys=True)
        Path(path).write_text("".join(key(r) + "\n" for r in sorted(self.records, key=key)))


# collaboration graph --------------------------------------------------------


@dataclass
class Member:
    model: AgentModel
    slot: int


class CollaborationGraph:
    """Agents present in an episode, the ego designation and the pair extractors.

    A collaborator j contributes to ego i only when ``registry`` holds (j, i) and
    the two poses lie within the communication range.
    """

    def __init__(self, ego: int, registry: ExtractorRegistry | None = None, max_range: float = MAX_RANGE_M):
        self.ego = ego
        self.registry = registry or ExtractorRegistry()
        self.members: dict[int, Member] = {}
        self.max_range = max_range

    def add_agent(self, model: AgentModel, slot: int):
        aid = model.spec.agent_id
        if aid in self.members:
            raise ValueError(f"agent {aid} already in the graph")
        self.members[aid] = Member(model, slot)

    def remove_agent(self, agent_id: int):
        if agent_id == self.ego:
            raise ValueError("cannot remove the ego agent")
        self.members.pop(agent_id)

    def collaborators(self) -> list[int]:
        return sorted(a for a in self.members if a != self.ego)

    def edges(self, poses: list[Pose] | None = None, ledger: AccountingLedger | None = None) -> list[int]:
        """Collaborators with a registered extractor and, given poses, within range."""
        out = []
        ego_slot = self.members[self.ego].slot
        for j in self.collaborators():
            if (j, self.ego) not in self.registry:
                log.warning("no extractor for %d->%d; edge skipped", j, self.ego)
                if ledger is not None:
                    ledger.note("edge skipped: missing extractor", sender=j, receiver=self.ego)
                continue
            if poses is not None:
                a, b = poses[ego_slot], poses[self.members[j].slot]
                if math.hypot(a.x - b.x, a.y - b.y) > self.max_range:
                    continue
            out.append(j)
        return out


def generation_noise(model: AgentModel, scene_id: int, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed_for("episode-noise", seed, scene_id))
    return torch.randn((model.spec.feature_channels, *model.feature_hw), generator=g)


@dataclass
class EpisodeBatch:
    detections: list[DetectionSet]
    ledger: AccountingLedger
    edges: list[list[int]] = field(default_factory=list)


def run_episodes(graph: CollaborationGraph, cache: SceneCache, indices, noise: NoiseSpec | None = None,
                 frame: int = 0, seed: int = 0, score_thresh: float = 0.1, nms_iou: float = 0.15,
                 raw: bool = False):
    """Batched episodes for the ego of ``graph`` over ``cache.scenes[indices]``.

    Returns an EpisodeBatch, or the head outputs when ``raw`` is set.
    """
    noise = noise or NoiseSpec()
    indices = list(indices)
    ego = graph.members[graph.ego]
    ledger = AccountingLedger()
    src_frame = frame - noise.delay_frames
    with torch.no_grad():
        f_ego = ego.model.encode(cache.obs(ego.model.spec, ego.slot, frame)[indices])
        collab_feats = {}
        if src_frame >= 0:
            for j in graph.collaborators():
                m = graph.members[j]
                collab_feats[j] = m.model.encode(cache.obs(m.model.spec, m.slot, src_frame)[indices])
        msgs, owner, edges = [], [], []
        for b, i in enumerate(indices):
            scene = cache.scenes[i]
            these = graph.edges(scene.agent_poses, ledger) if src_frame >= 0 else []
            edges.append(these)
            for j in these:
                ext, hw = graph.registry.get(j, graph.ego)
                data = ext(collab_feats[j][b:b + 1], hw)[0]
                wire = WireMessage.from_tensor(j, graph.ego, data, timestamp=src_frame)
                wire = degrade_message(wire, noise.degradation, [seed, scene.scene_id, j])
                wire = WireMessage.from_bytes(wire.to_bytes(), wire.timestamp)
                ledger.record(frame, j, graph.ego, wire.nbytes, scene.scene_id)
                arr = wire.array()
                if not noise.pose_free:
                    true_pose = scene.agent_poses[graph.members[j].slot]
                    noisy = apply_pose_noise(true_pose, noise, [seed, scene.scene_id, j, 7])
                    arr = warp_message(arr, true_pose, noisy, scene.extent)
                msgs.append(torch.from_numpy(np.array(arr, dtype=np.float32)))
                owner.append(b)
        z = torch.stack([generation_noise(ego.model, cache.scenes[i].scene_id, seed) for i in indices])
        if msgs:
            messages = torch.stack(msgs)
        else:
            messages = f_ego.new_zeros((0, ego.model.hyper.message_channels, *ego.model.feature_hw))
        (cls, reg), _ = ego.model.collaborate(f_ego, messages, torch.tensor(owner, dtype=torch.long), z)
    if raw:
        return cls, reg
    dets = [decode_outputs(cls[b].numpy(), reg[b].numpy(), ego.model.anchors.boxes, score_thresh, nms_iou)
            for b in range(len(indices))]
    return EpisodeBatch(dets, ledger, edges)


def run_episode(graph: CollaborationGraph, cache: SceneCache, index: int, noise: NoiseSpec | None = None,
                frame: int = 0, seed: int = 0) -> dict[int, DetectionSet]:
    """One scene; returns the ego's detections keyed by its id."""
    out = run_episodes(graph, cache, [index], noise, frame, seed)
    return {graph.ego: out.detections[0]}
