"""Per-pixel attention fusion over agents and the anchor-based BEV decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .geometry import OrientedBox, rotated_iou_matrix, wrap_angle, wrap_half_pi


# fusion ---------------------------------------------------------------------


def attention_fuse(features: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the agent axis. features (N, B, C, H, W), logits (N, B, H, W).

    A +inf logit takes the whole weight at its location (shared evenly if tied).
    """
    pos = torch.isposinf(logits)
    if pos.any():
        hit = pos.any(dim=0, keepdim=True)
        logits = torch.where(hit, torch.where(pos, 0.0, float("-inf")).to(logits.dtype), logits)
    w = torch.softmax(logits, dim=0)
    return (w.unsqueeze(2) * features).sum(dim=0)


class AttentionFusion(nn.Module):
    """Ego-query attention: logit_a = <q(F_ego), k(F_a)> / sqrt(d) at every pixel."""

    def __init__(self, channels: int, key_dim: int | None = None):
        super().__init__()
        self.key_dim = key_dim or channels
        self.query = nn.Conv2d(channels, self.key_dim, 1)
        self.key = nn.Conv2d(channels, self.key_dim, 1)

    def logits(self, ego: torch.Tensor, stacked: torch.Tensor) -> torch.Tensor:
        N, B, C, H, W = stacked.shape
        q = self.query(ego)
        k = self.key(stacked.reshape(N * B, C, H, W)).reshape(N, B, self.key_dim, H, W)
        return (q.unsqueeze(0) * k).sum(dim=2) / math.sqrt(self.key_dim)

    def forward(self, ego: torch.Tensor, others: list[torch.Tensor] | torch.Tensor | None = None,
                others_mask: torch.Tensor | None = None) -> torch.Tensor:
        """``others`` is a list of (B, C, H, W) or a stacked (N, B, C, H, W) tensor.

        ``others_mask`` (N, B) marks which stacked entries are real; padded entries
        get -inf logits so batches can mix egos with different collaborator counts.
        """
        if others is None or len(others) == 0:
            return ego
        if isinstance(others, (list, tuple)):
            for o in others:
                if o.shape != ego.shape:
                    raise ValueError(f"feature shape {tuple(o.shape)} != ego {tuple(ego.shape)}")
            others = torch.stack(list(others))
        elif others.shape[1:] != ego.shape:
            raise ValueError(f"feature shape {tuple(others.shape[1:])} != ego {tuple(ego.shape)}")
        stacked = torch.cat([ego.unsqueeze(0), others], dim=0)
        logits = self.logits(ego, stacked)
        if others_mask is not None:
            keep = torch.cat([torch.ones_like(others_mask[:1]), others_mask], dim=0)
            logits = logits.masked_fill(~keep.bool()[:, :, None, None], float("-inf"))
        return attention_fuse(stacked, logits)


@dataclass
class FusedFeature:
    data: torch.Tensor
    agents: list[int]


def fuse(ego, others, params: AttentionFusion) -> FusedFeature:
    ego_data = getattr(ego, "data", ego)
    other_data = [getattr(o, "data", o).unsqueeze(0) for o in others]
    z = params(ego_data.unsqueeze(0), other_data)[0]
    ids = [getattr(ego, "agent_id", 0)] + [getattr(o, "agent_id", getattr(o, "for_collaborator_id", -1))
                                           for o in others]
    return FusedFeature(z, ids)


# anchors and box coding -----------------------------------------------------


@dataclass
class AnchorGrid:
    """Anchors at every cell centre; anchor index = (row * W + col) * A + a."""

    extent: tuple[float, float]
    hw: tuple[int, int]
    size: tuple[float, float] = (10.0, 5.0)  # (l, w)
    yaws: tuple[float, ...] = (0.0, math.pi / 2)
    boxes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        H, W = self.hw
        ex, ey = self.extent
        xs = -ex / 2 + (np.arange(W) + 0.5) * ex / W
        ys = -ey / 2 + (np.arange(H) + 0.5) * ey / H
        gx, gy = np.meshgrid(xs, ys)
        A = len(self.yaws)
        b = np.zeros((H, W, A, 5))
        b[..., 0] = gx[..., None]
        b[..., 1] = gy[..., None]
        b[..., 2] = self.size[1]
        b[..., 3] = self.size[0]
        b[..., 4] = np.array(self.yaws)
        self.boxes = b.reshape(-1, 5)

    @property
    def per_cell(self) -> int:
        return len(self.yaws)

    @property
    def cell_size(self) -> tuple[float, float]:
        return self.extent[0] / self.hw[1], self.extent[1] / self.hw[0]


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(dx, dy, dw, dl, dyaw); centre offsets are scaled by the anchor diagonal."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 5)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 5)
    diag = np.hypot(anchors[:, 2], anchors[:, 3])
    out = np.empty_like(gt)
    out[:, 0] = (gt[:, 0] - anchors[:, 0]) / diag
    out[:, 1] = (gt[:, 1] - anchors[:, 1]) / diag
    out[:, 2] = np.log(gt[:, 2] / anchors[:, 2])
    out[:, 3] = np.log(gt[:, 3] / anchors[:, 3])
    out[:, 4] = wrap_half_pi(gt[:, 4] - anchors[:, 4])
    return out


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 5)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 5)
    diag = np.hypot(anchors[:, 2], anchors[:, 3])
    out = np.empty_like(deltas)
    out[:, 0] = anchors[:, 0] + deltas[:, 0] * diag
    out[:, 1] = anchors[:, 1] + deltas[:, 1] * diag
    out[:, 2] = anchors[:, 2] * np.exp(deltas[:, 2])
    out[:, 3] = anchors[:, 3] * np.exp(deltas[:, 3])
    out[:, 4] = wrap_angle(anchors[:, 4] + deltas[:, 4])
    return out


def assign_targets(gt_boxes: np.ndarray, anchors: AnchorGrid) -> tuple[np.ndarray, np.ndarray]:
    """Each ground-truth box claims the anchor at its centre cell whose yaw is closest
    modulo a half turn. Returns (labels (N_anchor,), regression targets (N_anchor, 5))."""
    n = anchors.boxes.shape[0]
    labels = np.zeros(n, dtype=np.float32)
    targets = np.zeros((n, 5), dtype=np.float32)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 5)
    if len(gt_boxes) == 0:
        return labels, targets
    H, W = anchors.hw
    cw, ch = anchors.cell_size
    cols = np.clip(((gt_boxes[:, 0] + anchors.extent[0] / 2) / cw).astype(int), 0, W - 1)
    rows = np.clip(((gt_boxes[:, 1] + anchors.extent[1] / 2) / ch).astype(int), 0, H - 1)
    yaw_gap = np.abs(wrap_half_pi(gt_boxes[:, None, 4] - np.array(anchors.yaws)[None, :]))
    a = np.argmin(yaw_gap, axis=1)
    idx = (rows * W + cols) * anchors.per_cell + a
    labels[idx] = 1.0
    targets[idx] = encode_boxes(gt_boxes, anchors.boxes[idx]).astype(np.float32)
    return labels, targets


# decoder --------------------------------------------------------------------


class DetectionHead(nn.Module):
    """Conv neck followed by a classification logit and 5 regression values per anchor."""

    def __init__(self, channels: int, anchors_per_cell: int = 2, neck_layers: int = 3):
        super().__init__()
        layers = []
        for _ in range(neck_layers):
            layers += [nn.Conv2d(channels, channels, 3, padding=1), nn.SiLU()]
        self.neck = nn.Sequential(*layers)
        self.A = anchors_per_cell
        self.cls = nn.Conv2d(channels, anchors_per_cell, 1)
        self.reg = nn.Conv2d(channels, 5 * anchors_per_cell, 1)
        nn.init.constant_(self.cls.bias, -4.0)
        nn.init.zeros_(self.reg.bias)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns logits (B, H*W*A) and regression (B, H*W*A, 5)."""
        h = self.neck(z)
        B, _, H, W = h.shape
        cls = self.cls(h).permute(0, 2, 3, 1).reshape(B, H * W * self.A)
        reg = self.reg(h).permute(0, 2, 3, 1).reshape(B, H * W * self.A, 5)
        return cls, reg


@dataclass
class DetectionSet:
    boxes: np.ndarray  # (N, 5) cx, cy, w, l, yaw
    scores: np.ndarray  # (N,), descending

    def __len__(self):
        return len(self.scores)

    def oriented(self) -> list[OrientedBox]:
        return [OrientedBox.from_array(b) for b in self.boxes]

    @classmethod
    def empty(cls) -> "DetectionSet":
        return cls(np.zeros((0, 5)), np.zeros(0))


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy rotated NMS; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    if len(order) == 0:
        return order
    iou = rotated_iou_matrix(boxes[order], boxes[order])
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        suppressed |= iou[i] > iou_thresh
    return np.array(keep, dtype=int)


def decode_outputs(cls_logits: np.ndarray, reg: np.ndarray, anchors: np.ndarray,
                   score_thresh: float = 0.1, nms_iou: float = 0.15, max_candidates: int = 64) -> DetectionSet:
    """Single-sample decode: sigmoid scores, threshold, box decode, rotated NMS."""
    cls_logits = np.asarray(cls_logits, dtype=np.float64).reshape(-1)
    with np.errstate(over="ignore"):
        scores = 1.0 / (1.0 + np.exp(-cls_logits))
    cand = np.nonzero(scores > score_thresh)[0]
    if len(cand) == 0:
        return DetectionSet.empty()
    cand = cand[np.argsort(-scores[cand], kind="stable")][:max_candidates]
    boxes = decode_boxes(np.asarray(reg).reshape(-1, 5)[cand], anchors[cand])
    keep = nms(boxes, scores[cand], nms_iou)
    return DetectionSet(boxes[keep], scores[cand][keep])


def decode(z, anchors: AnchorGrid, params: DetectionHead, score_thresh: float = 0.1,
           nms_iou: float = 0.15) -> DetectionSet:
    data = getattr(z, "data", z)
    if tuple(data.shape[-2:]) != tuple(anchors.hw):
        raise ValueError(f"feature grid {tuple(data.shape[-2:])} does not match anchors {anchors.hw}")
    with torch.no_grad():
        cls, reg = params(data.unsqueeze(0))
    return decode_outputs(cls[0].numpy(), reg[0].numpy(), anchors.boxes, score_thresh, nms_iou)
