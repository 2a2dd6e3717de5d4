"""Detection and generation losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    reg: float = 2.0
    gen: float = 1.0

    def __post_init__(self):
        if min(self.cls, self.reg, self.gen) < 0:
            raise ValueError("loss weights must be nonnegative")

    def total(self, l_cls, l_reg, l_gen=None, stage: int = 1):
        out = self.cls * l_cls + self.reg * l_reg
        if stage == 1 and l_gen is not None:
            out = out + self.gen * l_gen
        return out


def focal_cls_loss(logits: torch.Tensor, labels: torch.Tensor, alpha: float | None = 0.25,
                   gamma: float = 2.0) -> torch.Tensor:
    """Sigmoid focal loss summed over anchors and divided by the positive count.

    ``alpha`` weights positives by alpha and negatives by 1 - alpha; ``None`` disables
    the balancing. With no positives the sum is divided by 1.
    """
    if logits.shape != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} differ")
    labels = labels.to(logits.dtype)
    ce = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * labels + (1 - p) * (1 - labels)
    loss = ce * (1 - p_t) ** gamma
    if alpha is not None:
        loss = loss * (alpha * labels + (1 - alpha) * (1 - labels))
    n_pos = labels.sum().clamp(min=1.0)
    return loss.sum() / n_pos


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    a = x.abs()
    return torch.where(a < 1.0, 0.5 * x * x, a - 0.5)


def smooth_l1_reg_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over masked anchors of the smooth-L1 summed over the 5 box components."""
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    mask = mask.bool()
    n = mask.sum()
    if n == 0:
        return pred.sum() * 0.0
    per_anchor = smooth_l1(pred - target)
    if per_anchor.dim() > mask.dim():
        per_anchor = per_anchor.sum(dim=-1)
    return per_anchor[mask].sum() / n
