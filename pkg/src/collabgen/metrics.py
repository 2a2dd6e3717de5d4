"""Average precision over rotated BEV boxes."""

from __future__ import annotations

import numpy as np

from .geometry import rotated_iou_matrix


def match_detections(pred_boxes, scores, gt_boxes, iou_thresh: float):
    """Greedy score-ordered one-to-one matching. Returns (scores, is_tp) for the sample."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 5)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 5)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(order), dtype=bool)
    if len(gt_boxes) and len(order):
        iou = rotated_iou_matrix(pred_boxes[order], gt_boxes)
        taken = np.zeros(len(gt_boxes), dtype=bool)
        for r in range(len(order)):
            cand = np.where(taken, -1.0, iou[r])
            j = int(np.argmax(cand))
            if cand[j] >= iou_thresh:
                taken[j] = True
                tp[r] = True
    return scores[order], tp


def ap_from_matches(scores, is_tp, n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if n_gt == 0:
        return 1.0 if len(scores) == 0 else 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(preds, gts, iou_thresh: float) -> float:
    """``preds`` is a list of objects with ``boxes``/``scores``; ``gts`` a list of (N, 5) arrays.

    Empty ground truth together with no predictions counts as AP 1.0.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("IoU threshold must lie in (0, 1)")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} label sets")
    all_scores, all_tp, n_gt = [], [], 0
    for p, g in zip(preds, gts):
        g = np.asarray(getattr(g, "boxes", g), dtype=np.float64).reshape(-1, 5)
        s, t = match_detections(p.boxes, p.scores, g, iou_thresh)
        all_scores.append(s)
        all_tp.append(t)
        n_gt += len(g)
    return ap_from_matches(np.concatenate(all_scores) if all_scores else np.zeros(0),
                           np.concatenate(all_tp) if all_tp else np.zeros(0, bool), n_gt)
