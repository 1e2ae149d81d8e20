from __future__ import annotations

import numpy as np

from .tensor_core import ShapeMismatch


def iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Foreground IoU of two binary masks; 1.0 when both are empty."""
    pred = np.asarray(pred_mask) > 0.5
    gt = np.asarray(gt_mask) > 0.5
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def confusion_counts(pred_mask: np.ndarray, gt_mask: np.ndarray) -> dict[str, int]:
    pred = np.asarray(pred_mask) > 0.5
    gt = np.asarray(gt_mask) > 0.5
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return {
        "fg_intersection": int(np.logical_and(pred, gt).sum()),
        "fg_union": int(np.logical_or(pred, gt).sum()),
        "bg_intersection": int(np.logical_and(~pred, ~gt).sum()),
        "bg_union": int(np.logical_or(~pred, ~gt).sum()),
    }
