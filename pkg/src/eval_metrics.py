"""Dice similarity coefficient and 95th-percentile Hausdorff distance."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy import ndimage

from errors import ShapeError

logger = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"Prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return pred, gt


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1"""
    pred, gt = _check_pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels 4-adjacent to background (the image border counts as background)"""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=FOUR_CONNECTED, border_value=0)


def boundary_distances(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Pooled directed distances {d(p -> boundary G)} U {d(g -> boundary P)} over both boundaries"""
    pred, gt = _check_pair(pred, gt)
    b_pred, b_gt = boundary(pred), boundary(gt)
    to_gt = ndimage.distance_transform_edt(~b_gt)
    to_pred = ndimage.distance_transform_edt(~b_pred)
    return np.concatenate([to_gt[b_pred], to_pred[b_gt]])


def _sentinel(shape) -> float:
    return float(np.hypot(*shape))


def hd95(pred: np.ndarray, gt: np.ndarray) -> float:
    """95th percentile (linear interpolation) of the pooled boundary distances, in pixels"""
    pred, gt = _check_pair(pred, gt)
    if not pred.any() or not gt.any():
        logger.warning("HD95 on an empty mask; reporting the image diagonal")
        return _sentinel(pred.shape)
    return float(np.percentile(boundary_distances(pred, gt), 95))


def hausdorff(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check_pair(pred, gt)
    if not pred.any() or not gt.any():
        return _sentinel(pred.shape)
    return float(boundary_distances(pred, gt).max())


@dataclass
class ClassScores:
    """Per-foreground-class score lists accumulated over a test split"""

    num_classes: int
    dsc: Dict[int, List[float]] = field(default_factory=dict)
    hd95: Dict[int, List[float]] = field(default_factory=dict)

    def add(self, pred_map: np.ndarray, gt_map: np.ndarray) -> None:
        for c in range(1, self.num_classes):
            p, g = pred_map == c, gt_map == c
            self.dsc.setdefault(c, []).append(dice_score(p, g))
            self.hd95.setdefault(c, []).append(hd95(p, g))

    def means(self) -> Dict[str, float]:
        out = {}
        for c in range(1, self.num_classes):
            out[f"dsc_c{c}"] = float(np.mean(self.dsc.get(c, [np.nan])))
            out[f"hd95_c{c}"] = float(np.mean(self.hd95.get(c, [np.nan])))
        return out


def score_predictions(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], num_classes: int) -> Dict[str, float]:
    """Mean per-class DSC and HD95 over paired class maps, plus their class averages"""
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions but {len(gts)} ground-truth maps")
    scores = ClassScores(num_classes)
    for pred, gt in zip(preds, gts):
        scores.add(pred, gt)
    out = scores.means()
    out["dsc"] = float(np.mean([out[f"dsc_c{c}"] for c in range(1, num_classes)]))
    out["hd95"] = float(np.mean([out[f"hd95_c{c}"] for c in range(1, num_classes)]))
    return out


def metric_columns(num_classes: int) -> List[str]:
    return [f"dsc_c{c}" for c in range(1, num_classes)] + [f"hd95_c{c}" for c in range(1, num_classes)]
