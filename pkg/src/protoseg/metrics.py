"""Segmentation quality metrics: per-class Dice and average symmetric
surface distance (ASSD), aggregated over the evaluation split with
seen/unseen bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .datagen import LabeledSample

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap fraction 2|P&G| / (|P|+|G|).

    Convention: both masks empty -> 1.0, exactly one empty -> 0.0.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("mask shapes differ")
    p, g = int(pred.sum()), int(gt.sum())
    if p + g == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / (p + g)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Surface of a binary mask under 4-connectivity: mask pixels whose
    cross-neighborhood (image border counts as outside) leaves the mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    eroded = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~eroded


def assd(pred: np.ndarray, gt: np.ndarray,
         spacing: tuple[float, float] = (1.0, 1.0)) -> float | None:
    """Average symmetric surface distance between two binary masks.

    Euclidean distances between boundary pixel centers, scaled by the
    per-axis ``spacing``.  Returns None when either boundary is empty
    (metric undefined).
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("mask shapes differ")
    b_pred = boundary_pixels(pred)
    b_gt = boundary_pixels(gt)
    if not b_pred.any() or not b_gt.any():
        return None
    dist_to_gt = ndimage.distance_transform_edt(~b_gt, sampling=spacing)
    dist_to_pred = ndimage.distance_transform_edt(~b_pred, sampling=spacing)
    return 0.5 * (dist_to_gt[b_pred].mean() + dist_to_pred[b_gt].mean())


@dataclass
class MetricReport:
    """Per-class Dice/ASSD for one experiment plus seen/unseen aggregation.

    ``dice_scores``/``assd_scores`` are keyed by structure class name
    (background excluded); an ASSD of None marks classes where the metric
    was undefined on every image.  Means are recomputed from the per-class
    fields, never stored.
    """

    tag: str
    class_names: tuple[str, ...]              # structures only, label order
    unseen_names: tuple[str, ...]
    dice_scores: dict[str, float]
    assd_scores: dict[str, float | None]
    assd_undefined: dict[str, int]
    dice_mode: str = "pooled"

    @property
    def seen_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.class_names if n not in self.unseen_names)

    def _mean(self, names: Sequence[str], scores: dict) -> float | None:
        vals = [scores[n] for n in names if scores.get(n) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_dice(self) -> float:
        return self._mean(self.class_names, self.dice_scores)

    @property
    def seen_mean_dice(self) -> float | None:
        return self._mean(self.seen_names, self.dice_scores)

    @property
    def unseen_mean_dice(self) -> float | None:
        return self._mean(self.unseen_names, self.dice_scores)

    @property
    def mean_assd(self) -> float | None:
        return self._mean(self.class_names, self.assd_scores)

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "class_names": list(self.class_names),
            "unseen_names": list(self.unseen_names),
            "dice_scores": self.dice_scores,
            "assd_scores": self.assd_scores,
            "assd_undefined": self.assd_undefined,
            "dice_mode": self.dice_mode,
            "mean_dice": self.mean_dice,
            "seen_mean_dice": self.seen_mean_dice,
            "unseen_mean_dice": self.unseen_mean_dice,
            "mean_assd": self.mean_assd,
        }

    @staticmethod
    def from_dict(d: dict) -> "MetricReport":
        return MetricReport(
            tag=d["tag"],
            class_names=tuple(d["class_names"]),
            unseen_names=tuple(d["unseen_names"]),
            dice_scores=dict(d["dice_scores"]),
            assd_scores=dict(d["assd_scores"]),
            assd_undefined=dict(d["assd_undefined"]),
            dice_mode=d["dice_mode"],
        )


def evaluate(predict: Callable[[np.ndarray], np.ndarray],
             samples: Sequence[LabeledSample],
             unseen_classes, class_names: Sequence[str],
             spacing: tuple[float, float] = (1.0, 1.0),
             dice_mode: str = "pooled",
             tag: str = "") -> MetricReport:
    """Run ``predict`` (image -> class index map) over a fully labeled
    split and aggregate per-class metrics.

    Dice is pooled over pixel counts across the split by default
    (``dice_mode='per_image'`` averages per-image scores instead); ASSD is
    averaged per image, skipping images where it is undefined.
    """
    if len(samples) == 0:
        raise ValueError("empty evaluation split")
    if dice_mode not in ("pooled", "per_image"):
        raise ValueError("dice_mode must be 'pooled' or 'per_image'")
    unseen = sorted(int(c) for c in unseen_classes)
    structures = list(range(1, len(class_names)))

    inter = {c: 0 for c in structures}
    psum = {c: 0 for c in structures}
    gsum = {c: 0 for c in structures}
    per_image_dice = {c: [] for c in structures}
    assd_vals = {c: [] for c in structures}
    assd_skipped = {c: 0 for c in structures}

    for sample in samples:
        pred_idx = np.asarray(predict(sample.image))
        gt_idx = sample.label.index_map
        if pred_idx.shape != gt_idx.shape:
            raise ValueError("prediction shape does not match ground truth")
        for c in structures:
            pm = pred_idx == c
            gm = gt_idx == c
            inter[c] += int(np.logical_and(pm, gm).sum())
            psum[c] += int(pm.sum())
            gsum[c] += int(gm.sum())
            per_image_dice[c].append(dice(pm, gm))
            d = assd(pm, gm, spacing=spacing)
            if d is None:
                assd_skipped[c] += 1
            else:
                assd_vals[c].append(d)

    dice_scores: dict[str, float] = {}
    assd_scores: dict[str, float | None] = {}
    assd_undefined: dict[str, int] = {}
    for c in structures:
        name = class_names[c]
        if dice_mode == "pooled":
            denom = psum[c] + gsum[c]
            dice_scores[name] = 1.0 if denom == 0 else 2.0 * inter[c] / denom
        else:
            dice_scores[name] = float(np.mean(per_image_dice[c]))
        assd_scores[name] = (float(np.mean(assd_vals[c]))
                             if assd_vals[c] else None)
        assd_undefined[name] = assd_skipped[c]

    return MetricReport(
        tag=tag,
        class_names=tuple(class_names[c] for c in structures),
        unseen_names=tuple(class_names[c] for c in unseen),
        dice_scores=dice_scores,
        assd_scores=assd_scores,
        assd_undefined=assd_undefined,
        dice_mode=dice_mode,
    )
