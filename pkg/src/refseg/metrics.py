"""Region/contour accuracy, IoU aggregates, mAP and a feature drift ratio."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage


class UndefinedMetricError(ValueError):
    pass


@dataclass
class MaskPair:
    pred: np.ndarray
    gt: np.ndarray
    video: str = "0"
    obj: str = "0"

    def __post_init__(self):
        self.pred = np.asarray(self.pred).astype(bool)
        self.gt = np.asarray(self.gt).astype(bool)
        if self.pred.shape != self.gt.shape:
            raise ValueError(f"mask shapes differ: {self.pred.shape} vs {self.gt.shape}")


def _pair(pair_or_pred, gt=None) -> MaskPair:
    if isinstance(pair_or_pred, MaskPair):
        return pair_or_pred
    return MaskPair(pair_or_pred, gt)


def region_j(pair, gt=None) -> float:
    """|P & G| / |P | G|, 1 when both masks are empty."""
    p = _pair(pair, gt)
    union = np.logical_or(p.pred, p.gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p.pred, p.gt).sum() / union)


def boundary_map(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (image border counts as outside)."""
    m = np.asarray(mask, bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def default_tolerance(shape) -> int:
    """Boundary match radius: 0.8% of the image diagonal, rounded up as in the DAVIS toolkit."""
    return max(1, int(np.ceil(0.008 * float(np.hypot(*shape)))))


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def boundary_f(pair, gt=None, tol: int | None = None) -> float:
    """Boundary F-measure with dilation-based matching within ``tol`` pixels."""
    p = _pair(pair, gt)
    if tol is None:
        tol = default_tolerance(p.gt.shape)
    bp, bg = boundary_map(p.pred), boundary_map(p.gt)
    n_p, n_g = bp.sum(), bg.sum()
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    fp = _disk(tol)
    gt_dil = ndimage.binary_dilation(bg, structure=fp)
    pred_dil = ndimage.binary_dilation(bp, structure=fp)
    precision = (bp & gt_dil).sum() / n_p
    recall = (bg & pred_dil).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def _require(pairs) -> list[MaskPair]:
    pairs = [_pair(p) for p in pairs]
    if not pairs:
        raise UndefinedMetricError("no samples")
    return pairs


def jf_scores(pairs: Iterable[MaskPair], tol: int | None = None) -> dict[str, float]:
    """J, F and J&F averaged per object, then per video, then over videos."""
    pairs = _require(pairs)
    per_obj: dict[tuple[str, str], list[tuple[float, float]]] = defaultdict(list)
    for p in pairs:
        per_obj[(p.video, p.obj)].append((region_j(p), boundary_f(p, tol=tol)))
    per_video: dict[str, list[np.ndarray]] = defaultdict(list)
    for (video, _), vals in sorted(per_obj.items()):
        per_video[video].append(np.mean(vals, axis=0))
    video_means = np.array([np.mean(v, axis=0) for _, v in sorted(per_video.items())])
    j, f = video_means.mean(axis=0)
    return {"J": float(j), "F": float(f), "JF": float((j + f) / 2)}


def jf_mean(pairs: Iterable[MaskPair], tol: int | None = None) -> float:
    return jf_scores(pairs, tol)["JF"]


def overall_iou(pairs: Iterable[MaskPair]) -> float:
    """Pooled intersection over pooled union."""
    pairs = _require(pairs)
    inter = sum(int(np.logical_and(p.pred, p.gt).sum()) for p in pairs)
    union = sum(int(np.logical_or(p.pred, p.gt).sum()) for p in pairs)
    return 1.0 if union == 0 else inter / union


def mean_iou(pairs: Iterable[MaskPair]) -> float:
    pairs = _require(pairs)
    return float(np.mean([region_j(p) for p in pairs]))


IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)


def average_precision(scores: Sequence[float], hits: Sequence[bool], n_gt: int) -> float:
    """Area under the interpolated precision-recall curve of score-ranked hits."""
    order = np.argsort(-np.asarray(scores, float), kind="stable")
    tp = np.asarray(hits, bool)[order].astype(float)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    # monotone envelope from the right, then integrate over recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def map_at_thresholds(preds: Sequence[tuple[np.ndarray, float]], gts: Sequence[np.ndarray],
                      thresholds=IOU_THRESHOLDS) -> float:
    """Mean over IoU thresholds of AP; prediction ``i`` is paired with ground truth ``i``.

    Ground truths with an empty mask are not counted as positives.
    """
    if len(gts) == 0:
        raise UndefinedMetricError("mAP needs at least one ground truth")
    if len(preds) != len(gts):
        raise ValueError("one prediction per ground truth expected")
    n_gt = sum(bool(np.asarray(g).any()) for g in gts)
    if n_gt == 0:
        raise UndefinedMetricError("all ground truths are empty")
    ious = [region_j(MaskPair(m, g)) if np.asarray(g).any() else 0.0 for (m, _), g in zip(preds, gts)]
    scores = [s for _, s in preds]
    aps = [average_precision(scores, [iou >= t for iou in ious], n_gt) for t in thresholds]
    return float(np.mean(aps))


def drift_score(a, b) -> float:
    """Centroid distance between token sets over their mean per-dimension spread."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("token sets must be [n, C] with equal widths")
    if len(a) < 2 or len(b) < 2:
        raise UndefinedMetricError("spread is undefined for fewer than two tokens")

    def spread(x):
        return np.sqrt(np.mean(np.var(x, axis=0, ddof=1)))

    denom = 0.5 * (spread(a) + spread(b))
    gap = np.linalg.norm(a.mean(axis=0) - b.mean(axis=0))
    if denom == 0:
        return 0.0 if gap == 0 else float("inf")
    return float(gap / denom)
