"""Mask, box and score losses, per-query matching cost and Hungarian selection.

Prediction tensors carry ``[..., T, N, ...]`` (frames, then queries); ground
truth carries ``[..., T, ...]``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .tensor import Tensor


class DegenerateTargetError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    dice: float = 5.0
    focal: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    score: float = 2.0
    dice_eps: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    def scaled(self, c: float) -> LossWeights:
        return LossWeights(self.dice * c, self.focal * c, self.l1 * c, self.giou * c, self.score * c,
                           self.dice_eps, self.focal_alpha, self.focal_gamma)


@dataclass
class Prediction:
    """Outputs for one expression: mask logits at gt resolution, boxes, score logits."""

    patch_masks: Tensor   # [..., T, N, H, W]
    opt_masks: Tensor     # [..., T, N, H, W]
    boxes: Tensor         # [..., T, N, 4] normalized cxcywh
    score_logits: Tensor  # [..., T, N]


@dataclass
class GroundTruth:
    masks: np.ndarray    # [..., T, H, W] in {0, 1}
    boxes: np.ndarray    # [..., T, 4] normalized cxcywh
    present: np.ndarray  # [..., T] bool


def dice_loss(logits, target, eps: float = 1.0, axes=None) -> Tensor:
    """1 - (2 sum(p y) + eps) / (sum p + sum y + eps), averaged over non-reduced axes."""
    logits = T.as_tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise T.ShapeError(f"{logits.shape} vs {target.shape}")
    p = T.sigmoid(logits)
    inter = T.tsum(p * target, axis=axes)
    denom = T.tsum(p, axis=axes) + target.sum(axis=axes)
    return T.mean(1.0 - (2.0 * inter + eps) / (denom + eps))


def focal_terms(logits, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Element-wise binary focal loss ``-alpha_t (1 - p_t)^gamma log p_t`` on sigmoid probabilities.

    Evaluated as one fused node with a closed-form derivative; the loss maps
    are large and a chain of primitive nodes dominated training time.
    """
    logits = T.as_tensor(logits)
    z = logits.data
    y = np.asarray(target, dtype=np.float64)
    if y.shape != z.shape:
        y = np.broadcast_to(y, z.shape)
    e = np.exp(-np.abs(z))
    inv = 1.0 / (1.0 + e)
    p = np.where(z >= 0, inv, e * inv)
    # log p_t = y*z - softplus(z) for binary or soft targets
    log_pt = y * z - (np.maximum(z, 0.0) + np.log1p(e))
    q = p * (1.0 - 2.0 * y) + y                      # 1 - p_t
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    q_g = q ** gamma
    value = -alpha_t * q_g * log_pt
    if not T.grad_enabled() or not logits.requires_grad:
        return T.Tensor(value)
    dq = (1.0 - 2.0 * y) * p * (1.0 - p)
    with np.errstate(divide="ignore"):
        dq_g = gamma * q ** (gamma - 1.0) * dq
    deriv = -alpha_t * (dq_g * log_pt + q_g * (y - p))
    return T.elementwise(logits, value, deriv)


def focal_loss(logits, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    return T.mean(focal_terms(logits, target, alpha, gamma))


def cxcywh_to_xyxy(b):
    b = T.as_tensor(b)
    cx, cy, w, h = (b[..., i] for i in range(4))
    return T.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(b):
    b = T.as_tensor(b)
    x0, y0, x1, y1 = (b[..., i] for i in range(4))
    return T.stack([0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0], axis=-1)


def generalized_iou(a, b) -> Tensor:
    """GIoU of paired xyxy boxes ``[..., 4]``."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = T.clip_min(T.minimum(a[..., 2], b[..., 2]) - T.maximum(a[..., 0], b[..., 0]), 0.0)
    ih = T.clip_min(T.minimum(a[..., 3], b[..., 3]) - T.maximum(a[..., 1], b[..., 1]), 0.0)
    inter = iw * ih
    union = area_a + area_b - inter
    ew = T.maximum(a[..., 2], b[..., 2]) - T.minimum(a[..., 0], b[..., 0])
    eh = T.maximum(a[..., 3], b[..., 3]) - T.minimum(a[..., 1], b[..., 1])
    enclosure = ew * eh
    return inter / union - (enclosure - union) / enclosure


def _check_gt_boxes(gt: np.ndarray, valid: np.ndarray | None = None) -> None:
    wh = gt[..., 2:]
    if valid is not None:
        wh = wh[np.asarray(valid, bool)]
    if np.any(wh <= 0):
        raise DegenerateTargetError("ground-truth box has zero width or height")


def box_losses(pred, gt, valid=None) -> tuple[Tensor, Tensor]:
    """(L1 on cxcywh summed over coordinates, 1 - GIoU), averaged over ``valid`` boxes."""
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    _check_gt_boxes(gt, valid)
    l1 = T.tsum(T.absolute(pred - gt), axis=-1)
    giou = 1.0 - generalized_iou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt))
    if valid is None:
        return T.mean(l1), T.mean(giou)
    w = np.asarray(valid, dtype=np.float64)
    n = max(w.sum(), 1.0)
    return T.tsum(l1 * w) * (1.0 / n), T.tsum(giou * w) * (1.0 / n)


def matching_cost(pred: Prediction, gt: GroundTruth, w: LossWeights) -> np.ndarray:
    """Per-query matching cost ``[..., N]`` from patch masks, boxes and scores, frame-averaged."""
    with T.no_grad():
        z = T.as_tensor(pred.patch_masks).data                   # [..., T, N, H, W]
        n = z.shape[-3]
        y = np.asarray(gt.masks, float)[..., None, :, :]
        # dice and focal from one pass over the logits
        e = np.exp(-np.abs(z))
        inv = 1.0 / (1.0 + e)
        p = np.where(z >= 0, inv, e * inv)
        log_pt = y * z - (np.maximum(z, 0.0) + np.log1p(e))
        q = p + y * (1.0 - 2.0 * p)                              # 1 - p_t
        alpha_t = (1.0 - w.focal_alpha) + y * (2.0 * w.focal_alpha - 1.0)
        focal = -(alpha_t * q ** w.focal_gamma * log_pt).mean(axis=(-2, -1))
        inter = (p * y).sum(axis=(-2, -1))
        dice = 1.0 - (2.0 * inter + w.dice_eps) / (p.sum(axis=(-2, -1)) + y.sum(axis=(-2, -1)) + w.dice_eps)
        present = np.asarray(gt.present, bool)
        gt_boxes = np.asarray(gt.boxes, float)
        # absent frames get a dummy unit box; their box terms are masked out below
        safe = np.where(present[..., None], gt_boxes, [0.5, 0.5, 1.0, 1.0])
        _check_gt_boxes(safe)
        safe = np.broadcast_to(safe[..., None, :], pred.boxes.shape)
        l1 = np.abs(pred.boxes.data - safe).sum(axis=-1)
        giou = 1.0 - generalized_iou(cxcywh_to_xyxy(pred.boxes), cxcywh_to_xyxy(safe)).data
        box = (w.l1 * l1 + w.giou * giou) * present[..., None]
        score_t = np.broadcast_to(present[..., None].astype(float), pred.score_logits.shape)
        score = focal_terms(pred.score_logits, score_t, w.focal_alpha, w.focal_gamma).data
        per_frame = w.dice * dice + w.focal * focal + box + w.score * score
        assert per_frame.shape[-1] == n
        return per_frame.mean(axis=-2)


def hungarian_select(cost) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-total-cost one-to-one assignment (rows, cols)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise T.ShapeError("cost must be a matrix")
    if not np.isfinite(cost).all():
        raise ValueError("costs must be finite")
    rows, cols = linear_sum_assignment(cost)
    return rows, cols


def select_query(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick query ``index[b]`` from ``x[B, T, N, ...]`` -> ``[B, T, ...]``."""
    b, t = x.shape[:2]
    idx = (np.arange(b)[:, None], np.arange(t)[None, :], np.asarray(index)[:, None])
    return x[idx]


def total_loss(pred: Prediction, gt: GroundTruth, matched: np.ndarray, w: LossWeights,
               parts: dict | None = None) -> Tensor:
    """Weighted training loss for a batch ``[B, T, N, ...]`` with one matched query per sample.

    Unmatched queries only contribute a score term with target 0. Mask tensors
    that already have the ground-truth layout ``[B, T, H, W]`` are taken as the
    matched queries' masks (this lets callers refine only the matched query).
    Per-term values are written into ``parts`` when given.
    """
    present = np.asarray(gt.present, bool)
    masks = np.asarray(gt.masks, float)

    def pick(x):
        return x if x.ndim == masks.ndim else select_query(x, matched)

    mp = pick(pred.patch_masks)
    mo = pick(pred.opt_masks)
    box = select_query(pred.boxes, matched)
    l_mp_dice = dice_loss(mp, masks, w.dice_eps, axes=(-2, -1))
    l_mp_focal = focal_loss(mp, masks, w.focal_alpha, w.focal_gamma)
    l_mo_dice = dice_loss(mo, masks, w.dice_eps, axes=(-2, -1))
    l_mo_focal = focal_loss(mo, masks, w.focal_alpha, w.focal_gamma)
    safe = np.where(present[..., None], np.asarray(gt.boxes, float), [0.5, 0.5, 1.0, 1.0])
    l1, giou = box_losses(box, safe, valid=present)
    score_t = np.zeros(pred.score_logits.shape)
    b, t = present.shape[:2]
    score_t[np.arange(b)[:, None], np.arange(t)[None, :], np.asarray(matched)[:, None]] = present
    l_score = focal_loss(pred.score_logits, score_t, w.focal_alpha, w.focal_gamma)
    terms = {
        "mask_patch": w.dice * l_mp_dice + w.focal * l_mp_focal,
        "mask_opt": w.dice * l_mo_dice + w.focal * l_mo_focal,
        "box": w.l1 * l1 + w.giou * giou,
        "score": w.score * l_score,
    }
    if parts is not None:
        parts.update({k: v.item() for k, v in terms.items()})
    return terms["mask_patch"] + terms["mask_opt"] + terms["box"] + terms["score"]
