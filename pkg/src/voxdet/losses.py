"""Training-objective terms and their weighted stage compositions.

Pure functions evaluated for verification, not training. Classification
terms run over all points; IoU, rotation, and flip terms only over
foreground points, and an empty foreground contributes zero. Reduction over
points is the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossWeights:
    """Stage-loss term weights; the defaults are alpha=2, beta=gamma=0.5."""

    alpha: float = 2.0
    beta: float = 0.5
    gamma: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TargetAssignment:
    """Per-point foreground flags plus one ground-truth box per foreground point.

    Which box a foreground point regresses against is an explicit input here,
    not the result of a built-in matcher.
    """

    foreground: np.ndarray  # (N,) bool
    gt_boxes: np.ndarray  # (F, 7), F == foreground.sum()

    def __post_init__(self):
        fg = np.asarray(self.foreground, dtype=bool)
        gt = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 7)
        if fg.sum() != len(gt):
            raise ValueError("need exactly one ground-truth box per foreground point")
        object.__setattr__(self, "foreground", fg)
        object.__setattr__(self, "gt_boxes", gt)


def _softplus(x):
    # stable log(1 + e^x)
    return np.logaddexp(0.0, x)


def _bce_with_logit(logit, target):
    return _softplus(logit) - target * logit


def focal_loss(logit, target, gamma: float = 2.0, alpha: float = 0.25):
    """Focal loss -alpha_t (1 - p_t)^gamma log(p_t) on a logit.

    target is 0 or 1; alpha weights the positive class and (1 - alpha) the
    negative class. The log is clamped at 1e-12.
    """
    logit = np.asarray(logit, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-logit))
    p_t = np.where(target > 0.5, p, 1.0 - p)
    a_t = np.where(target > 0.5, alpha, 1.0 - alpha)
    out = -a_t * (1.0 - p_t) ** gamma * np.log(np.maximum(p_t, 1e-12))
    return out if out.ndim else float(out)


def smooth_l1(x):
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return out if out.ndim else float(out)


def rot_loss(r_p, r_g):
    """smooth-L1 of sin(r_p - r_g); blind to pi flips, hence flip_loss."""
    r_p = np.asarray(r_p, dtype=np.float64)
    r_g = np.asarray(r_g, dtype=np.float64)
    out = smooth_l1(np.sin(r_p - r_g))
    return out if np.ndim(out) else float(out)


def flip_loss(flip_logit, r_p, r_g):
    """Binary cross-entropy on whether the box should rotate by 180 degrees.

    The positive label is cos(r_p - r_g) < 0, i.e. the predicted heading
    points more than 90 degrees away from the ground truth.
    """
    flip_logit = np.asarray(flip_logit, dtype=np.float64)
    label = (np.cos(np.asarray(r_p, dtype=np.float64) - np.asarray(r_g, dtype=np.float64)) < 0.0).astype(
        np.float64
    )
    out = _bce_with_logit(flip_logit, label)
    return out if out.ndim else float(out)


def conf_loss(conf_logit, iou_with_gt, lo: float = 0.25, hi: float = 0.75):
    """Binary cross-entropy against the IoU-guided soft target
    clamp((iou - lo) / (hi - lo), 0, 1); defaults give 2*iou - 0.5."""
    conf_logit = np.asarray(conf_logit, dtype=np.float64)
    iou = np.asarray(iou_with_gt, dtype=np.float64)
    if np.any(iou < 0.0) or np.any(iou > 1.0):
        raise ValueError("iou_with_gt must lie in [0, 1]")
    t = np.clip((iou - lo) / (hi - lo), 0.0, 1.0)
    out = _bce_with_logit(conf_logit, t)
    return out if out.ndim else float(out)


def _mean_or_zero(terms) -> float:
    terms = np.asarray(terms, dtype=np.float64).ravel()
    return float(terms.mean()) if len(terms) else 0.0


def stage1_loss(cls_terms, iou_terms, rot_terms, weights: LossWeights = LossWeights()) -> float:
    """mean(cls) + alpha * mean(iou) + beta * mean(rot).

    cls_terms run over every point; iou/rot over foreground points only and
    contribute zero when there is no foreground.
    """
    return (
        _mean_or_zero(cls_terms)
        + weights.alpha * _mean_or_zero(iou_terms)
        + weights.beta * _mean_or_zero(rot_terms)
    )


def stage2_loss(
    conf_terms, iou_terms, rot_terms, flip_terms, weights: LossWeights = LossWeights()
) -> float:
    """mean(conf) + alpha * mean(iou) + beta * mean(rot) + gamma * mean(flip)."""
    return (
        _mean_or_zero(conf_terms)
        + weights.alpha * _mean_or_zero(iou_terms)
        + weights.beta * _mean_or_zero(rot_terms)
        + weights.gamma * _mean_or_zero(flip_terms)
    )


def evaluate_assignment(data: dict) -> dict:
    """Evaluate all loss terms on an explicit assignment.

    Expected keys: cls_logits + cls_targets over all points; pred_boxes +
    gt_boxes as row-aligned 7-tuples for the foreground points; optionally
    flip_logits and conf_logits (per foreground point) and a weights mapping
    {alpha, beta, gamma}. Returns per-term means and stage totals.
    """
    from voxdet.geometry import OrientedBox
    from voxdet.iou import iou3d

    w = LossWeights(**data.get("weights", {}))
    cls_terms = focal_loss(
        np.asarray(data.get("cls_logits", []), dtype=np.float64),
        np.asarray(data.get("cls_targets", []), dtype=np.float64),
    )
    pred = np.asarray(data.get("pred_boxes", []), dtype=np.float64).reshape(-1, 7)
    gt = np.asarray(data.get("gt_boxes", []), dtype=np.float64).reshape(-1, 7)
    if len(pred) != len(gt):
        raise ValueError("pred_boxes and gt_boxes must pair up row for row")
    ious = np.array([iou3d(OrientedBox(*p), OrientedBox(*g)).iou3d for p, g in zip(pred, gt)])
    iou_terms = 1.0 - ious
    rot_terms = rot_loss(pred[:, 6], gt[:, 6]) if len(pred) else np.zeros(0)
    out = {
        "cls_loss": _mean_or_zero(cls_terms),
        "iou_loss": _mean_or_zero(iou_terms),
        "rot_loss": _mean_or_zero(rot_terms),
        "stage1_loss": stage1_loss(cls_terms, iou_terms, rot_terms, w),
        "n_points": int(np.size(data.get("cls_logits", []))),
        "n_foreground": int(len(pred)),
    }
    if "conf_logits" in data:
        conf_terms = conf_loss(np.asarray(data["conf_logits"], dtype=np.float64), ious)
        flip_terms = (
            flip_loss(np.asarray(data["flip_logits"], dtype=np.float64), pred[:, 6], gt[:, 6])
            if "flip_logits" in data
            else np.zeros(0)
        )
        out["conf_loss"] = _mean_or_zero(conf_terms)
        out["flip_loss"] = _mean_or_zero(flip_terms)
        out["stage2_loss"] = stage2_loss(conf_terms, iou_terms, rot_terms, flip_terms, w)
    return out
