"""Segmentation quality measures and report aggregation.

Implements the five scores used for evaluation: Jaccard, Dice, the
structure measure S_alpha, the weighted F measure F_beta_w, and the mean
enhanced-alignment measure E_phi_mn, plus per-video / dataset aggregation
into CSV and JSON reports.

Conventions: all scores live in [0, 1]; a frame where both prediction and
ground truth are empty scores 1.0 on every measure (correct all-background).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve, distance_transform_edt

METRIC_NAMES = ("Jaccard", "Dice", "S_alpha", "F_beta_w", "E_phi_mn")


def _mean(values) -> float:
    """Exactly rounded mean; invariant to input ordering."""
    vals = list(values)
    return math.fsum(vals) / len(vals)


class MetricInputError(ValueError):
    """Raised on malformed prediction/ground-truth pairs."""


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricInputError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim != 2:
        raise MetricInputError("expected 2-D maps")
    uniq = np.unique(gt)
    if not np.isin(uniq, (0, 1)).all():
        raise MetricInputError("ground truth must be strictly binary")
    return pred, gt.astype(bool)


def jaccard(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """Intersection over union of the binarized prediction against gt."""
    pred, gt = _check_pair(pred, gt)
    p = pred >= threshold
    inter = np.logical_and(p, gt).sum()
    union = np.logical_or(p, gt).sum()
    if union == 0:
        return 1.0
    return float(inter / union)


def dice(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """Dice coefficient 2|A n B| / (|A| + |B|) of the binarized prediction."""
    pred, gt = _check_pair(pred, gt)
    p = pred >= threshold
    inter = np.logical_and(p, gt).sum()
    total = p.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2.0 * inter / total)


# --- structure measure -------------------------------------------------


def _object_score(pred: np.ndarray, region: np.ndarray) -> float:
    if not region.any():
        return 0.0
    vals = pred[region]
    x = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return float(2.0 * x / (x * x + 1.0 + sigma))


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = np.where(gt, pred, 0.0)
    bg = np.where(gt, 0.0, 1.0 - pred)
    u = gt.mean()
    return u * _object_score(fg, gt) + (1.0 - u) * _object_score(bg, ~gt)


def _gt_centroid(gt: np.ndarray) -> tuple[int, int]:
    rows, cols = gt.shape
    total = gt.sum()
    if total == 0:
        return rows // 2, cols // 2
    r_idx, c_idx = np.nonzero(gt)
    return int(round(r_idx.mean())), int(round(c_idx.mean()))


def _region_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 1.0
    x, y = pred.mean(), gt.mean()
    if n > 1:
        sx = ((pred - x) ** 2).sum() / (n - 1)
        sy = ((gt - y) ** 2).sum() / (n - 1)
        sxy = ((pred - x) * (gt - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    num = 4.0 * x * y * sxy
    den = (x * x + y * y) * (sx + sy)
    if den > 0:
        return float(num / den)
    return 1.0 if num == 0 else 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    rows, cols = gt.shape
    cr, cc = _gt_centroid(gt)
    cr = min(max(cr, 1), rows - 1)
    cc = min(max(cc, 1), cols - 1)
    total = 0.0
    area = rows * cols
    for rs, re in ((0, cr), (cr, rows)):
        for cs, ce in ((0, cc), (cc, cols)):
            block_gt = gt[rs:re, cs:ce].astype(np.float64)
            block_pred = pred[rs:re, cs:ce]
            weight = block_gt.size / area
            total += weight * _region_ssim(block_pred, block_gt)
    return total


def s_measure(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.5) -> float:
    """Structure measure: alpha-blend of object- and region-aware similarity."""
    pred, gt = _check_pair(pred, gt)
    if pred.min() < 0 or pred.max() > 1:
        raise MetricInputError("prediction must lie in [0, 1]")
    y = gt.mean()
    if y == 0:  # all-background ground truth: score the emptiness of the prediction
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    score = alpha * _s_object(pred, gt) + (1.0 - alpha) * _s_region(pred, gt)
    return float(min(max(score, 0.0), 1.0))


# --- weighted F measure ------------------------------------------------


def _gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def weighted_f(pred: np.ndarray, gt: np.ndarray, beta: float = 1.0) -> float:
    """Weighted F score with distance-decayed errors outside the object.

    Errors on background pixels are copied from their nearest foreground
    pixel (dependency), smoothed, and weighted by a distance-based importance
    before the precision/recall combination.
    """
    pred, gt = _check_pair(pred, gt)
    if not gt.any():
        return 1.0 if pred.max() < 0.5 else 0.0
    dgt = gt.astype(np.float64)
    err = np.abs(pred - dgt)

    dst, idx = distance_transform_edt(~gt, return_indices=True)
    err_dep = err.copy()
    err_dep[~gt] = err[idx[0][~gt], idx[1][~gt]]
    smoothed = convolve(err_dep, _gaussian_kernel(), mode="constant", cval=0.0)
    min_err = err.copy()
    inside = gt & (smoothed < err)
    min_err[inside] = smoothed[inside]

    importance = np.ones_like(dgt)
    importance[~gt] = 2.0 - np.exp(np.log(0.5) / 5.0 * dst[~gt])
    weighted_err = min_err * importance

    fg_total = dgt.sum()
    tp_w = fg_total - weighted_err[gt].sum()
    fp_w = weighted_err[~gt].sum()
    recall = 1.0 - weighted_err[gt].mean()
    precision = tp_w / (tp_w + fp_w) if (tp_w + fp_w) > 0 else 0.0
    denom = beta * beta * precision + recall
    if denom <= 0:
        return 0.0
    return float((1.0 + beta * beta) * precision * recall / denom)


# --- enhanced-alignment measure ----------------------------------------


def _e_measure_binary(pred_bin: np.ndarray, gt: np.ndarray) -> float:
    dgt = gt.astype(np.float64)
    dfm = pred_bin.astype(np.float64)
    if not gt.any():
        enhanced = 1.0 - dfm
    elif gt.all():
        enhanced = dfm
    else:
        xi_gt = dgt - dgt.mean()
        xi_fm = dfm - dfm.mean()
        denom = xi_gt * xi_gt + xi_fm * xi_fm
        align = np.divide(2.0 * xi_gt * xi_fm, denom, out=np.zeros_like(denom), where=denom > 0)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


def e_measure_mean(pred: np.ndarray, gt: np.ndarray, n_thresholds: int = 256) -> float:
    """Mean enhanced-alignment measure over a sweep of binarization thresholds.

    Thresholds are bin midpoints strictly inside (0, 1), so a binary
    prediction binarizes to itself at every threshold.
    """
    pred, gt = _check_pair(pred, gt)
    if pred.min() < 0 or pred.max() > 1:
        raise MetricInputError("prediction must lie in [0, 1]")
    thresholds = (np.arange(n_thresholds, dtype=np.float64) + 0.5) / n_thresholds
    scores = [_e_measure_binary(pred >= t, gt) for t in thresholds]
    return float(np.mean(scores))


def all_metrics(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """All five scores for a single prediction / ground-truth pair."""
    return {
        "Jaccard": jaccard(pred, gt),
        "Dice": dice(pred, gt),
        "S_alpha": s_measure(pred, gt),
        "F_beta_w": weighted_f(pred, gt),
        "E_phi_mn": e_measure_mean(pred, gt),
    }


# --- aggregation --------------------------------------------------------


@dataclass
class FrameScores:
    video_id: str
    frame_index: int
    per_class: dict[int, dict[str, float]]

    def class_mean(self) -> dict[str, float]:
        return {name: _mean(vals[name] for vals in self.per_class.values()) for name in METRIC_NAMES}


@dataclass
class MetricsReport:
    per_video: dict[str, dict[str, float]]
    per_video_class: dict[str, dict[int, dict[str, float]]]
    mean: dict[str, float]
    mean_per_class: dict[int, dict[str, float]]
    class_ids: tuple[int, ...] = field(default_factory=tuple)

    def to_json(self) -> str:
        payload = {
            "mean": self.mean,
            "mean_per_class": {str(k): v for k, v in self.mean_per_class.items()},
            "per_video": self.per_video,
            "per_video_class": {
                vid: {str(k): v for k, v in cls.items()}
                for vid, cls in self.per_video_class.items()
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["video", *METRIC_NAMES])
        for vid in sorted(self.per_video):
            row = self.per_video[vid]
            writer.writerow([vid, *(f"{row[name]:.6f}" for name in METRIC_NAMES)])
        writer.writerow(["mean", *(f"{self.mean[name]:.6f}" for name in METRIC_NAMES)])
        return buf.getvalue()


def score_frame(
    pred_mask: np.ndarray,
    gt_mask: np.ndarray,
    video_id: str,
    frame_index: int,
    class_ids: tuple[int, ...] = (1, 2),
    probabilities: np.ndarray | None = None,
) -> FrameScores:
    """Score one multi-class frame per class.

    ``pred_mask``/``gt_mask`` hold integer class labels; ``probabilities``
    optionally supplies per-class soft maps (class-indexed on axis 0) used
    for the threshold-sweep measures.
    """
    per_class: dict[int, dict[str, float]] = {}
    for cls in class_ids:
        gt_bin = (gt_mask == cls).astype(np.uint8)
        if probabilities is not None:
            pred_map = np.clip(probabilities[cls], 0.0, 1.0)
        else:
            pred_map = (pred_mask == cls).astype(np.float64)
        per_class[cls] = all_metrics(pred_map, gt_bin)
    return FrameScores(video_id=video_id, frame_index=frame_index, per_class=per_class)


def aggregate(frames: list[FrameScores]) -> MetricsReport:
    """Per-video means of per-frame class-averaged scores, then dataset mean.

    Frame order within a video does not affect the result; the dataset mean
    weights every video equally.
    """
    if not frames:
        raise MetricInputError("cannot aggregate an empty score list")
    class_ids = tuple(sorted(frames[0].per_class))
    by_video: dict[str, list[FrameScores]] = {}
    for fs in frames:
        by_video.setdefault(fs.video_id, []).append(fs)

    per_video: dict[str, dict[str, float]] = {}
    per_video_class: dict[str, dict[int, dict[str, float]]] = {}
    for vid in sorted(by_video):
        rows = by_video[vid]
        per_video[vid] = {
            name: _mean(fs.class_mean()[name] for fs in rows) for name in METRIC_NAMES
        }
        per_video_class[vid] = {
            cls: {
                name: _mean(fs.per_class[cls][name] for fs in rows) for name in METRIC_NAMES
            }
            for cls in class_ids
        }

    mean = {
        name: _mean(per_video[vid][name] for vid in per_video) for name in METRIC_NAMES
    }
    mean_per_class = {
        cls: {
            name: _mean(per_video_class[vid][cls][name] for vid in per_video_class)
            for name in METRIC_NAMES
        }
        for cls in class_ids
    }
    return MetricsReport(
        per_video=per_video,
        per_video_class=per_video_class,
        mean=mean,
        mean_per_class=mean_per_class,
        class_ids=class_ids,
    )
