"""Evaluation metrics for binary segmentation maps.

Six scores per frame: Dice and sensitivity on masks binarized at 0.5,
structure similarity (region/object decomposition), mean enhanced-alignment
over a 256-threshold sweep, mean F over the same sweep, and
boundary-weighted F. Conventions follow the metrics' reference MATLAB
releases; edge rules for polyp-free frames are documented per function.

Thresholds are placed strictly inside (0, 1) at (k + 0.5) / 256, so a
prediction identical to its binary target scores exactly 1 on the swept
metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import DataError, IMAGE_EXTENSIONS, load_binary_mask, load_probability_map

_EPS = np.finfo(np.float64).eps

# summary column order used by reports
METRIC_ORDER = ("s_measure", "e_measure", "weighted_f", "f_measure", "sen", "dice")


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if gt.dtype != bool:
        gt = gt > 0.5
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} does not match gt shape {gt.shape}")
    if pred.ndim != 2:
        raise ValueError(f"expected 2D maps, got {pred.ndim}D")
    return pred, gt


def threshold_sweep(n: int = 256) -> np.ndarray:
    return (np.arange(n, dtype=np.float64) + 0.5) / n


def dice(pred, gt, threshold: float = 0.5) -> float:
    """2|P∩G| / (|P| + |G|) with pred binarized at ``threshold``.

    Two empty masks count as a perfect match.
    """
    pred, gt = _check_pair(pred, gt)
    p = pred >= threshold
    denom = p.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (p & gt).sum() / denom)


def sensitivity(pred, gt, threshold: float = 0.5) -> float:
    """|P∩G| / |G|; an empty gt scores 1 only for an empty prediction."""
    pred, gt = _check_pair(pred, gt)
    p = pred >= threshold
    n_gt = gt.sum()
    if n_gt == 0:
        return 1.0 if p.sum() == 0 else 0.0
    return float((p & gt).sum() / n_gt)


# ---------------------------------------------------------------------------
# structure similarity


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = float(values.mean())
    sigma = float(values.std())
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    u = float(gt.mean())
    fg = _object_score(pred[gt])
    bg = _object_score((1.0 - pred)[~gt])
    return u * fg + (1.0 - u) * bg


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _centroid(gt: np.ndarray):
    """1-based (col, row) centroid of the mask, rounded half-up."""
    h, w = gt.shape
    total = gt.sum()
    if total == 0:
        return _round_half_up(w / 2.0), _round_half_up(h / 2.0)
    cols = np.arange(1, w + 1, dtype=np.float64)
    rows = np.arange(1, h + 1, dtype=np.float64)
    x = _round_half_up(float((gt.sum(axis=0) * cols).sum() / total))
    y = _round_half_up(float((gt.sum(axis=1) * rows).sum() / total))
    return x, y


def _ssim_block(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 1.0
    x = float(pred.mean())
    y = float(gt.mean())
    sigma_x = float(((pred - x) ** 2).sum()) / (n - 1 + _EPS)
    sigma_y = float(((gt - y) ** 2).sum()) / (n - 1 + _EPS)
    sigma_xy = float(((pred - x) * (gt - y)).sum()) / (n - 1 + _EPS)
    a = 4.0 * x * y * sigma_xy
    b = (x * x + y * y) * (sigma_x + sigma_y)
    if a != 0.0:
        return a / (b + _EPS)
    if b == 0.0:
        return 1.0
    return 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    area = h * w
    weights = (
        x * y / area,
        (w - x) * y / area,
        x * (h - y) / area,
    )
    weights = weights + (1.0 - sum(weights),)
    gt_f = gt.astype(np.float64)
    quads_gt = (gt_f[:y, :x], gt_f[:y, x:], gt_f[y:, :x], gt_f[y:, x:])
    quads_pred = (pred[:y, :x], pred[:y, x:], pred[y:, :x], pred[y:, x:])
    return sum(wq * _ssim_block(pq, gq)
               for wq, pq, gq in zip(weights, quads_pred, quads_gt))


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure similarity: object and region terms mixed by ``alpha``.

    An all-background gt scores 1 - mean(pred); an all-foreground gt scores
    mean(pred). Negative combined scores clamp to 0.
    """
    pred, gt = _check_pair(pred, gt)
    y = float(gt.mean())
    if y == 0.0:
        return 1.0 - float(pred.mean())
    if y == 1.0:
        return float(pred.mean())
    q = alpha * _s_object(pred, gt) + (1.0 - alpha) * _s_region(pred, gt)
    return max(q, 0.0)


# ---------------------------------------------------------------------------
# enhanced alignment


def _e_measure_binary(pred_bin: np.ndarray, gt: np.ndarray) -> float:
    n = gt.size
    dp = pred_bin.astype(np.float64)
    if not gt.any():
        enhanced = 1.0 - dp
    elif gt.all():
        enhanced = dp
    else:
        dg = gt.astype(np.float64)
        cp = dp - dp.mean()
        cg = dg - dg.mean()
        align = 2.0 * cg * cp / (cg * cg + cp * cp + _EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    score = float(enhanced.sum()) / (n - 1 + _EPS)
    return min(max(score, 0.0), 1.0)


def e_measure_mean(pred, gt, n_thresholds: int = 256) -> float:
    """Enhanced-alignment score averaged over the threshold sweep."""
    pred, gt = _check_pair(pred, gt)
    scores = [_e_measure_binary(pred >= t, gt) for t in threshold_sweep(n_thresholds)]
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# F-measures


def f_measure_mean(pred, gt, beta_sq: float = 0.3, n_thresholds: int = 256) -> float:
    """Precision/recall F with beta^2 weighting, averaged over thresholds.

    A threshold with no true positives scores 0.
    """
    pred, gt = _check_pair(pred, gt)
    n_fg = gt.sum()
    scores = []
    for t in threshold_sweep(n_thresholds):
        p = pred >= t
        tp = (p & gt).sum()
        if tp == 0:
            scores.append(0.0)
            continue
        prec = tp / p.sum()
        rec = tp / n_fg
        scores.append((1.0 + beta_sq) * prec * rec / (beta_sq * prec + rec))
    return float(np.mean(scores))


def _fspecial_gaussian(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    xx, yy = np.meshgrid(ax, ax)
    k = np.exp(-(xx * xx + yy * yy) / (2.0 * sigma * sigma))
    return k / k.sum()


def weighted_f_measure(pred, gt) -> float:
    """Boundary-aware F: errors near the object count less than errors far
    from it, and foreground errors are softened by a local Gaussian blur.

    An empty gt scores 1 for an exactly empty prediction, else 0.
    """
    pred, gt = _check_pair(pred, gt)
    if not gt.any():
        return 1.0 if float(pred.max(initial=0.0)) == 0.0 else 0.0
    dgt = gt.astype(np.float64)
    err = np.abs(pred - dgt)

    # distance to, and index of, the nearest foreground pixel
    dist, idx = ndimage.distance_transform_edt(~gt, return_indices=True)
    et = err.copy()
    bg = ~gt
    et[bg] = err[idx[0][bg], idx[1][bg]]
    ea = ndimage.correlate(et, _fspecial_gaussian(7, 5.0), mode="constant", cval=0.0)
    min_e_ea = err.copy()
    take = gt & (ea < err)
    min_e_ea[take] = ea[take]

    weight = np.ones_like(dgt)
    weight[bg] = 2.0 - np.exp(math.log(0.5) / 5.0 * dist[bg])
    ew = min_e_ea * weight

    tp_w = dgt.sum() - ew[gt].sum()
    fp_w = ew[bg].sum()
    recall = 1.0 - float(ew[gt].mean())
    precision = tp_w / (_EPS + tp_w + fp_w)
    return float(2.0 * recall * precision / (_EPS + recall + precision))


# ---------------------------------------------------------------------------
# aggregation


def evaluate_frame(pred, gt) -> dict:
    """All six scores for one frame, keyed per METRIC_ORDER."""
    return {
        "s_measure": s_measure(pred, gt),
        "e_measure": e_measure_mean(pred, gt),
        "weighted_f": weighted_f_measure(pred, gt),
        "f_measure": f_measure_mean(pred, gt),
        "sen": sensitivity(pred, gt),
        "dice": dice(pred, gt),
    }


@dataclass
class MetricReport:
    frame_ids: list = field(default_factory=list)
    per_frame: dict = field(default_factory=lambda: {m: [] for m in METRIC_ORDER})

    def append(self, frame_id: str, scores: dict) -> None:
        self.frame_ids.append(frame_id)
        for m in METRIC_ORDER:
            self.per_frame[m].append(scores[m])

    def extend(self, other: "MetricReport") -> None:
        for fid, *vals in other.rows():
            self.append(fid, dict(zip(METRIC_ORDER, vals)))

    def __len__(self) -> int:
        return len(self.frame_ids)

    def rows(self):
        for i, fid in enumerate(self.frame_ids):
            yield (fid, *(self.per_frame[m][i] for m in METRIC_ORDER))

    def aggregate(self) -> dict:
        if not self.frame_ids:
            raise ValueError("no frames evaluated")
        return {m: float(np.mean(self.per_frame[m])) for m in METRIC_ORDER}


def evaluate_clip(pred_dir, gt_dir, clip_id: str = "") -> MetricReport:
    """Score every frame of one clip; files are paired by filename stem."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = {p.stem: p for p in pred_dir.iterdir()
             if p.suffix.lower() in IMAGE_EXTENSIONS}
    gts = {p.stem: p for p in gt_dir.iterdir()
           if p.suffix.lower() in IMAGE_EXTENSIONS}
    if not gts:
        raise DataError(f"no mask images in {gt_dir}")
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise DataError(f"no prediction for frame(s) {missing[:3]} of {gt_dir}")
    report = MetricReport()
    for stem in sorted(gts):
        pred = load_probability_map(preds[stem])
        gt = load_binary_mask(gts[stem])
        if pred.shape != gt.shape:
            raise DataError(f"size mismatch on frame {stem}: "
                            f"{pred.shape} vs {gt.shape}")
        frame_id = f"{clip_id}/{stem}" if clip_id else stem
        report.append(frame_id, evaluate_frame(pred, gt))
    return report


def evaluate_tree(pred_root, gt_root, per_clip: bool = False):
    """Walk matching clip folders and aggregate.

    Returns (overall aggregate dict, per-clip {clip_id: aggregate}, full
    MetricReport). With ``per_clip`` the overall aggregate is the mean of
    per-clip means instead of the mean over all frames.
    """
    pred_root, gt_root = Path(pred_root), Path(gt_root)
    gt_clips = sorted(p.name for p in gt_root.iterdir() if p.is_dir())
    combined = MetricReport()
    clip_aggs = {}
    if not gt_clips:
        # flat layout: both roots hold images directly
        report = evaluate_clip(pred_root, gt_root)
        return report.aggregate(), {"": report.aggregate()}, report
    for name in gt_clips:
        pdir = pred_root / name
        if not pdir.is_dir():
            raise DataError(f"no prediction folder for clip {name}")
        report = evaluate_clip(pdir, gt_root / name, clip_id=name)
        clip_aggs[name] = report.aggregate()
        combined.extend(report)
    if per_clip:
        overall = {m: float(np.mean([a[m] for a in clip_aggs.values()]))
                   for m in METRIC_ORDER}
    else:
        overall = combined.aggregate()
    return overall, clip_aggs, combined
