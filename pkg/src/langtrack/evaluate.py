"""One-pass evaluation: per-frame overlap/error metrics, success and
precision curves, and the clip-balanced aggregate report.

Success uses strict inequality (IoU > threshold), which caps perfect AUC
at 20/21 on the 21-point grid.  Frames are pooled per clip first; the
aggregate averages per-clip curves, so the aggregate AUC equals the mean
of per-clip AUCs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, LangTrackError

log = logging.getLogger(__name__)

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 101)


def iou(a, b):
    """Intersection over union; degenerate extents score 0 with a warning."""
    if min(a.w, a.h, b.w, b.h) <= 0.0:
        log.warning("degenerate box in iou; scoring 0")
        return 0.0
    ax1, ay1 = a.cx - a.w / 2.0, a.cy - a.h / 2.0
    ax2, ay2 = a.cx + a.w / 2.0, a.cy + a.h / 2.0
    bx1, by1 = b.cx - b.w / 2.0, b.cy - b.h / 2.0
    bx2, by2 = b.cx + b.w / 2.0, b.cy + b.h / 2.0
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    if union <= 0.0:
        return 0.0
    # corner arithmetic can overshoot 1 by an ulp for identical boxes
    return min(max(inter / union, 0.0), 1.0)


def center_errors(pred, gt, frame_size):
    """(pixel distance, per-axis gt-size-normalized distance)."""
    dx, dy = pred.cx - gt.cx, pred.cy - gt.cy
    pixels = float(np.hypot(dx * frame_size, dy * frame_size))
    normalized = float(np.hypot(dx / gt.w, dy / gt.h))
    return pixels, normalized


@dataclass
class EvalCurves:
    success: np.ndarray
    precision: np.ndarray
    norm_precision: np.ndarray
    auc: float
    p20: float
    pnorm02: float
    success_thresholds: np.ndarray = field(default_factory=lambda: SUCCESS_THRESHOLDS.copy())
    precision_thresholds: np.ndarray = field(default_factory=lambda: PRECISION_THRESHOLDS.copy())
    norm_thresholds: np.ndarray = field(default_factory=lambda: NORM_PRECISION_THRESHOLDS.copy())


def curves_and_auc(ious, center_err_px, norm_center_err):
    """Success/precision curves over the fixed threshold grids."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise DataError("curves_and_auc: no frames to evaluate")
    px = np.asarray(center_err_px, dtype=np.float64)
    nrm = np.asarray(norm_center_err, dtype=np.float64)
    success = np.array([(ious > t).mean() for t in SUCCESS_THRESHOLDS])
    precision = np.array([(px <= t).mean() for t in PRECISION_THRESHOLDS])
    norm_precision = np.array([(nrm <= t).mean() for t in NORM_PRECISION_THRESHOLDS])
    return EvalCurves(
        success=success,
        precision=precision,
        norm_precision=norm_precision,
        auc=float(success.mean()),
        p20=float(precision[20]),
        pnorm02=float(norm_precision[40]),
    )


@dataclass
class TrackResult:
    """Per-clip evaluation record."""

    clip_id: str
    pred_boxes: list
    gt_boxes: list
    ious: np.ndarray
    center_err_px: np.ndarray
    norm_center_err: np.ndarray
    curves: EvalCurves

    @property
    def auc(self):
        return self.curves.auc

    @property
    def p20(self):
        return self.curves.p20

    @property
    def pnorm02(self):
        return self.curves.pnorm02

    @property
    def mean_iou(self):
        return float(self.ious.mean())


def score_clip(clip, pred_boxes):
    frame_size = clip.frames.shape[1]
    ious, px, nrm = [], [], []
    for pred, gt in zip(pred_boxes, clip.gt_boxes):
        if pred is None:
            ious.append(0.0)
            diag = float(np.hypot(frame_size, frame_size))
            px.append(diag)
            nrm.append(diag)
            continue
        ious.append(iou(pred, gt))
        p, n = center_errors(pred, gt, frame_size)
        px.append(p)
        nrm.append(n)
    ious = np.array(ious)
    px = np.array(px)
    nrm = np.array(nrm)
    return TrackResult(
        clip_id=clip.clip_id,
        pred_boxes=list(pred_boxes),
        gt_boxes=list(clip.gt_boxes),
        ious=ious,
        center_err_px=px,
        norm_center_err=nrm,
        curves=curves_and_auc(ious, px, nrm),
    )


def aggregate_results(results):
    """Clip-balanced aggregation: average the per-clip curves and scores."""
    if not results:
        raise DataError("aggregate_results: no clips evaluated")
    curves = EvalCurves(
        success=np.mean([r.curves.success for r in results], axis=0),
        precision=np.mean([r.curves.precision for r in results], axis=0),
        norm_precision=np.mean([r.curves.norm_precision for r in results], axis=0),
        auc=float(np.mean([r.auc for r in results])),
        p20=float(np.mean([r.p20 for r in results])),
        pnorm02=float(np.mean([r.pnorm02 for r in results])),
    )
    summary = {
        "auc": curves.auc,
        "p20": curves.p20,
        "pnorm02": curves.pnorm02,
        "mean_iou": float(np.mean([r.mean_iou for r in results])),
        "clips": len(results),
    }
    return summary, curves


def run_ope(tracker, clips, provider, init_mode="language"):
    """One-pass evaluation over full clips.

    ``language`` mode initializes from the provider's pseudo box;
    ``box`` mode hands the tracker the ground-truth frame-0 box (the
    provider is never consulted).  A provider failure scores the clip with
    zero-IoU frames rather than aborting the run.
    """
    if init_mode not in ("language", "box"):
        raise DataError(f"unknown init mode {init_mode!r}")
    results = []
    for clip in clips:
        if init_mode == "box":
            b0 = clip.gt_boxes[0]
        else:
            try:
                b0 = provider.provide(clip, clip.query)
            except LangTrackError as exc:
                log.warning("provider failed on %s: %s", clip.clip_id, exc)
                b0 = None
        if b0 is None:
            preds = [None] * clip.length
        else:
            preds = tracker.track(clip, b0)
        results.append(score_clip(clip, preds))
    summary, curves = aggregate_results(results)
    return results, summary, curves
