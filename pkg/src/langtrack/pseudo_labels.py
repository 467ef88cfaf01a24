"""Initial-frame pseudo-box providers.

The tracking pipeline never sees ground truth directly: it asks a provider
for the frame-0 box of each clip.  The noisy synthetic oracle perturbs the
known ground truth (center/scale noise plus occasional gross failures),
standing in for an external grounding model; the file provider replays
boxes produced offline.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .formats import parse_label_file
from .heads_losses import Box

MIN_SIDE = 0.01
GROSS_IOU_CEILING = 0.1


def _plain_iou(a, b):
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


@dataclass
class NoiseSpec:
    """Center noise as a fraction of box size; scale noise multiplicative."""

    sigma_center: float = 0.05
    sigma_scale: float = 0.1
    p_gross: float = 0.05


class NoisyOracleProvider:
    """Ground truth + seeded noise; deterministic per (clip id, seed)."""

    provider_id = "oracle"

    def __init__(self, noise=None, seed=0):
        self.noise = noise or NoiseSpec()
        self.seed = seed
        self.calls = 0

    def _rng(self, clip_id):
        tag = zlib.crc32(clip_id.encode("utf-8"))
        return np.random.default_rng(np.random.SeedSequence([self.seed & 0xFFFFFFFF, tag]))

    def _gross_box(self, rng, gt):
        for _ in range(100):
            cand = Box(
                float(rng.uniform(0.1, 0.9)),
                float(rng.uniform(0.1, 0.9)),
                gt.w,
                gt.h,
            ).clipped()
            if _plain_iou(cand, gt) < GROSS_IOU_CEILING:
                return cand
        # farthest corner fallback (large boxes on a small canvas)
        cx = 0.12 if gt.cx > 0.5 else 0.88
        cy = 0.12 if gt.cy > 0.5 else 0.88
        return Box(cx, cy, min(gt.w, 0.2), min(gt.h, 0.2)).clipped()

    def provide(self, clip, query):
        self.calls += 1
        if not clip.gt_boxes:
            raise DataError(f"clip {clip.clip_id}: no ground truth for the oracle")
        gt = clip.gt_boxes[0]
        rng = self._rng(clip.clip_id)
        gross = rng.uniform() < self.noise.p_gross
        dx = rng.normal(0.0, 1.0) * self.noise.sigma_center * gt.w
        dy = rng.normal(0.0, 1.0) * self.noise.sigma_center * gt.h
        sw = 1.0 + rng.normal(0.0, 1.0) * self.noise.sigma_scale
        sh = 1.0 + rng.normal(0.0, 1.0) * self.noise.sigma_scale
        if gross:
            return self._gross_box(rng, gt)
        return Box(
            min(max(gt.cx + dx, 0.0), 1.0),
            min(max(gt.cy + dy, 0.0), 1.0),
            max(gt.w * sw, MIN_SIDE),
            max(gt.h * sh, MIN_SIDE),
        ).clipped()


class FilePseudoLabelProvider:
    """Replays offline-produced boxes keyed by clip id."""

    provider_id = "file"

    def __init__(self, path):
        self.path = path
        self.table = parse_label_file(path)
        self.calls = 0

    def provide(self, clip, query):
        self.calls += 1
        box = self.table.get(clip.clip_id)
        if box is None:
            raise DataError(f"label file {self.path}: no record for clip {clip.clip_id!r}")
        return box
