"""Weak-to-strong consistency training: view preparation, forward and cycle
tracking over a clip, noise filtering, and the per-step/per-epoch loops.

The weak view of a sample is the teacher: it runs without gradient
recording, and its decoded boxes (as Gaussian heatmap targets and
regression targets) supervise the strong view frame by frame.  Both views
share the same crop geometry so their score maps are cell-aligned; only
photometrics differ.  The supervised split is the strong init-frame loss
against the pseudo box plus the cycle (backward-tracking) terminal loss;
the unsupervised split is the denoise-filtered consistency losses.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dta import propagate_prompts
from .encoders import tokenize_language
from .errors import BoxError, DataError, NumericError, ShapeMismatchError
from .heads_losses import (
    Box,
    combine_losses,
    decode_box,
    frame_loss,
    gaussian_target,
)

log = logging.getLogger(__name__)

MIN_TEMPLATE_SIDE = 0.015  # crops thinner than this are degenerate


# ---------------------------------------------------------------------------
# image sampling (plain numpy; views are data, not graph nodes)


def sample_window(frame, x0, y0, side, out_size):
    """Bilinear crop+resize of a square window; clamped at frame borders."""
    h, w = frame.shape[:2]
    src = frame.astype(np.float64) if frame.dtype == np.uint8 else frame
    xs = x0 + (np.arange(out_size) + 0.5) * side / out_size - 0.5
    ys = y0 + (np.arange(out_size) + 0.5) * side / out_size - 0.5
    x0i = np.clip(np.floor(xs).astype(np.intp), 0, w - 1)
    y0i = np.clip(np.floor(ys).astype(np.intp), 0, h - 1)
    x1i = np.minimum(x0i + 1, w - 1)
    y1i = np.minimum(y0i + 1, h - 1)
    fx = np.clip(xs - x0i, 0.0, 1.0)[None, :, None]
    fy = np.clip(ys - y0i, 0.0, 1.0)[:, None, None]
    top = src[y0i[:, None], x0i] * (1 - fx) + src[y0i[:, None], x1i] * fx
    bot = src[y1i[:, None], x0i] * (1 - fx) + src[y1i[:, None], x1i] * fx
    return top * (1 - fy) + bot * fy


def resize_frame(frame, out_size):
    return sample_window(frame, 0.0, 0.0, frame.shape[0], out_size)


def crop_box_region(view, box, out_size, context=1.0):
    """Square crop around the box (side = max extent x context), resized.

    ``context`` > 1 keeps surround in the template so the object boundary
    stays visible.
    """
    if box.w < MIN_TEMPLATE_SIDE or box.h < MIN_TEMPLATE_SIDE:
        raise BoxError(f"template box too small to crop: {box}")
    size = view.shape[0]
    side = max(box.w, box.h) * size * context
    x0 = box.cx * size - side / 2.0
    y0 = box.cy * size - side / 2.0
    return sample_window(view, x0, y0, side, out_size)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentDraw:
    """Concrete jitter amounts for one frame; geometry is shared per sample."""

    dx: float = 0.0
    dy: float = 0.0
    scale: float = 0.0
    brightness: float = 0.0
    contrast: float = 0.0
    mix: float = 0.0
    grayscale: bool = False
    photometric: bool = False


def draw_augment(spec, rng, strong=False):
    draw = AugmentDraw(
        dx=float(rng.uniform(-spec.center_jitter, spec.center_jitter)),
        dy=float(rng.uniform(-spec.center_jitter, spec.center_jitter)),
        scale=float(rng.uniform(-spec.scale_jitter, spec.scale_jitter)),
    )
    if strong:
        draw.photometric = True
        draw.brightness = float(rng.uniform(-spec.brightness, spec.brightness))
        draw.contrast = float(rng.uniform(-spec.contrast, spec.contrast))
        draw.mix = float(rng.uniform(0.0, spec.channel_mix))
        draw.grayscale = bool(rng.uniform() < spec.grayscale_prob)
    return draw


def _window_geometry(frame_side, draw):
    side = min(frame_side * (1.0 + draw.scale), float(frame_side))
    cx = frame_side / 2.0 + draw.dx * side
    cy = frame_side / 2.0 + draw.dy * side
    x0 = min(max(cx - side / 2.0, 0.0), frame_side - side)
    y0 = min(max(cy - side / 2.0, 0.0), frame_side - side)
    return x0, y0, side


def _map_box_through_window(box, frame_side, x0, y0, side, out_floor=0.01):
    if x0 == 0.0 and y0 == 0.0 and side == frame_side:
        return box.clipped()
    cx = (box.cx * frame_side - x0) / side
    cy = (box.cy * frame_side - y0) / side
    w = box.w * frame_side / side
    h = box.h * frame_side / side
    mapped = Box(
        min(max(cx, 0.0), 1.0),
        min(max(cy, 0.0), 1.0),
        max(w, out_floor),
        max(h, out_floor),
    )
    return mapped.clipped()


def apply_photometrics(view, draw):
    out = view * (1.0 + draw.brightness)
    mean = out.mean(axis=(0, 1), keepdims=True)
    out = (out - mean) * (1.0 + draw.contrast) + mean
    if draw.mix > 0.0:
        out = (1.0 - draw.mix) * out + draw.mix * out[:, :, (1, 2, 0)]
    if draw.grayscale:
        out = np.repeat(out.mean(axis=2, keepdims=True), 3, axis=2)
    return np.clip(out, 0.0, 255.0)


def apply_augment(frame, box, draw, out_size):
    """Jittered-window view of a square frame plus the box mapped along."""
    frame_side = frame.shape[0]
    x0, y0, side = _window_geometry(frame_side, draw)
    view = sample_window(frame, x0, y0, side, out_size)
    if draw.photometric:
        view = apply_photometrics(view, draw)
    mapped = None
    if box is not None:
        mapped = _map_box_through_window(box, frame_side, x0, y0, side)
    return view, mapped


def augment(frame, box, spec, rng, strong=False, out_size=None):
    """Draw-and-apply convenience wrapper for a single frame."""
    draw = draw_augment(spec, rng, strong=strong)
    return apply_augment(frame, box, draw, out_size or frame.shape[0])


# ---------------------------------------------------------------------------
# tracking passes


@dataclass
class FramePrediction:
    frame_index: int
    maps: object
    box: Box
    selection: object = None  # final-layer LayerSelections when available


def forward_track(model, view_frames, query, init_box, collect_selections=False):
    """Track a prepared view clip: init self-pass, then frame-by-frame passes.

    The init pass (t=0) crops its own template from the pseudo/init box and
    predicts over the same frame; it does not emit temporal prompts, so
    prompts first appear in the t=2 sequence.
    """
    template = crop_box_region(
        view_frames[0], init_box, model.cfg.template_size, model.cfg.template_context
    )
    prompts = None
    preds = []
    for t, frame in enumerate(view_frames):
        maps, enc = model.forward_frame(query, template, frame, prompts if t >= 1 else None)
        pred = FramePrediction(
            frame_index=t,
            maps=maps,
            box=decode_box(maps),
            selection=enc.selections[-1] if (collect_selections and enc.selections) else None,
        )
        preds.append(pred)
        if t >= 1 and enc.t_s is not None:
            prompts = propagate_prompts(enc.t_s)
    return preds


def backward_track(model, strong_frames, weak_frames, query, terminal_box, init_target, cfg):
    """Cycle pass: template from the weak terminal prediction, frames reversed.

    Returns the supervised terminal entry (frame-0 prediction vs the pseudo
    box) or None when the terminal box is too degenerate to crop.
    """
    try:
        template = crop_box_region(
            weak_frames[-1], terminal_box, model.cfg.template_size,
            model.cfg.template_context,
        )
    except BoxError as exc:
        log.warning("skipping backward pass: %s", exc)
        return None
    prompts = None
    maps = None
    order = range(len(strong_frames) - 2, -1, -1)
    for j, t in enumerate(order):
        maps, enc = model.forward_frame(query, template, strong_frames[t], prompts if j >= 1 else None)
        if enc.t_s is not None:
            prompts = propagate_prompts(enc.t_s)
    if maps is None:
        return None
    return frame_loss(
        maps,
        init_target,
        gaussian_target(init_target, model.cfg.grid),
        cfg.lam1,
        cfg.lam2,
        frame_index=0,
        tag="supervised",
    )


# ---------------------------------------------------------------------------
# noise scoring and filtering


def map_distance(p_c, g_map):
    """Squared Euclidean distance between a score map and a target map."""
    p = p_c.data if isinstance(p_c, T.Tensor) else np.asarray(p_c)
    g = np.asarray(g_map)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"map_distance: {p.shape} vs {g.shape}")
    diff = p.astype(np.float64) - g
    return float((diff * diff).sum())


def cross_entropy_distance(p_c, g_map):
    """Binary cross-entropy summed over cells; ablation alternative."""
    p = p_c.data if isinstance(p_c, T.Tensor) else np.asarray(p_c)
    g = np.asarray(g_map)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"cross_entropy_distance: {p.shape} vs {g.shape}")
    if (p <= 0.0).any() or (p >= 1.0).any():
        raise NumericError("cross_entropy_distance: score map entries must lie in (0, 1)")
    p = p.astype(np.float64)
    return float(-(g * np.log(p) + (1.0 - g) * np.log1p(-p)).sum())


def noise_distance(p_c, g_map, metric="euclidean"):
    if metric == "euclidean":
        return map_distance(p_c, g_map)
    if metric == "cross-entropy":
        return cross_entropy_distance(p_c, g_map)
    raise ShapeMismatchError(f"unknown noise metric {metric!r}")


def denoise_filter(entries, ratio):
    """Keep entries after dropping the ceil(ratio*n) largest distances.

    ``entries`` is a list of (id, distance).  Ties straddling the cut keep
    the lower list index.  The tiny epsilon guards the ceil against
    floating-point products like 0.2 * 10 = 2.0000000000000004.
    """
    n = len(entries)
    if n == 0:
        return []
    n_drop = math.ceil(ratio * n - 1e-9)
    if n_drop <= 0:
        return list(entries)
    order = np.argsort([d for _, d in entries], kind="stable")
    dropped = set(int(i) for i in order[n - n_drop :])
    return [e for i, e in enumerate(entries) if i not in dropped]


# ---------------------------------------------------------------------------
# sample preparation


@dataclass
class TrainSample:
    clip_id: str
    query: object
    weak_frames: list
    strong_frames: list
    pseudo_box: Box
    gt_boxes: list = field(default_factory=list)


def prepare_sample(window_clip, provider, augment_spec, cfg, rng):
    """Build the weak/strong views of a clip window.

    Geometry draws are shared between the two views per frame; the strong
    view adds photometrics on top.  The pseudo box is requested once, for
    the window's frame 0 only.
    """
    query = tokenize_language(window_clip.query, cfg.model.max_language_tokens)
    b0 = provider.provide(window_clip, query)
    out = cfg.model.search_size
    weak_frames, strong_frames, gt_view = [], [], []
    pseudo_view = None
    for t, frame in enumerate(window_clip.frames):
        shared = draw_augment(augment_spec, rng, strong=False)
        photo = draw_augment(augment_spec, rng, strong=True)
        photo.dx, photo.dy, photo.scale = shared.dx, shared.dy, shared.scale
        box_in = b0 if t == 0 else None
        weak, mapped = apply_augment(frame, box_in, shared, out)
        strong, _ = apply_augment(frame, None, photo, out)
        weak_frames.append(weak.astype(cfg.model.np_dtype))
        strong_frames.append(strong.astype(cfg.model.np_dtype))
        if t == 0:
            pseudo_view = mapped
        if window_clip.gt_boxes:
            side = frame.shape[0]
            x0, y0, wside = _window_geometry(side, shared)
            gt_view.append(
                _map_box_through_window(window_clip.gt_boxes[t], side, x0, y0, wside)
            )
    return TrainSample(
        clip_id=window_clip.clip_id,
        query=query,
        weak_frames=weak_frames,
        strong_frames=strong_frames,
        pseudo_box=pseudo_view,
        gt_boxes=gt_view,
    )


# ---------------------------------------------------------------------------
# training steps


def train_step(sample, model, optimizer, cfg, weak_on_tape=False):
    """One consistency-training update; returns the step's LossReport.

    ``weak_on_tape`` exists to verify teacher isolation: the teacher's
    targets are detached constants, so recording its ops must not change
    any parameter gradient.  Passing ``optimizer=None`` computes gradients
    and returns without stepping (the gradients stay on the parameters).
    """
    mc = cfg.model

    def teacher_pass():
        with T.finite_checks(mc.dtype == "float64"):
            return forward_track(model, sample.weak_frames, sample.query, sample.pseudo_box)

    try:
        return _train_step_inner(sample, model, optimizer, cfg, weak_on_tape, teacher_pass)
    except NumericError as exc:
        raise NumericError(f"sample {sample.clip_id}: {exc}") from exc
    except BoxError as exc:
        raise NumericError(
            f"sample {sample.clip_id}: degenerate prediction ({exc})"
        ) from exc


def _train_step_inner(sample, model, optimizer, cfg, weak_on_tape, teacher_pass):
    mc = cfg.model
    weak_preds = None
    if not weak_on_tape:
        weak_preds = teacher_pass()

    entries = []
    with T.Tape():
        with T.finite_checks(cfg.train.check_finite or mc.dtype == "float64"):
            if weak_on_tape:
                weak_preds = teacher_pass()
            targets = []
            for t in range(1, len(sample.weak_frames)):
                wbox = weak_preds[t].box
                targets.append((t, wbox, gaussian_target(wbox, mc.grid)))

            strong_preds = forward_track(model, sample.strong_frames, sample.query, sample.pseudo_box)

            distances = []
            for t, wbox, g in targets:
                entry = frame_loss(
                    strong_preds[t].maps, wbox, g, mc.lam1, mc.lam2,
                    frame_index=t, tag="unsupervised",
                )
                entries.append(entry)
                distances.append((t, noise_distance(strong_preds[t].maps.cls, g.map, mc.denoise_metric)))

            kept_ids = {t for t, _ in denoise_filter(distances, mc.denoise_ratio)}
            for entry in entries:
                entry.kept = entry.frame_index in kept_ids

            init_target = gaussian_target(sample.pseudo_box, mc.grid)
            entries.insert(0, frame_loss(
                strong_preds[0].maps, sample.pseudo_box, init_target,
                mc.lam1, mc.lam2, frame_index=0, tag="supervised",
            ))

            cycle_entry = backward_track(
                model, sample.strong_frames, sample.weak_frames, sample.query,
                weak_preds[-1].box, sample.pseudo_box, mc,
            )
            if cycle_entry is not None:
                entries.append(cycle_entry)

            report = combine_losses(entries)
            if not np.isfinite(report.loss_total):
                raise NumericError(f"non-finite loss {report.loss_total}")
            T.backward(report.node)
    if optimizer is not None:
        optimizer.step()
        optimizer.zero_grad()
    return report


@dataclass
class EpochMetrics:
    epoch: int
    steps: int
    mean_total: float
    mean_s: float
    mean_u: float
    kept_fraction: float


def train_epoch(clips, model, optimizer, cfg, provider, epoch, metrics=None, step_offset=0):
    """One pass of sampled windows; deterministic under the epoch seed."""
    if not clips:
        raise DataError("train_epoch: empty dataset")
    mc, tc = cfg.model, cfg.train
    rng = np.random.default_rng(
        np.random.SeedSequence([tc.seed & 0xFFFFFFFF, 0x5E9, epoch])
    )
    totals, sups, unsups, kepts = [], [], [], []
    for i in range(tc.samples_per_epoch):
        clip = clips[int(rng.integers(len(clips)))]
        max_start = clip.length - tc.clip_len
        if max_start < 0:
            raise DataError(f"clip {clip.clip_id} shorter than clip_len {tc.clip_len}")
        if tc.provider == "file":
            start = 0  # offline labels exist for clip starts only
        else:
            start = int(rng.integers(max_start + 1))
        sample = prepare_sample(clip.window(start, tc.clip_len), provider, cfg.augment, cfg, rng)
        report = train_step(sample, model, optimizer, cfg)
        totals.append(report.loss_total)
        sups.append(report.loss_s)
        unsups.append(report.loss_u)
        kepts.append(report.kept_fraction)
        if metrics is not None:
            sup_e = [e for e in report.entries if e.tag == "supervised"]
            metrics.write({
                "step": step_offset + i,
                "epoch": epoch,
                "sample": sample.clip_id,
                "L_s": report.loss_s,
                "L_u": report.loss_u,
                "L_total": report.loss_total,
                "kept_frac": report.kept_fraction,
                "l_cls": float(np.mean([e.l_cls for e in sup_e])),
                "l_l1": float(np.mean([e.l_l1 for e in sup_e])),
                "l_giou": float(np.mean([e.l_giou for e in sup_e])),
            })
    return EpochMetrics(
        epoch=epoch,
        steps=tc.samples_per_epoch,
        mean_total=float(np.mean(totals)),
        mean_s=float(np.mean(sups)),
        mean_u=float(np.mean(unsups)),
        kept_fraction=float(np.mean(kepts)),
    )


class ModelTracker:
    """Evaluation adapter: full-frame search views, no augmentation."""

    def __init__(self, model):
        self.model = model

    def views(self, clip):
        out = self.model.cfg.search_size
        return [
            resize_frame(f, out).astype(self.model.cfg.np_dtype) for f in clip.frames
        ]

    def track(self, clip, init_box, collect_selections=False):
        query = tokenize_language(clip.query, self.model.cfg.max_language_tokens)
        preds = forward_track(
            self.model, self.views(clip), query, init_box,
            collect_selections=collect_selections,
        )
        if collect_selections:
            return preds
        return [p.box for p in preds]
