"""Prediction head, box decoding, Gaussian targets, and the loss terms.

The head turns search tokens (each augmented with the pooled fused
language vector) into a classification heatmap plus size/offset regression
maps over the search grid.  Boxes are center-parameterized and normalized
to the search region.  Losses follow the center-point family: focal
classification against a Gaussian target, with L1 and generalized-IoU
regression supervised at the target's center cell.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import BoxError, ShapeMismatchError
from .tokens import TokenSet

log = logging.getLogger(__name__)

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, center-parameterized, normalized to its region."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0.0 and self.h > 0.0):
            raise BoxError(f"degenerate box: w={self.w}, h={self.h}")

    def corners(self):
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    @staticmethod
    def from_corners(x1, y1, x2, y2):
        return Box((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def clipped(self):
        """Corners clipped into [0, 1]; extents stay strictly positive.

        Boxes already inside the unit region come back unchanged (bit-exact).
        """
        x1, y1, x2, y2 = self.corners()
        if x1 >= 0.0 and y1 >= 0.0 and x2 <= 1.0 and y2 <= 1.0:
            return self
        x1, y1 = max(x1, 0.0), max(y1, 0.0)
        x2, y2 = min(x2, 1.0), min(y2, 1.0)
        if x2 <= x1 or y2 <= y1:
            raise BoxError(f"box lies outside the unit region: {self}")
        return Box.from_corners(x1, y1, x2, y2)

    def scaled(self, width, height):
        """Pixel-unit variant of this box for a width x height frame."""
        return PixelBox(self.cx * width, self.cy * height, self.w * width, self.h * height)

    def to_array(self):
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class PixelBox:
    """Absolute-frame box in pixel units."""

    cx: float
    cy: float
    w: float
    h: float
    frame: int = -1


@dataclass
class ScoreMaps:
    """Classification heatmap plus size/offset regression maps.

    ``cls`` is sigmoid-activated in (0,1); ``size`` entries in (0,1];
    ``offset`` entries in (-0.5, 0.5) so a decoded center stays inside
    its cell.
    """

    cls: T.Tensor
    size: T.Tensor
    offset: T.Tensor
    grid: int

    def cls_values(self):
        return self.cls.data

    def size_values(self):
        return self.size.data

    def offset_values(self):
        return self.offset.data


@dataclass
class GaussianTarget:
    """Axis-separable Gaussian heatmap with peak exactly 1 at the center cell."""

    map: np.ndarray
    center: tuple
    sigma: tuple


@dataclass
class FrameLossEntry:
    """Loss terms for one frame, tagged supervised or unsupervised."""

    frame_index: int
    tag: str
    l_cls: float
    l_l1: float
    l_giou: float
    lam1: float
    lam2: float
    total: float
    node: T.Tensor | None
    kept: bool = True


@dataclass
class LossReport:
    """Aggregate of one step's entries: supervised + unsupervised split."""

    entries: list
    loss_s: float
    loss_u: float
    loss_total: float
    kept_fraction: float
    node: T.Tensor | None = field(default=None, repr=False)


def _head_mlp(x, params, name):
    h = T.gelu(T.linear(x, params[f"head.{name}.w1"], params[f"head.{name}.b1"]))
    return T.linear(h, params[f"head.{name}.w2"], params[f"head.{name}.b2"])


def predict_maps(search, f_vl, params):
    """Head forward: search tokens + pooled fused-language vector -> maps.

    Tokens are scattered onto the grid by their origin cells, so the maps
    are invariant to any permutation of the incoming token order.
    """
    if not isinstance(search, TokenSet) or not isinstance(f_vl, TokenSet):
        raise ShapeMismatchError("predict_maps expects TokenSet inputs")
    n = search.n
    grid = math.isqrt(n)
    if grid * grid != n:
        raise ShapeMismatchError(f"search token count {n} is not a square grid")
    origins = search.origins
    if (origins < 0).any():
        raise ShapeMismatchError("search tokens are missing grid origins")

    if f_vl.valid_mask is not None:
        rows = np.flatnonzero(f_vl.valid_mask)
    else:
        rows = np.arange(f_vl.n)
    pooled = T.tmean(T.gather(f_vl.tokens, rows, axis=0), axis=0, keepdims=True)
    x = T.add(search.tokens, pooled)

    # origin-keyed scatter: out_flat[r*G+c] = head(token with origin (r,c))
    dest = origins[:, 0] * grid + origins[:, 1]
    inverse = np.empty(n, dtype=np.intp)
    inverse[dest] = np.arange(n)

    cls = T.sigmoid(T.gather(_head_mlp(x, params, "cls"), inverse, axis=0))
    # floor keeps box areas away from float32 underflow under collapse
    size = T.clip(T.sigmoid(T.gather(_head_mlp(x, params, "size"), inverse, axis=0)), 0.02, 1.0)
    off = T.sub(T.sigmoid(T.gather(_head_mlp(x, params, "off"), inverse, axis=0)), 0.5)
    return ScoreMaps(
        cls=T.reshape(cls, (grid, grid)),
        size=T.reshape(size, (grid, grid, 2)),
        offset=T.reshape(off, (grid, grid, 2)),
        grid=grid,
    )


def decode_box(maps):
    """Peak cell of the heatmap plus its regression entries -> clipped Box."""
    grid = maps.grid
    flat = np.argmax(maps.cls_values())  # row-major, ties to lowest index
    row, col = divmod(int(flat), grid)
    off = maps.offset_values()[row, col]
    size = maps.size_values()[row, col]
    cx = (col + 0.5 + float(off[0])) / grid
    cy = (row + 0.5 + float(off[1])) / grid
    return Box(cx, cy, float(size[0]), float(size[1])).clipped()


def center_cell(box, grid):
    """Grid cell containing the box center, clamped to the grid."""
    col = min(max(int(box.cx * grid), 0), grid - 1)
    row = min(max(int(box.cy * grid), 0), grid - 1)
    return row, col


def gaussian_target(box, grid):
    """Gaussian heatmap for a box: sigma = side * grid / 6, floored at 0.5."""
    row, col = center_cell(box, grid)
    sx = max(box.w * grid / 6.0, 0.5)
    sy = max(box.h * grid / 6.0, 0.5)
    cs = np.arange(grid, dtype=np.float64)
    gx = np.exp(-((cs - col) ** 2) / (2.0 * sx * sx))
    gy = np.exp(-((cs - row) ** 2) / (2.0 * sy * sy))
    return GaussianTarget(map=np.outer(gy, gx), center=(row, col), sigma=(sy, sx))


def focal_loss(p_c, g_map):
    """Penalty-reduced center-point focal loss, normalized by positive count."""
    g = np.asarray(g_map, dtype=np.float64)
    if tuple(p_c.shape) != g.shape:
        raise ShapeMismatchError(f"focal_loss: maps {tuple(p_c.shape)} vs target {g.shape}")
    pos = (g == 1.0).astype(p_c.dtype.type)
    neg_w = ((1.0 - g) ** FOCAL_BETA).astype(p_c.dtype.type)
    n_pos = max(1.0, float(pos.sum()))
    tiny = 1e-12 if p_c.dtype == np.float64 else 1e-7
    p = T.clip(p_c, tiny, 1.0 - tiny)
    one_m_p = T.sub(1.0, p)
    pos_term = T.mul(T.mul(pos, T.mul(one_m_p, one_m_p)), T.log(p))
    neg_term = T.mul(T.mul(neg_w, T.mul(p, p)), T.log(one_m_p))
    return T.mul(T.add(pos_term.sum(), neg_term.sum()), -1.0 / n_pos)


def _parts(b):
    # (4,)-tensor box -> corner tensors, each shape (1,)
    cx, cy = T.narrow(b, 0, 0, 1), T.narrow(b, 0, 1, 1)
    w, h = T.narrow(b, 0, 2, 1), T.narrow(b, 0, 3, 1)
    half_w, half_h = T.mul(w, 0.5), T.mul(h, 0.5)
    return (
        T.sub(cx, half_w), T.sub(cy, half_h),
        T.add(cx, half_w), T.add(cy, half_h),
        w, h,
    )


def giou_pair(a, b):
    """Generalized IoU of two (cx, cy, w, h) tensors; differentiable."""
    for t in (a, b):
        wh = t.data[2:]
        if (wh <= 0).any():
            raise BoxError(f"degenerate box in giou: w={wh[0]}, h={wh[1]}")
    ax1, ay1, ax2, ay2, aw, ah = _parts(a)
    bx1, by1, bx2, by2, bw, bh = _parts(b)
    iw = T.maximum(T.sub(T.minimum(ax2, bx2), T.maximum(ax1, bx1)), 0.0)
    ih = T.maximum(T.sub(T.minimum(ay2, by2), T.maximum(ay1, by1)), 0.0)
    inter = T.mul(iw, ih)
    union = T.sub(T.add(T.mul(aw, ah), T.mul(bw, bh)), inter)
    iou = T.div(inter, union)
    ew = T.sub(T.maximum(ax2, bx2), T.minimum(ax1, bx1))
    eh = T.sub(T.maximum(ay2, by2), T.minimum(ay1, by1))
    enclosing = T.mul(ew, eh)
    return T.sub(iou, T.div(T.sub(enclosing, union), enclosing)).sum()


def giou(a, b):
    """Generalized IoU of two boxes as a plain float."""
    return giou_pair(T.Tensor(a.to_array()), T.Tensor(b.to_array())).item()


def giou_loss(a, b):
    return 1.0 - giou(a, b)


def frame_loss(maps, target_box, target_map, lam1, lam2, frame_index=0, tag="supervised"):
    """Eq-style composition: focal + lam1 * L1 + lam2 * GIoU for one frame.

    Regression is supervised only at the target's center cell: the size and
    offset entries there are decoded into a box and compared to the target.
    """
    grid = maps.grid
    l_cls = focal_loss(maps.cls, target_map.map)

    row, col = center_cell(target_box, grid)
    flat = row * grid + col
    size_row = T.gather(T.reshape(maps.size, (grid * grid, 2)), [flat], axis=0)
    off_row = T.gather(T.reshape(maps.offset, (grid * grid, 2)), [flat], axis=0)
    cx = T.add(T.mul(T.narrow(off_row, 1, 0, 1), 1.0 / grid), (col + 0.5) / grid)
    cy = T.add(T.mul(T.narrow(off_row, 1, 1, 1), 1.0 / grid), (row + 0.5) / grid)
    pred = T.reshape(T.concat([cx, cy, size_row], axis=1), (4,))
    target = T.Tensor(target_box.to_array().astype(maps.size.dtype))

    l_l1 = T.tmean(T.absval(T.sub(pred, target)))
    l_giou = T.sub(1.0, giou_pair(pred, target))
    node = T.add(l_cls, T.add(T.mul(l_l1, lam1), T.mul(l_giou, lam2)))

    cls_v, l1_v, giou_v = l_cls.item(), l_l1.item(), l_giou.item()
    return FrameLossEntry(
        frame_index=frame_index,
        tag=tag,
        l_cls=cls_v,
        l_l1=l1_v,
        l_giou=giou_v,
        lam1=lam1,
        lam2=lam2,
        total=cls_v + lam1 * l1_v + lam2 * giou_v,
        node=node,
    )


def _mean_node(nodes):
    acc = nodes[0]
    for n in nodes[1:]:
        acc = T.add(acc, n)
    return T.mul(acc, 1.0 / len(nodes))


def combine_losses(entries):
    """Split entries into supervised / surviving-unsupervised means and sum.

    The unsupervised side is 0 (with a warning) when the denoise filter
    left nothing standing.
    """
    sup = [e for e in entries if e.tag == "supervised"]
    unsup_all = [e for e in entries if e.tag == "unsupervised"]
    unsup = [e for e in unsup_all if e.kept]

    loss_s = float(np.mean([e.total for e in sup])) if sup else 0.0
    node_s = _mean_node([e.node for e in sup]) if sup and sup[0].node is not None else None

    if unsup:
        loss_u = float(np.mean([e.total for e in unsup]))
        node_u = _mean_node([e.node for e in unsup]) if unsup[0].node is not None else None
    else:
        loss_u = 0.0
        node_u = None
        if unsup_all:
            log.warning("all %d unsupervised entries filtered; L_u = 0", len(unsup_all))

    node = None
    if node_s is not None and node_u is not None:
        node = T.add(node_s, node_u)
    elif node_s is not None:
        node = node_s
    elif node_u is not None:
        node = node_u

    kept_fraction = (len(unsup) / len(unsup_all)) if unsup_all else 1.0
    return LossReport(
        entries=list(entries),
        loss_s=loss_s,
        loss_u=loss_u,
        loss_total=loss_s + loss_u,
        kept_fraction=kept_fraction,
        node=node,
    )
