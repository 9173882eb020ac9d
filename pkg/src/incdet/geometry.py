"""Anchors, IoU, anchor labeling and the missing-annotation anchor analysis."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


class ConfigurationError(ValueError):
    """Raised for invalid geometric or model configuration."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel coordinates, corner convention."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"invalid box {self.as_tuple()}: expected x1<=x2, y1<=y2")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_seq(cls, seq) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in seq)
        return cls(x1, y1, x2, y2)


def boxes_to_array(boxes) -> np.ndarray:
    """Convert a list of ``Box`` (or an array-like) to a float64 ``(N, 4)`` array."""
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64, copy=False).reshape(-1, 4)
    return np.array([b.as_tuple() if isinstance(b, Box) else tuple(b) for b in boxes],
                    dtype=np.float64).reshape(-1, 4)


def array_to_boxes(arr) -> list[Box]:
    return [Box.from_seq(row) for row in np.asarray(arr).reshape(-1, 4)]


@dataclass(frozen=True)
class AnchorGridSpec:
    """Anchor shapes per grid location and the grid stride.

    Each (ratio, scale) pair yields one anchor of area ``(base_size*scale)**2``
    and height/width ratio ``ratio``.
    """

    ratios: tuple = (0.5, 1.0, 2.0)
    scales: tuple = (2.0, 4.0, 8.0, 16.0, 32.0)
    stride: int = 16
    base_size: float = 16.0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not self.ratios or not self.scales:
            raise ConfigurationError("anchor ratios and scales must be non-empty")
        if any(r <= 0 for r in self.ratios) or any(s <= 0 for s in self.scales):
            raise ConfigurationError("anchor ratios and scales must be positive")
        if self.stride < 1:
            raise ConfigurationError("anchor stride must be >= 1")
        if self.base_size <= 0:
            raise ConfigurationError("anchor base_size must be positive")

    @property
    def shapes_per_location(self) -> int:
        return len(self.ratios) * len(self.scales)

    def grid_size(self, image_w: int, image_h: int) -> tuple[int, int]:
        """``(cols, rows)`` of anchor centers."""
        return math.ceil(image_w / self.stride), math.ceil(image_h / self.stride)

    def base_shapes(self) -> np.ndarray:
        """``(A, 2)`` array of anchor (width, height), ratio-major order."""
        out = []
        for r in self.ratios:
            for s in self.scales:
                side = self.base_size * s
                out.append((side / math.sqrt(r), side * math.sqrt(r)))
        return np.array(out, dtype=np.float64)

    def to_dict(self):
        return asdict(self)


def generate_anchors(spec: AnchorGridSpec, image_w: int, image_h: int) -> np.ndarray:
    """Anchors for an image as an ``(N, 4)`` array, unclipped.

    Order is row-major over grid cells (y, then x), then anchor shape, which is
    the layout produced by flattening an ``(H, W, A)`` head output.
    """
    if image_w < 1 or image_h < 1:
        raise ConfigurationError(f"image size must be >= 1, got {image_w}x{image_h}")
    cols, rows = spec.grid_size(image_w, image_h)
    half = spec.stride / 2.0
    cx = np.arange(cols, dtype=np.float64) * spec.stride + half
    cy = np.arange(rows, dtype=np.float64) * spec.stride + half
    shapes = spec.base_shapes()
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx.ravel(), cyy.ravel()], axis=1)
    ctr = np.repeat(centers, len(shapes), axis=0)
    wh = np.tile(shapes, (len(centers), 1)) / 2.0
    return np.concatenate([ctr - wh, ctr + wh], axis=1)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b) -> np.ndarray:
    return kernels.box_iou_matrix(boxes_to_array(a), boxes_to_array(b))


@dataclass
class AnchorLabels:
    """Per-anchor labels (1 positive, 0 negative, -1 ignore) and matched gt index (-1 if none)."""

    labels: np.ndarray
    matched: np.ndarray
    max_iou: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.labels)

    @property
    def positive(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negative(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


def label_anchors(anchors, gt, pos_thresh: float = 0.7, neg_thresh: float = 0.3) -> AnchorLabels:
    """Assign positive/negative/ignore labels to anchors.

    Positive: IoU above ``pos_thresh`` with some gt, or the (possibly tied)
    highest-IoU anchor for some gt. Negative: max IoU below ``neg_thresh``.
    A gt that overlaps no anchor at all does not force a positive.
    """
    if not 0 < neg_thresh < pos_thresh < 1:
        raise ConfigurationError(f"need 0 < neg_thresh < pos_thresh < 1, got {neg_thresh}, {pos_thresh}")
    anchors = boxes_to_array(anchors)
    gt = boxes_to_array(gt)
    n = len(anchors)
    labels = np.full(n, IGNORE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt) == 0:
        labels[:] = NEGATIVE
        return AnchorLabels(labels, matched, np.zeros(n))
    ious = kernels.box_iou_matrix(anchors, gt)
    max_iou = ious.max(axis=1)
    argmax = ious.argmax(axis=1)
    labels[max_iou < neg_thresh] = NEGATIVE
    pos = max_iou > pos_thresh
    gt_best = ious.max(axis=0)
    forced = ((ious == gt_best[None, :]) & (gt_best[None, :] > 0)).any(axis=1)
    pos |= forced
    labels[pos] = POSITIVE
    matched[pos] = argmax[pos]
    return AnchorLabels(labels, matched, max_iou)


def sample_anchor_minibatch(labels, batch: int = 256, pos_fraction: float = 0.5,
                            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Sample anchor indices for one image, positives first up to ``batch*pos_fraction``.

    The remainder is filled with negatives. Returns sorted indices; empty when
    the image has neither positives nor negatives.
    """
    if batch < 1:
        raise ConfigurationError("batch must be >= 1")
    if not 0 < pos_fraction <= 1:
        raise ConfigurationError("pos_fraction must be in (0, 1]")
    if rng is None:
        rng = np.random.default_rng(0)
    lab = labels.labels if isinstance(labels, AnchorLabels) else np.asarray(labels)
    pos = np.flatnonzero(lab == POSITIVE)
    neg = np.flatnonzero(lab == NEGATIVE)
    n_pos = min(len(pos), int(batch * pos_fraction))
    n_neg = min(len(neg), batch - n_pos)
    chosen_pos = rng.choice(pos, size=n_pos, replace=False) if n_pos else pos[:0]
    chosen_neg = rng.choice(neg, size=n_neg, replace=False) if n_neg else neg[:0]
    return np.sort(np.concatenate([chosen_pos, chosen_neg])).astype(np.int64)


def filter_anchors(anchors, image_w: int, image_h: int, min_size: float = 1.0) -> np.ndarray:
    """Indices of anchors kept after clipping to the image.

    Drops anchors whose clipped width or height is below ``min_size`` and anchors
    that coincide with an earlier anchor once clipped.
    """
    a = boxes_to_array(anchors)
    clipped = clip_boxes(a, image_w, image_h)
    w = clipped[:, 2] - clipped[:, 0]
    h = clipped[:, 3] - clipped[:, 1]
    big = np.flatnonzero((w >= min_size) & (h >= min_size))
    _, first = np.unique(clipped[big], axis=0, return_index=True)
    return np.sort(big[first])


def clip_boxes(boxes: np.ndarray, image_w: float, image_h: float) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64, copy=True).reshape(-1, 4)
    out[:, [0, 2]] = out[:, [0, 2]].clip(0, image_w)
    out[:, [1, 3]] = out[:, [1, 3]].clip(0, image_h)
    return out


@dataclass
class AnchorStats:
    """Counts behind the missing-annotation false-negative analysis.

    ``n_negative`` counts anchors that are negative under both the full and the
    visible annotations; false negatives are anchors positive under the full
    annotations but negative under the visible ones.
    """

    n_total: int
    n_usable: int
    n_positive_visible: int
    n_negative: int
    n_false_negative: int

    @property
    def false_negative_rate(self) -> float:
        denom = self.n_negative + self.n_false_negative
        return self.n_false_negative / denom if denom > 0 else 0.0

    def __add__(self, other: "AnchorStats") -> "AnchorStats":
        return AnchorStats(*(getattr(self, k) + getattr(other, k) for k in
                             ("n_total", "n_usable", "n_positive_visible", "n_negative",
                              "n_false_negative")))

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["false_negative_rate"] = self.false_negative_rate
        return rec


def missing_annotation_stats(anchors, full_gt, visible_gt, pos_thresh: float = 0.7,
                             neg_thresh: float = 0.3, image_size: Optional[Sequence[int]] = None,
                             min_size: float = 1.0) -> AnchorStats:
    """Label anchors against full and visible annotations and count false negatives.

    With ``image_size=(w, h)`` anchors are first reduced by :func:`filter_anchors`.
    """
    anchors = boxes_to_array(anchors)
    n_total = len(anchors)
    if image_size is not None:
        anchors = anchors[filter_anchors(anchors, image_size[0], image_size[1], min_size)]
    full = label_anchors(anchors, full_gt, pos_thresh, neg_thresh)
    vis = label_anchors(anchors, visible_gt, pos_thresh, neg_thresh)
    vis_neg = vis.labels == NEGATIVE
    fn = vis_neg & (full.labels == POSITIVE)
    return AnchorStats(
        n_total=n_total,
        n_usable=len(anchors),
        n_positive_visible=int((vis.labels == POSITIVE).sum()),
        n_negative=int((vis_neg & ~fn).sum()),
        n_false_negative=int(fn.sum()),
    )
