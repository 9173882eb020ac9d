"""Miniature two-stage detector: conv feature extractor, RPN and RoI head (RCN).

The model is a ``torch.nn.Module``; the forward stages are exposed as plain
functions so the distillation code can tap intermediate outputs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save_file
from torch import nn
from torchvision.ops import roi_align

from . import kernels
from .geometry import (AnchorGridSpec, Box, ConfigurationError, boxes_to_array, generate_anchors,
                       label_anchors, sample_anchor_minibatch)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "incdet-checkpoint"
CHECKPOINT_VERSION = 1
BBOX_CLIP = math.log(1000.0 / 16)


@dataclass
class DetectorConfig:
    """Architecture plus training-target hyperparameters."""

    in_channels: int = 3
    channels: tuple = (32, 32, 64, 64)
    rpn_channels: int = 64
    roi_pool_size: int = 4
    rcn_hidden: int = 256
    ratios: tuple = (0.5, 1.0, 2.0)
    scales: tuple = (1.0, 2.0)
    base_size: float = 16.0
    # RPN targets
    rpn_pos_thresh: float = 0.7
    rpn_neg_thresh: float = 0.3
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    # proposals
    pre_nms_train: int = 600
    post_nms_train: int = 128
    pre_nms_test: int = 300
    post_nms_test: int = 100
    proposal_nms: float = 0.7
    min_proposal_size: float = 1.0
    # RoI targets
    roi_fg_thresh: float = 0.5
    roi_batch: int = 64
    roi_fg_fraction: float = 0.25
    rpn_reg_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    rcn_reg_weights: tuple = (10.0, 10.0, 5.0, 5.0)
    smooth_l1_beta: float = 1.0 / 9.0

    def __post_init__(self):
        for name in ("channels", "ratios", "scales", "rpn_reg_weights", "rcn_reg_weights"):
            setattr(self, name, tuple(getattr(self, name)))
        if not 3 <= len(self.channels) <= 6:
            raise ConfigurationError("backbone needs 3 to 6 blocks")

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    @property
    def anchor_spec(self) -> AnchorGridSpec:
        return AnchorGridSpec(self.ratios, self.scales, self.stride, self.base_size)

    @property
    def num_anchor_shapes(self) -> int:
        return len(self.ratios) * len(self.scales)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class RpnOutput:
    """Per-anchor objectness logits and box deltas for a batch, anchors flattened (y, x, shape)."""

    logits: torch.Tensor  # (B, N)
    r: torch.Tensor  # (B, N, 4)

    @property
    def q(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    def __getitem__(self, b) -> "RpnOutput":
        return RpnOutput(self.logits[b:b + 1], self.r[b:b + 1])


@dataclass
class RoiOutput:
    """Class scores ``p`` (K, 1 + C; column 0 is background) and per-class deltas ``t`` (K, C, 4).

    ``p`` holds unnormalized logits.
    """

    p: torch.Tensor
    t: torch.Tensor

    @property
    def probs(self) -> torch.Tensor:
        return F.softmax(self.p, dim=1)


@dataclass
class Detection:
    box: Box
    class_id: int
    score: float
    image_id: str = ""

    def to_record(self) -> dict:
        return {"image_id": self.image_id, "class_id": int(self.class_id),
                "score": float(self.score), "box": list(self.box.as_tuple())}

    @classmethod
    def from_record(cls, rec) -> "Detection":
        return cls(Box.from_seq(rec["box"]), int(rec["class_id"]), float(rec["score"]),
                   str(rec.get("image_id", "")))


class Detector(nn.Module):
    """Backbone + RPN + RCN with ``class_count`` foreground classes."""

    def __init__(self, config: DetectorConfig, class_count: int,
                 classes: Optional[Sequence[str]] = None):
        super().__init__()
        if class_count < 1:
            raise ConfigurationError("detector needs at least one class")
        self.config = config
        self.classes = list(classes) if classes is not None else [str(i) for i in range(class_count)]
        if len(self.classes) != class_count:
            raise ConfigurationError("class name list does not match class_count")
        layers = []
        c_in = config.in_channels
        for c_out in config.channels:
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.ReLU(inplace=False)]
            c_in = c_out
        self.backbone = nn.Sequential(*layers)
        a = config.num_anchor_shapes
        self.rpn_conv = nn.Conv2d(c_in, config.rpn_channels, 3, padding=1)
        self.rpn_cls = nn.Conv2d(config.rpn_channels, a, 1)
        self.rpn_reg = nn.Conv2d(config.rpn_channels, 4 * a, 1)
        pooled = c_in * config.roi_pool_size ** 2
        self.rcn_fc = nn.Linear(pooled, config.rcn_hidden)
        self.rcn_cls = nn.Linear(config.rcn_hidden, class_count + 1)
        self.rcn_reg = nn.Linear(config.rcn_hidden, 4 * class_count)
        for m in (self.rpn_conv, self.rpn_cls, self.rcn_cls):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)
        for m in (self.rpn_reg, self.rcn_reg):
            nn.init.normal_(m.weight, std=0.001)
            nn.init.zeros_(m.bias)

    @property
    def class_count(self) -> int:
        return self.rcn_cls.out_features - 1

    @property
    def feature_channels(self) -> int:
        return self.config.channels[-1]


def build_detector(config: DetectorConfig, classes: Sequence[str], seed: int = 0,
                   dtype=torch.float32) -> Detector:
    """Build a detector with deterministic, seed-controlled initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Detector(config, len(classes), classes)
    return model.to(dtype)


def _as_batch(image) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image)) if not isinstance(image, torch.Tensor) else image
    return x.unsqueeze(0) if x.dim() == 3 else x


def extract_features(image, model: Detector) -> torch.Tensor:
    """Backbone forward. Accepts ``(C, H, W)`` or ``(B, C, H, W)``; returns ``(B, C', ceil(H/s), ceil(W/s))``."""
    x = _as_batch(image)
    if x.dim() != 4 or x.shape[1] != model.config.in_channels:
        raise ConfigurationError(
            f"expected image with {model.config.in_channels} channels, got shape {tuple(x.shape)}")
    dtype = next(model.parameters()).dtype
    return model.backbone(x.to(dtype))


def rpn_forward(features: torch.Tensor, model: Detector) -> RpnOutput:
    if features.shape[1] != model.rpn_conv.in_channels:
        raise ConfigurationError("feature channels do not match RPN input")
    h = F.relu(model.rpn_conv(features))
    b = h.shape[0]
    logits = model.rpn_cls(h).permute(0, 2, 3, 1).reshape(b, -1)
    r = model.rpn_reg(h).permute(0, 2, 3, 1).reshape(b, -1, 4)
    return RpnOutput(logits, r)


def rcn_forward(features: torch.Tensor, rois, model: Detector) -> RoiOutput:
    """RoI head on align-pooled features.

    ``rois`` is an ``(K, 4)`` tensor/array for a single image or an ``(K, 5)``
    tensor whose first column is the batch index.
    """
    k_classes = model.class_count
    rois = torch.as_tensor(rois, dtype=features.dtype)
    if rois.numel() == 0:
        return RoiOutput(features.new_zeros((0, k_classes + 1)), features.new_zeros((0, k_classes, 4)))
    if rois.shape[1] == 4:
        rois = torch.cat([rois.new_zeros((rois.shape[0], 1)), rois], dim=1)
    s = model.config.roi_pool_size
    pooled = roi_align(features, rois, output_size=(s, s), spatial_scale=1.0 / model.config.stride,
                       sampling_ratio=2, aligned=True)
    h = F.relu(model.rcn_fc(pooled.flatten(1)))
    return RoiOutput(model.rcn_cls(h), model.rcn_reg(h).view(-1, k_classes, 4))


# --- box coding -----------------------------------------------------------------------------

def encode_boxes(ref, gt, weights=(1.0, 1.0, 1.0, 1.0)):
    """(dx, dy, dw, dh) deltas taking ``ref`` boxes onto ``gt`` boxes. Works on arrays or tensors."""
    lib = torch if isinstance(ref, torch.Tensor) else np
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + 0.5 * gw
    gy = gt[:, 1] + 0.5 * gh
    return lib.stack([wx * (gx - rx) / rw, wy * (gy - ry) / rh,
                      ww * lib.log(gw / rw), wh * lib.log(gh / rh)], 1)


def decode_boxes(ref, deltas, weights=(1.0, 1.0, 1.0, 1.0)):
    lib = torch if isinstance(deltas, torch.Tensor) else np
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = lib.clip(deltas[:, 2] / ww, None, BBOX_CLIP)
    dh = lib.clip(deltas[:, 3] / wh, None, BBOX_CLIP)
    cx = dx * rw + rx
    cy = dy * rh + ry
    w = lib.exp(dw) * rw
    h = lib.exp(dh) * rh
    return lib.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], 1)


# --- proposals ------------------------------------------------------------------------------

def propose_rois(q, r, anchors, pre_nms_k: int, post_nms_k: int, nms_iou: float,
                 image_size: Sequence[int], min_size: float = 1.0):
    """Decode RPN deltas on anchors, clip, keep top ``pre_nms_k`` by score, NMS, keep ``post_nms_k``.

    ``q`` and ``r`` are one image's scores ``(N,)`` and deltas ``(N, 4)``. Score ties
    keep the lower anchor index first. Returns ``(boxes (K, 4), scores (K,))`` as
    float64 arrays sorted by descending score.
    """
    if pre_nms_k < 1 or post_nms_k < 1:
        raise ConfigurationError("proposal counts must be >= 1")
    q = np.asarray(q.detach().cpu() if isinstance(q, torch.Tensor) else q, dtype=np.float64).ravel()
    r = np.asarray(r.detach().cpu() if isinstance(r, torch.Tensor) else r, dtype=np.float64).reshape(-1, 4)
    anchors = boxes_to_array(anchors)
    if not len(q) == len(r) == len(anchors):
        raise ConfigurationError(f"{len(q)} scores, {len(r)} deltas, {len(anchors)} anchors")
    w, h = image_size
    order = np.argsort(-q, kind="stable")[:pre_nms_k]
    boxes = decode_boxes(anchors[order], r[order])
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, w)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, h)
    scores = q[order]
    ok = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
    boxes, scores = boxes[ok], scores[ok]
    keep = kernels.nms(boxes, scores, nms_iou)[:post_nms_k]
    return boxes[keep], scores[keep]


# --- training targets -----------------------------------------------------------------------

@dataclass
class RpnTargets:
    indices: np.ndarray  # sampled anchor indices
    labels: np.ndarray  # 1/0 per sampled anchor
    deltas: np.ndarray  # (n_pos, 4) regression targets for positive sampled anchors

    @property
    def positive(self) -> np.ndarray:
        return self.indices[self.labels == 1]


@dataclass
class RoiTargets:
    rois: np.ndarray  # (K, 4)
    labels: np.ndarray  # (K,) 0 background, c+1 for foreground class c
    deltas: np.ndarray  # (K, 4), zero rows for background


def rpn_targets(anchors, gt_boxes, config: DetectorConfig, rng: np.random.Generator) -> RpnTargets:
    anchors = boxes_to_array(anchors)
    gt = boxes_to_array(gt_boxes)
    lab = label_anchors(anchors, gt, config.rpn_pos_thresh, config.rpn_neg_thresh)
    idx = sample_anchor_minibatch(lab, config.rpn_batch, config.rpn_pos_fraction, rng)
    labels = (lab.labels[idx] == 1).astype(np.int64)
    pos = idx[labels == 1]
    deltas = encode_boxes(anchors[pos], gt[lab.matched[pos]], config.rpn_reg_weights) if len(pos) \
        else np.zeros((0, 4))
    return RpnTargets(idx, labels, deltas)


def roi_targets(proposals, gt_boxes, gt_labels, config: DetectorConfig,
                rng: np.random.Generator) -> RoiTargets:
    """Sample RoIs from proposals plus gt boxes; foreground at IoU >= ``roi_fg_thresh``."""
    gt = boxes_to_array(gt_boxes)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).ravel()
    cand = np.concatenate([boxes_to_array(proposals), gt], axis=0)
    if len(gt):
        ious = kernels.box_iou_matrix(cand, gt)
        max_iou = ious.max(axis=1)
        arg = ious.argmax(axis=1)
    else:
        max_iou = np.zeros(len(cand))
        arg = np.zeros(len(cand), dtype=np.int64)
    fg = np.flatnonzero(max_iou >= config.roi_fg_thresh)
    bg = np.flatnonzero(max_iou < config.roi_fg_thresh)
    n_fg = min(len(fg), int(config.roi_batch * config.roi_fg_fraction))
    n_bg = min(len(bg), config.roi_batch - n_fg)
    fg = rng.choice(fg, n_fg, replace=False) if n_fg else fg[:0]
    bg = rng.choice(bg, n_bg, replace=False) if n_bg else bg[:0]
    keep = np.concatenate([fg, bg])
    rois = cand[keep]
    labels = np.zeros(len(keep), dtype=np.int64)
    labels[:n_fg] = gt_labels[arg[fg]] + 1
    deltas = np.zeros((len(keep), 4))
    if n_fg:
        deltas[:n_fg] = encode_boxes(rois[:n_fg], gt[arg[fg]], config.rcn_reg_weights)
    return RoiTargets(rois, labels, deltas)


# --- loss -----------------------------------------------------------------------------------

@dataclass
class DetectionLoss:
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor
    rcn_cls: torch.Tensor
    rcn_reg: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.rpn_cls + self.rpn_reg + self.rcn_cls + self.rcn_reg

    def __add__(self, other):
        return DetectionLoss(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def scale(self, s):
        return DetectionLoss(*(getattr(self, f.name) * s for f in fields(self)))


def smooth_l1(x: torch.Tensor, beta: float) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax ** 2 / beta, ax - 0.5 * beta)


def faster_rcnn_loss(rpn_out: RpnOutput, roi_out: RoiOutput, rpn_tgt: RpnTargets,
                     roi_tgt: RoiTargets, beta: float = 1.0 / 9.0) -> DetectionLoss:
    """Standard two-stage detection loss for one image.

    Objectness BCE over sampled anchors, smooth-L1 on positive-anchor deltas
    (normalized by the sampled anchor count), softmax CE over sampled RoIs and
    smooth-L1 on foreground-RoI deltas of their gt class (normalized by RoI count).
    """
    logits = rpn_out.logits.reshape(-1)
    r = rpn_out.r.reshape(-1, 4)
    zero = logits.sum() * 0.0
    n_anchor = len(rpn_tgt.indices)
    if n_anchor == 0:
        log.warning("no sampled anchors; RPN loss contributes 0")
        rpn_cls = rpn_reg = zero
    else:
        idx = torch.as_tensor(rpn_tgt.indices)
        target = torch.as_tensor(rpn_tgt.labels, dtype=logits.dtype)
        rpn_cls = F.binary_cross_entropy_with_logits(logits[idx], target)
        pos = torch.as_tensor(rpn_tgt.positive)
        if len(pos):
            d = r[pos] - torch.as_tensor(rpn_tgt.deltas, dtype=r.dtype)
            rpn_reg = smooth_l1(d, beta).sum() / n_anchor
        else:
            rpn_reg = zero
    k = len(roi_tgt.labels)
    if k == 0:
        rcn_cls = rcn_reg = zero
    else:
        labels = torch.as_tensor(roi_tgt.labels)
        rcn_cls = F.cross_entropy(roi_out.p, labels)
        fg = torch.nonzero(labels > 0).flatten()
        if len(fg):
            t = roi_out.t[fg, labels[fg] - 1]
            d = t - torch.as_tensor(roi_tgt.deltas, dtype=t.dtype)[fg]
            rcn_reg = smooth_l1(d, beta).sum() / k
        else:
            rcn_reg = zero
    return DetectionLoss(rpn_cls, rpn_reg, rcn_cls, rcn_reg)


@dataclass
class ForwardPass:
    """Everything a training step needs from one student forward pass."""

    features: torch.Tensor
    rpn: RpnOutput
    loss: DetectionLoss
    anchors: np.ndarray = field(repr=False)


def detection_forward(model: Detector, images: torch.Tensor, targets, rng: np.random.Generator,
                      ) -> ForwardPass:
    """Batched forward pass with loss.

    ``targets`` is a list of ``(boxes (n, 4), labels (n,))`` per image with labels
    given as detector class indices. Losses are averaged over images.
    """
    cfg = model.config
    images = _as_batch(images)
    feats = extract_features(images, model)
    rpn = rpn_forward(feats, model)
    h, w = images.shape[-2:]
    anchors = generate_anchors(cfg.anchor_spec, w, h)
    q = rpn.q.detach().cpu().numpy()
    r = rpn.r.detach().cpu().numpy()
    rpn_tgts, roi_tgts, roi_rows = [], [], []
    for b, (gt_boxes, gt_labels) in enumerate(targets):
        rpn_tgts.append(rpn_targets(anchors, gt_boxes, cfg, rng))
        props, _ = propose_rois(q[b], r[b], anchors, cfg.pre_nms_train, cfg.post_nms_train,
                                cfg.proposal_nms, (w, h), cfg.min_proposal_size)
        tgt = roi_targets(props, gt_boxes, gt_labels, cfg, rng)
        roi_tgts.append(tgt)
        roi_rows.append(np.concatenate([np.full((len(tgt.rois), 1), b), tgt.rois], axis=1))
    rois = torch.as_tensor(np.concatenate(roi_rows, axis=0), dtype=feats.dtype)
    roi_out = rcn_forward(feats, rois, model)
    total = None
    start = 0
    for b in range(len(targets)):
        k = len(roi_tgts[b].labels)
        sub = RoiOutput(roi_out.p[start:start + k], roi_out.t[start:start + k])
        start += k
        part = faster_rcnn_loss(rpn[b], sub, rpn_tgts[b], roi_tgts[b], cfg.smooth_l1_beta)
        total = part if total is None else total + part
    return ForwardPass(feats, rpn, total.scale(1.0 / len(targets)), anchors)


# --- inference ------------------------------------------------------------------------------

@torch.no_grad()
def detect(image, model: Detector, score_thresh: float = 0.05, nms_iou: float = 0.5,
           max_detections: int = 100, image_id: str = "") -> list[Detection]:
    """Full inference pipeline for one image; keeps detections with score strictly above ``score_thresh``."""
    cfg = model.config
    x = _as_batch(image)
    h, w = x.shape[-2:]
    feats = extract_features(x, model)
    rpn = rpn_forward(feats, model)
    anchors = generate_anchors(cfg.anchor_spec, w, h)
    props, _ = propose_rois(rpn.q[0], rpn.r[0], anchors, cfg.pre_nms_test, cfg.post_nms_test,
                            cfg.proposal_nms, (w, h), cfg.min_proposal_size)
    if len(props) == 0:
        return []
    out = rcn_forward(feats, props, model)
    probs = out.probs.double().numpy()
    t = out.t.double().numpy()
    dets = []
    for c in range(model.class_count):
        scores = probs[:, c + 1]
        sel = np.flatnonzero(scores > score_thresh)
        if not len(sel):
            continue
        boxes = decode_boxes(props[sel], t[sel, c], cfg.rcn_reg_weights)
        boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, w)
        boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, h)
        keep = kernels.nms(boxes, scores[sel], nms_iou)
        for i in keep:
            dets.append(Detection(Box.from_seq(boxes[i]), c, float(scores[sel][i]), image_id))
    dets.sort(key=lambda d: -d.score)
    return dets[:max_detections]


# --- checkpoints ----------------------------------------------------------------------------

def save_checkpoint(model: Detector, path, extra: Optional[dict] = None) -> None:
    """Write parameters and metadata to a safetensors file.

    All metadata lives in a single ``incdet`` JSON string (format name, version,
    detector config, class names, caller extras) so the file bytes are stable.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "classes": model.classes,
        "extra": extra or {},
    }
    tensors = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_file(tensors, str(tmp), metadata={"incdet": json.dumps(meta, sort_keys=True)})
    tmp.replace(path)


def read_checkpoint_meta(path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        raw = (f.metadata() or {}).get("incdet")
    if raw is None:
        raise ConfigurationError(f"{path} is not an incdet checkpoint")
    meta = json.loads(raw)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return meta


def load_checkpoint(path) -> Detector:
    meta = read_checkpoint_meta(path)
    state = load_file(str(path))
    cfg = DetectorConfig.from_dict(meta["config"])
    model = Detector(cfg, len(meta["classes"]), meta["classes"])
    model = model.to(state["rcn_cls.weight"].dtype)
    model.load_state_dict(state)
    return model
