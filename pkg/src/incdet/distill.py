"""Adaptive multi-network distillation between a frozen teacher and a student.

Feature and RPN terms are one-sided: the teacher output is a lower bound and
the student is only penalized where it falls below it. The RoI-head term is a
plain L2 on class-centered scores and regression outputs of the old classes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch

from .detector import propose_rois


class NonFiniteLossError(FloatingPointError):
    """A loss term evaluated to NaN or inf."""

    def __init__(self, term: str, value):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass
class DistillationConfig:
    T: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    roi_pool_size: int = 128
    roi_sample_size: int = 64
    feature_norm: str = "global"  # or "channel"

    def __post_init__(self):
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("distillation weights must be >= 0")
        if not 1 <= self.roi_sample_size <= self.roi_pool_size:
            raise ValueError("need 1 <= roi_sample_size <= roi_pool_size")
        if self.feature_norm not in ("global", "channel"):
            raise ValueError(f"unknown feature_norm {self.feature_norm!r}")

    @property
    def active(self) -> bool:
        return max(self.lambda1, self.lambda2, self.lambda3) > 0

    def to_dict(self):
        return asdict(self)


def normalize_feature_map(f: torch.Tensor, scope: str = "global") -> torch.Tensor:
    """Subtract the mean of each map.

    ``f`` is ``(C, H, W)`` or ``(B, C, H, W)``; with ``scope="global"`` one mean
    per map (per batch item), with ``"channel"`` one mean per channel.
    """
    if f.numel() == 0:
        raise ValueError("empty feature map")
    if f.dim() == 3:
        return normalize_feature_map(f.unsqueeze(0), scope)[0]
    dims = (1, 2, 3) if scope == "global" else (2, 3)
    return f - f.mean(dim=dims, keepdim=True)


def feature_distillation_loss(f_te: torch.Tensor, f_st: torch.Tensor, scope: str = "global"
                              ) -> torch.Tensor:
    """Mean over all activations of ``max(f_te - f_st, 0)`` on zero-mean maps."""
    if f_te.shape != f_st.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_te.shape)} vs {tuple(f_st.shape)}")
    return one_sided_l1(normalize_feature_map(f_te.detach(), scope), normalize_feature_map(f_st, scope))


def one_sided_l1(te: torch.Tensor, st: torch.Tensor) -> torch.Tensor:
    """``mean(|te - st|)`` over entries with ``te > st``; other entries contribute 0."""
    diff = te.detach() - st
    return torch.where(diff > 0, diff, torch.zeros_like(diff)).sum() / diff.numel()


def rpn_distillation_loss(q_te, r_te, q_st, r_st, T: float = 0.1) -> torch.Tensor:
    """One-sided L2 on objectness with a gated L2 on box deltas.

    For each anchor where ``q_te > q_st`` the loss is ``(q_te - q_st)**2`` plus
    ``||r_te - r_st||**2`` if also ``q_te > q_st + T``; averaged over all anchors.
    ``q`` has shape ``(..., N)`` and ``r`` ``(..., N, 4)``.
    """
    q_te, r_te = q_te.detach(), r_te.detach()
    if q_te.shape != q_st.shape or r_te.shape != r_st.shape or r_st.shape[:-1] != q_st.shape:
        raise ValueError(f"misaligned anchors: q {tuple(q_te.shape)}/{tuple(q_st.shape)}, "
                         f"r {tuple(r_te.shape)}/{tuple(r_st.shape)}")
    dq = q_te - q_st
    active = (dq > 0).to(q_st.dtype)
    beta = (q_te > q_st + T).detach().to(q_st.dtype)
    reg = ((r_te - r_st) ** 2).sum(-1)
    per_anchor = active * (dq ** 2 + beta * reg)
    return per_anchor.sum() / q_st.numel()


def rpn_distillation_terms(q_te, r_te, q_st, r_st, T: float = 0.1):
    """Classification and regression parts of :func:`rpn_distillation_loss`, each divided by N."""
    q_te, r_te = q_te.detach(), r_te.detach()
    dq = q_te - q_st
    active = (dq > 0).to(q_st.dtype)
    beta = (q_te > q_st + T).to(q_st.dtype)
    n = q_st.numel()
    cls = (active * dq ** 2).sum() / n
    reg = (active * beta * ((r_te - r_st) ** 2).sum(-1)).sum() / n
    return cls, reg


def select_distillation_rois(q_te, r_te, anchors, image_size, config: DistillationConfig,
                             rng: np.random.Generator, pre_nms_k: int = 600, nms_iou: float = 0.7,
                             min_size: float = 1.0) -> np.ndarray:
    """Sample RoIs for RoI-head distillation from the teacher's proposals.

    Proposals are the teacher's decoded, NMS-filtered boxes; the
    ``roi_pool_size`` with the lowest background score (highest objectness)
    form the pool and ``roi_sample_size`` are drawn uniformly without replacement.
    """
    boxes, _ = propose_rois(q_te, r_te, anchors, pre_nms_k, config.roi_pool_size, nms_iou,
                            image_size, min_size)
    return sample_rois(boxes, config.roi_sample_size, rng)


def sample_rois(pool: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = min(k, len(pool))
    if n == len(pool):
        return pool
    idx = np.sort(rng.choice(len(pool), size=n, replace=False))
    return pool[idx]


def rcn_distillation_loss(p_te, t_te, p_st, t_st, n_old: Optional[int] = None) -> torch.Tensor:
    """L2 between class-centered old-class scores plus L2 on old-class deltas, over ``K * C_o``.

    ``p_*`` are ``(K, classes + 1)`` score rows with background in column 0 and
    ``t_*`` are ``(K, classes, 4)``. The teacher defines ``C_o = p_te.shape[1]``;
    student columns beyond it (new classes) are dropped before centering.
    """
    c_o = p_te.shape[1] if n_old is None else n_old + 1
    if p_te.shape[1] != c_o or p_st.shape[1] < c_o:
        raise ValueError(f"score columns: teacher {p_te.shape[1]}, student {p_st.shape[1]}, C_o {c_o}")
    if t_te.shape[1] != c_o - 1 or t_st.shape[1] < c_o - 1:
        raise ValueError(f"delta columns: teacher {t_te.shape[1]}, student {t_st.shape[1]}")
    if p_te.shape[0] != p_st.shape[0]:
        raise ValueError("teacher and student RoI counts differ")
    k = p_st.shape[0]
    if k == 0:
        return p_st.sum() * 0.0
    p_te = p_te.detach()
    t_te = t_te.detach()
    ps = p_st[:, :c_o]
    pt = p_te - p_te.mean(dim=1, keepdim=True)
    ps = ps - ps.mean(dim=1, keepdim=True)
    dt = t_te - t_st[:, :c_o - 1]
    return (((pt - ps) ** 2).sum() + (dt ** 2).sum()) / (k * c_o)


def total_loss(rcnn_loss, f_dist, rpn_dist, rcn_dist, config: DistillationConfig):
    """``rcnn + l1*f + l2*rpn + l3*rcn``; terms weighted by zero are left out of the graph."""
    terms = {"rcnn": rcnn_loss, "feature": f_dist, "rpn": rpn_dist, "rcn": rcn_dist}
    for name, v in terms.items():
        val = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(val):
            raise NonFiniteLossError(name, val)
    out = rcnn_loss
    for lam, v in ((config.lambda1, f_dist), (config.lambda2, rpn_dist), (config.lambda3, rcn_dist)):
        if lam != 0:
            out = out + lam * v
    return out
