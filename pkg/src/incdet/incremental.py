"""Teacher/student incremental training: head expansion, teacher snapshots, SGD loop, schedules."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import distill as D
from .data import Dataset, Sample, strip_annotations
from .detector import (Detector, DetectorConfig, build_detector, detect, detection_forward,
                       generate_anchors, rcn_forward, rpn_forward, extract_features,
                       save_checkpoint)
from .evaluation import EvalReport, evaluate

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    """Schedule, dataset or checkpoint do not line up."""


@dataclass
class TaskSchedule:
    """Initial classes followed by one class group per incremental step."""

    initial_classes: list
    steps: list = field(default_factory=list)

    def __post_init__(self):
        self.initial_classes = list(self.initial_classes)
        self.steps = [list(s) for s in self.steps]
        seen = set()
        for group in [self.initial_classes] + self.steps:
            if not group:
                raise ScheduleError("every class group must be non-empty")
            if seen & set(group) or len(set(group)) != len(group):
                raise ScheduleError(f"class group {group} overlaps earlier classes")
            seen |= set(group)

    @property
    def all_classes(self) -> list:
        return self.initial_classes + [c for s in self.steps for c in s]

    def classes_after(self, step: int) -> list:
        """Classes known after step ``step`` (0 = base training)."""
        return self.initial_classes + [c for s in self.steps[:step] for c in s]

    @classmethod
    def from_vocabulary(cls, vocabulary: Sequence[str], n_initial: int, per_step: int = 1):
        """Alphabetical split: first ``n_initial`` names, then groups of ``per_step``."""
        names = sorted(vocabulary)
        rest = names[n_initial:]
        return cls(names[:n_initial], [rest[i:i + per_step] for i in range(0, len(rest), per_step)])


@dataclass
class TrainConfig:
    lr: float = 0.01
    lr_decay_iter: Optional[int] = None
    lr_decayed: Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iterations: int = 1000
    batch_size: int = 4
    seed: int = 0
    grad_clip: Optional[float] = 10.0
    distill: D.DistillationConfig = field(default_factory=D.DistillationConfig)

    def __post_init__(self):
        if isinstance(self.distill, dict):
            self.distill = D.DistillationConfig(**self.distill)
        if self.lr < 0 or (self.lr_decayed is not None and self.lr_decayed < 0):
            raise ValueError("learning rates must be >= 0")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")

    def lr_at(self, it: int) -> float:
        if self.lr_decay_iter is not None and it >= self.lr_decay_iter:
            return self.lr_decayed if self.lr_decayed is not None else self.lr * 0.1
        return self.lr

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class TeacherSnapshot:
    """Frozen deep copy of a detector and the classes it knows."""

    def __init__(self, model: Detector):
        self._model = copy.deepcopy(model)
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)
        self.old_classes = tuple(model.classes)

    @property
    def model(self) -> Detector:
        return self._model

    @property
    def class_count(self) -> int:
        return len(self.old_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, v in self._model.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def freeze_teacher(model) -> TeacherSnapshot:
    if isinstance(model, TeacherSnapshot):
        model = model.model
    return TeacherSnapshot(model)


def expand_output_heads(model: Detector, new_classes: Sequence[str], seed: int = 0,
                        init_scale: float = 0.1, new_bias: float = -0.5) -> Detector:
    """Copy of ``model`` whose RoI head predicts ``len(new_classes)`` more classes.

    Existing weights are copied exactly; new rows are uniform in
    ``+-init_scale/sqrt(fan_in)``, new classification biases start at ``new_bias``.
    """
    new_classes = list(new_classes)
    out = copy.deepcopy(model)
    if not new_classes:
        log.warning("expand_output_heads called with no new classes; returning a copy")
        return out
    dup = set(new_classes) & set(model.classes)
    if dup:
        raise ScheduleError(f"classes already known: {sorted(dup)}")
    n_new = len(new_classes)
    old_cls, old_reg = model.rcn_cls, model.rcn_reg
    fan_in = old_cls.in_features
    bound = init_scale / math.sqrt(fan_in)
    gen = torch.Generator().manual_seed(seed)
    dtype = old_cls.weight.dtype
    cls = torch.nn.Linear(fan_in, old_cls.out_features + n_new).to(dtype)
    reg = torch.nn.Linear(fan_in, old_reg.out_features + 4 * n_new).to(dtype)
    with torch.no_grad():
        cls.weight[:old_cls.out_features] = old_cls.weight
        cls.bias[:old_cls.out_features] = old_cls.bias
        cls.weight[old_cls.out_features:] = (torch.rand((n_new, fan_in), generator=gen,
                                                        dtype=torch.float64) * 2 - 1).to(dtype) * bound
        cls.bias[old_cls.out_features:] = new_bias
        reg.weight[:old_reg.out_features] = old_reg.weight
        reg.bias[:old_reg.out_features] = old_reg.bias
        reg.weight[old_reg.out_features:] = (torch.rand((4 * n_new, fan_in), generator=gen,
                                                        dtype=torch.float64) * 2 - 1).to(dtype) * bound
        reg.bias[old_reg.out_features:] = 0.0
    out.rcn_cls, out.rcn_reg = cls, reg
    out.classes = list(model.classes) + new_classes
    return out


def make_optimizer(model: Detector, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                           weight_decay=config.weight_decay)


@dataclass
class LossBreakdown:
    rcnn: float
    feature: float
    rpn: float
    rcn: float
    total: float
    rpn_cls: float = 0.0
    rpn_reg: float = 0.0
    rcn_cls: float = 0.0
    rcn_reg: float = 0.0

    def to_row(self) -> dict:
        return asdict(self)


LOSS_COLUMNS = ["step", "iteration", "lr", "rcnn", "feature", "rpn", "rcn", "total",
                "rpn_cls", "rpn_reg", "rcn_cls", "rcn_reg"]


def _stack_batch(batch: Sequence[Sample], classes) -> tuple:
    shapes = {s.image.shape for s in batch}
    if len(shapes) != 1:
        raise ValueError(f"batch images differ in shape: {sorted(shapes)}")
    images = torch.from_numpy(np.stack([s.image for s in batch]))
    return images, [s.targets(classes) for s in batch]


def distillation_terms(student: Detector, teacher: TeacherSnapshot, images: torch.Tensor,
                       fp, config: D.DistillationConfig, rng: np.random.Generator):
    """Feature, RPN and RoI-head distillation losses for one batch (batch means)."""
    t_model = teacher.model
    with torch.no_grad():
        f_te = extract_features(images, t_model)
        rpn_te = rpn_forward(f_te, t_model)
    f_dist = D.feature_distillation_loss(f_te, fp.features, config.feature_norm)
    rpn_dist = D.rpn_distillation_loss(rpn_te.q, rpn_te.r, fp.rpn.q, fp.rpn.r, config.T)
    h, w = images.shape[-2:]
    cfg = student.config
    rows = []
    q_te = rpn_te.q.numpy()
    r_te = rpn_te.r.numpy()
    for b in range(images.shape[0]):
        rois = D.select_distillation_rois(q_te[b], r_te[b], fp.anchors, (w, h), config, rng,
                                          cfg.pre_nms_train, cfg.proposal_nms, cfg.min_proposal_size)
        rows.append(np.concatenate([np.full((len(rois), 1), b), rois], axis=1))
    rois = torch.as_tensor(np.concatenate(rows, axis=0), dtype=fp.features.dtype)
    with torch.no_grad():
        out_te = rcn_forward(f_te, rois, t_model)
    out_st = rcn_forward(fp.features, rois, student)
    rcn_dist = D.rcn_distillation_loss(out_te.p, out_te.t, out_st.p, out_st.t)
    return f_dist, rpn_dist, rcn_dist


def train_step(student: Detector, teacher: Optional[TeacherSnapshot], batch: Sequence[Sample],
               optimizer: torch.optim.Optimizer, config: TrainConfig, rng: np.random.Generator,
               distill_rng: Optional[np.random.Generator] = None, iteration: int = 0) -> LossBreakdown:
    """One SGD update of ``student`` on the combined detection + distillation loss.

    Without a teacher the distillation terms are zero. RoI sampling for
    distillation draws from ``distill_rng`` so that the detection-loss sampling
    sequence does not depend on whether a teacher is present.
    """
    if teacher is not None and student.class_count <= teacher.class_count:
        raise ScheduleError("student must know more classes than its teacher")
    student.train()
    images, targets = _stack_batch(batch, student.classes)
    fp = detection_forward(student, images, targets, rng)
    rcnn = fp.loss.total
    zero = rcnn.new_zeros(())
    if teacher is not None:
        if distill_rng is None:
            distill_rng = np.random.default_rng(0)
        f_dist, rpn_dist, rcn_dist = distillation_terms(student, teacher, images, fp,
                                                        config.distill, distill_rng)
    else:
        f_dist = rpn_dist = rcn_dist = zero
    total = D.total_loss(rcnn, f_dist, rpn_dist, rcn_dist, config.distill)
    lr = config.lr_at(iteration)
    for g in optimizer.param_groups:
        g["lr"] = lr
    optimizer.zero_grad(set_to_none=False)
    total.backward()
    if config.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(student.parameters(), config.grad_clip)
    optimizer.step()
    return LossBreakdown(float(rcnn.detach()), float(f_dist.detach()), float(rpn_dist.detach()),
                         float(rcn_dist.detach()), float(total.detach()),
                         *(float(getattr(fp.loss, k).detach()) for k in
                           ("rpn_cls", "rpn_reg", "rcn_cls", "rcn_reg")))


def batches(n: int, batch_size: int, iterations: int, rng: np.random.Generator):
    """Index batches over shuffled epochs until ``iterations`` batches were produced."""
    it = 0
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            if it == iterations:
                return
            yield perm[start:start + batch_size]
            it += 1


def train(student: Detector, teacher: Optional[TeacherSnapshot], samples: Sequence[Sample],
          config: TrainConfig, on_step: Optional[Callable[[int, float, LossBreakdown], None]] = None
          ) -> Detector:
    """``config.iterations`` train steps over shuffled ``samples``; mutates and returns ``student``."""
    samples = list(samples)
    if not samples:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(config.seed)
    distill_rng = np.random.default_rng([config.seed, 1])
    optimizer = make_optimizer(student, config)
    for it, idx in enumerate(batches(len(samples), config.batch_size, config.iterations, rng)):
        out = train_step(student, teacher, [samples[i] for i in idx], optimizer, config, rng,
                         distill_rng, it)
        if on_step is not None:
            on_step(it, config.lr_at(it), out)
    student.eval()
    return student


@torch.no_grad()
def predict(model: Detector, samples: Sequence[Sample], score_thresh: float = 0.05,
            nms_iou: float = 0.5) -> dict:
    model.eval()
    return {s.image_id: detect(s.image, model, score_thresh, nms_iou, image_id=s.image_id)
            for s in samples}


def evaluate_model(model: Detector, samples: Sequence[Sample], old_classes=(), new_classes=(),
                   iou_thresholds=(0.5,)) -> EvalReport:
    dets = predict(model, samples)
    return evaluate(dets, samples, model.classes, iou_thresholds, old_classes, new_classes)


def run_incremental_step(student: Detector, teacher: Optional[TeacherSnapshot], dataset,
                         config: TrainConfig, eval_samples: Optional[Sequence[Sample]] = None,
                         on_step=None, iou_thresholds=(0.5,)):
    """Train the (already expanded) student on new-class data; evaluate on all known classes.

    ``dataset`` must already carry only new-class annotations. Returns
    ``(student, report)``; the report is ``None`` without ``eval_samples``.
    """
    samples = dataset.samples if isinstance(dataset, Dataset) else list(dataset)
    if not samples:
        raise ValueError("empty dataset for incremental step")
    train(student, teacher, samples, config, on_step)
    report = None
    if eval_samples is not None:
        old = list(teacher.old_classes) if teacher is not None else []
        new = [c for c in student.classes if c not in old]
        report = evaluate_model(student, eval_samples, old, new, iou_thresholds)
    return student, report


@dataclass
class StepResult:
    step: int
    classes: list
    model: Detector
    report: Optional[EvalReport]
    checkpoint: Optional[Path] = None


def run_schedule(schedule: TaskSchedule, datasets: Sequence[Dataset], detector_config: DetectorConfig,
                 base_config: TrainConfig, incr_config: TrainConfig,
                 eval_samples: Optional[Sequence[Sample]] = None, out_dir=None,
                 base_model: Optional[Detector] = None, on_step=None,
                 iou_thresholds=(0.5,)) -> list:
    """Base training followed by one teacher->student step per schedule entry.

    ``datasets[0]`` feeds base training and ``datasets[i]`` step ``i``; each is
    stripped to the classes of its step. Pass ``base_model`` to skip base training;
    ``datasets`` then holds only the per-step sets and no step-0 checkpoint is written.
    """
    datasets = list(datasets)
    need = len(schedule.steps) + (1 if base_model is None else 0)
    if len(datasets) != need:
        raise ScheduleError(f"{len(datasets)} datasets for {len(schedule.steps)} steps (need {need})")
    if base_model is not None:
        datasets = [None] + datasets
    for i, ds in enumerate(datasets):
        if ds is None:
            continue
        group = schedule.initial_classes if i == 0 else schedule.steps[i - 1]
        missing = set(group) - set(ds.classes)
        if missing:
            raise ScheduleError(f"dataset {i} lacks classes {sorted(missing)}")
    if base_model is not None and list(base_model.classes) != schedule.initial_classes:
        raise ScheduleError(f"base model classes {base_model.classes} != "
                            f"schedule initial classes {schedule.initial_classes}")
    out_dir = Path(out_dir) if out_dir is not None else None
    results = []

    def finish(step, model, report):
        ckpt = None
        if out_dir is not None and not (step == 0 and base_model is not None):
            ckpt = out_dir / f"step{step}.safetensors"
            save_checkpoint(model, ckpt, {"step": step})
        results.append(StepResult(step, list(model.classes), model, report, ckpt))

    def hook(step):
        if on_step is None:
            return None
        return lambda it, lr, out: on_step(step, it, lr, out)

    if base_model is None:
        model = build_detector(detector_config, schedule.initial_classes, seed=base_config.seed)
        base_ds = strip_annotations(datasets[0], schedule.initial_classes)
        train(model, None, base_ds.samples, base_config, hook(0))
    else:
        model = copy.deepcopy(base_model)
    report = (evaluate_model(model, eval_samples, [], model.classes, iou_thresholds)
              if eval_samples is not None else None)
    finish(0, model, report)
    for i, group in enumerate(schedule.steps, start=1):
        teacher = freeze_teacher(model)
        student = expand_output_heads(model, group, seed=incr_config.seed + i)
        ds = strip_annotations(datasets[i], group)
        cfg = copy.deepcopy(incr_config)
        cfg.seed = incr_config.seed + 1000 * i
        model, report = run_incremental_step(student, teacher, ds, cfg, eval_samples, hook(i),
                                             iou_thresholds)
        finish(i, model, report)
    return results
