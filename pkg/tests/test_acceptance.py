"""Acceptance criteria 1-10, one test each, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the summary) or
``python tests/test_acceptance.py``. Criterion 8 trains several detectors and
takes roughly eight minutes on one CPU core.
"""

import math
import statistics
import sys
import time

import numpy as np
import pytest
import torch

import oracles
from incdet import distill as D
from incdet import detector as det
from incdet.data import SyntheticSceneSpec, generate_synthetic_dataset, strip_annotations
from incdet.geometry import AnchorGridSpec, Box, generate_anchors, missing_annotation_stats
from incdet.incremental import (TaskSchedule, TrainConfig, evaluate_model, expand_output_heads,
                                freeze_teacher, run_incremental_step, run_schedule, train)
from test_eval import random_fixture
from test_geometry import constructed_scene

RESULTS = {}


def report(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def t64(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def test_c01_anchor_count():
    t0 = time.perf_counter()
    n = len(generate_anchors(AnchorGridSpec((0.5, 1, 2), (2, 4, 8, 16, 32), 16, 16), 480, 364))
    dt = time.perf_counter() - t0
    report(1, n == 10350 and dt < 1.0, f"{n} anchors for 480x364 in {dt * 1e3:.1f} ms (want 10350, < 1 s)")


def test_c02_false_negative_rates():
    got = []
    for fn, neg in [(4, 7476), (22, 8705)]:
        anchors, full, visible = constructed_scene(fn, neg)
        s = missing_annotation_stats(anchors, full, visible)
        got.append((s.n_false_negative, s.n_negative, round(s.false_negative_rate, 4)))
    ok = got == [(4, 7476, 0.0005), (22, 8705, 0.0025)]
    report(2, ok, "rates " + ", ".join(f"{r * 100:.2f}% (fn={f}, neg={n})" for f, n, r in got)
           + " (want 0.05%, 0.25%)")


def test_c03_zero_identity():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        c, h, w = rng.integers(1, 9, 3)
        f = t64(rng.normal(size=(2, c, h, w)) * rng.uniform(0.1, 10))
        n = int(rng.integers(1, 300))
        q = t64(rng.random(n))
        r = t64(rng.normal(size=(n, 4)))
        k, c_o = int(rng.integers(1, 65)), int(rng.integers(2, 8))
        p = t64(rng.normal(size=(k, c_o)) * 5)
        tt = t64(rng.normal(size=(k, c_o - 1, 4)))
        vals = [D.feature_distillation_loss(f, f.clone()),
                D.rpn_distillation_loss(q, r, q.clone(), r.clone(), float(rng.uniform(0, 0.5))),
                D.rcn_distillation_loss(p, tt, p.clone(), tt.clone())]
        worst = max(worst, max(abs(float(v)) for v in vals))
    report(3, worst <= 1e-9, f"max |loss| over 100 identical pairs = {worst:.3g} (want <= 1e-9)")


def test_c04_one_sidedness():
    rng = np.random.default_rng(4)
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        te = t64(rng.normal(size=n))
        st = t64(rng.normal(size=n))
        mask = t64(rng.random(n) < rng.uniform(0.05, 1.0))
        raised = st + mask * t64(rng.exponential(rng.uniform(0.01, 2), n))
        # feature term on normalized maps
        if float(D.one_sided_l1(te, raised)) > float(D.one_sided_l1(te, st)):
            violations += 1
        q_te, q_st = t64(rng.random(n)), t64(rng.random(n))
        q_up = torch.clamp(q_st + mask * t64(rng.uniform(0, 0.5, n)), max=1.0)
        r = t64(rng.normal(size=(n, 4)))
        before = float(D.rpn_distillation_terms(q_te, r, q_st, r)[0])
        after = float(D.rpn_distillation_terms(q_te, r, q_up, r)[0])
        if after > before:
            violations += 1
    report(4, violations == 0, f"{violations} increases in 1000 raised-student trials (want 0)")


def _kink_free_point(rng, T=0.1, h=1e-4):
    """Random student/teacher inputs with every gate comparison at least 10*h from its kink."""
    while True:
        f_te, f_st = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
        d = (f_te - f_te.mean()) - (f_st - f_st.mean())
        q_te, q_st = rng.random(12), rng.random(12)
        dq = q_te - q_st
        if np.abs(d).min() >= 10 * h and np.abs(dq).min() >= 10 * h and np.abs(dq - T).min() >= 10 * h:
            break
    return dict(f_te=f_te, f_st=f_st, q_te=q_te, q_st=q_st, r_te=rng.normal(size=(12, 4)),
                r_st=rng.normal(size=(12, 4)), p_te=rng.normal(size=(5, 4)), t_te=rng.normal(size=(5, 3, 4)),
                p_st=rng.normal(size=(5, 6)), t_st=rng.normal(size=(5, 5, 4)))


def _grad_rel_err(fn, x, h):
    xt = t64(x).requires_grad_(True)
    fn(xt).backward()
    analytic = xt.grad.numpy()
    fd = oracles.central_diff(lambda v: float(fn(t64(v))), x, h)
    return np.abs(analytic - fd).max() / max(np.abs(analytic).max(), np.abs(fd).max(), 1e-12)


def test_c05_gradient_checks():
    rng = np.random.default_rng(5)
    h, T = 1e-4, 0.1
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        P = _kink_free_point(rng, T, h)
        errs = [
            _grad_rel_err(lambda s: D.feature_distillation_loss(t64(P["f_te"]), s), P["f_st"], h),
            _grad_rel_err(lambda s: D.rpn_distillation_loss(t64(P["q_te"]), t64(P["r_te"]), s,
                                                            t64(P["r_st"]), T), P["q_st"], h),
            _grad_rel_err(lambda s: D.rpn_distillation_loss(t64(P["q_te"]), t64(P["r_te"]),
                                                            t64(P["q_st"]), s, T), P["r_st"], h),
            _grad_rel_err(lambda s: D.rcn_distillation_loss(t64(P["p_te"]), t64(P["t_te"]), s,
                                                            t64(P["t_st"])), P["p_st"], h),
            _grad_rel_err(lambda s: D.rcn_distillation_loss(t64(P["p_te"]), t64(P["t_te"]),
                                                            t64(P["p_st"]), s), P["t_st"], h),
        ]
        worst = max(worst, *errs)
    dt = time.perf_counter() - t0
    report(5, worst < 1e-3 and dt < 10, f"max relative error {worst:.2e} over 50 points, "
                                        f"{dt:.2f} s (want < 1e-3, < 10 s)")


def test_c06_gate():
    rng = np.random.default_rng(6)
    wrong = 0
    for _ in range(10000):
        q_te, q_st = rng.random(), rng.random()
        r_te, r_st = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
        _, reg = D.rpn_distillation_terms(t64([q_te]), t64(r_te), t64([q_st]), t64(r_st), 0.1)
        if (float(reg) != 0.0) != (q_te > q_st + 0.1):
            wrong += 1
    report(6, wrong == 0, f"{wrong} gate mismatches in 10000 scalar instances (want 0)")


def test_c07_evaluation_oracle():
    from incdet.evaluation import evaluate

    worst = 0.0
    for seed in range(5):
        samples, dets, flat, gts, classes = random_fixture(100 + seed, n_images=10)
        for thr in (0.5, 0.75):
            got = evaluate(dets, samples, classes, (thr,)).map_at(thr)
            want, _ = oracles.slow_map(flat, gts, classes, thr)
            worst = max(worst, abs(got - want))
    report(7, worst <= 1e-9, f"max |mAP - brute force| = {worst:.2e} on 10-image fixtures (want <= 1e-9)")


FORGET_CLASSES = ("circle", "square", "triangle")


def forgetting_run(seed, base_iters=1500, incr_iters=800):
    """Base on 2 shapes, add the third with old annotations stripped; distilled vs lambda=0."""
    base = generate_synthetic_dataset(SyntheticSceneSpec(seed=seed * 10 + 1, draw_classes=FORGET_CLASSES[:2]),
                                      400, "b")
    inc = generate_synthetic_dataset(SyntheticSceneSpec(seed=seed * 10 + 2, require="triangle"), 200, "i")
    test = generate_synthetic_dataset(SyntheticSceneSpec(seed=seed * 10 + 3), 100, "t")
    model = det.build_detector(det.DetectorConfig(), list(FORGET_CLASSES[:2]), seed=seed)
    train(model, None, base.samples, TrainConfig(lr=0.02, iterations=base_iters, batch_size=4,
                                                 lr_decay_iter=int(base_iters * 0.75), seed=seed))
    teacher = freeze_teacher(model)
    ds = strip_annotations(inc, ["triangle"])
    out = {}
    for name, lam in (("distill", 1.0), ("control", 0.0)):
        student = expand_output_heads(model, ["triangle"], seed=seed)
        cfg = TrainConfig(lr=0.005, iterations=incr_iters, batch_size=4, seed=seed,
                          distill=D.DistillationConfig(lambda1=lam, lambda2=lam, lambda3=lam))
        _, rep = run_incremental_step(student, teacher, ds, cfg, test.samples)
        out[name] = rep
    return out


@pytest.mark.slow
def test_c08_forgetting():
    t0 = time.perf_counter()
    runs = [forgetting_run(s) for s in (0, 1, 2)]
    dt = time.perf_counter() - t0
    d_old = [r["distill"].old_map50 for r in runs]
    c_old = [r["control"].old_map50 for r in runs]
    d_new = [r["distill"].new_map50 for r in runs]
    gap = statistics.median(d_old) - statistics.median(c_old)
    ok = gap >= 0.10 and min(d_new) >= 0.5 and dt <= 1800
    report(8, ok, f"old mAP@0.5 distill {['%.3f' % v for v in d_old]} vs control "
                  f"{['%.3f' % v for v in c_old]}, median gap {100 * gap:.1f} pts; new AP "
                  f"{['%.3f' % v for v in d_new]}; {dt / 60:.1f} min (want >= 10 pts, >= 0.5, <= 30 min)")


SMALL = SyntheticSceneSpec(width=48, height=48, min_size=12, max_size=20, max_objects=2, seed=9)


def test_c09_protocol_invariants(tmp_path):
    data = generate_synthetic_dataset(SMALL, 8)
    base = det.build_detector(det.DetectorConfig(), ["circle", "square"], seed=0)
    train(base, None, strip_annotations(data, ["circle", "square"]).samples,
          TrainConfig(lr=0.01, iterations=10, batch_size=2))
    teacher = freeze_teacher(base)
    fp_before = teacher.fingerprint()
    student = expand_output_heads(base, ["triangle"], seed=1)
    preserved = all(torch.equal(getattr(student, h).weight[:getattr(base, h).out_features],
                                getattr(base, h).weight) and
                    torch.equal(getattr(student, h).bias[:getattr(base, h).out_features], getattr(base, h).bias)
                    for h in ("rcn_cls", "rcn_reg"))
    run_incremental_step(student, teacher, strip_annotations(data, ["triangle"]),
                         TrainConfig(lr=0.01, iterations=20, batch_size=2))
    immutable = teacher.fingerprint() == fp_before
    sched = TaskSchedule(["circle", "square"], [["triangle"]])
    cfg = TrainConfig(lr=0.01, iterations=5, batch_size=2, seed=4)
    for d in ("a", "b"):
        run_schedule(sched, [data, data], det.DetectorConfig(), cfg, cfg, out_dir=tmp_path / d)
    deterministic = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                        for f in ("step0.safetensors", "step1.safetensors"))
    report(9, immutable and preserved and deterministic,
           f"teacher unchanged={immutable}, old head preserved={preserved}, "
           f"identical checkpoints={deterministic}")


def test_c10_zero_lambda_degeneracy():
    data = strip_annotations(generate_synthetic_dataset(SMALL, 8), ["triangle"])
    base = det.build_detector(det.DetectorConfig(), ["circle", "square"], seed=0)
    cfg = TrainConfig(lr=0.01, iterations=10, batch_size=2, seed=2,
                      distill=D.DistillationConfig(lambda1=0, lambda2=0, lambda3=0))
    trajs = []
    for teacher in (freeze_teacher(base), None):
        student = expand_output_heads(base, ["triangle"], seed=1)
        traj = []
        train(student, teacher, data.samples, cfg,
              on_step=lambda *a: traj.append([p.detach().clone() for p in student.parameters()]))
        trajs.append(traj)
    same = len(trajs[0]) == 10 and all(all(torch.equal(x, y) for x, y in zip(a, b))
                                       for a, b in zip(*trajs))
    report(10, same, f"lambda=0 vs plain fine-tune over {len(trajs[0])} steps: "
                     f"{'bitwise identical' if same else 'DIFFERENT'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
