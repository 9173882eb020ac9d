import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from incdet import detector as det
from incdet.data import SyntheticSceneSpec, generate_synthetic_dataset
from incdet.geometry import Box, ConfigurationError, generate_anchors, iou
from incdet.incremental import TrainConfig, train

TINY = det.DetectorConfig(channels=(4, 4, 4), rpn_channels=4, roi_pool_size=2, rcn_hidden=8,
                          scales=(1.0, 2.0), base_size=8.0, rpn_batch=32, roi_batch=16,
                          pre_nms_train=100, post_nms_train=20)


def tiny_model(seed=0, dtype=torch.float64):
    return det.build_detector(TINY, ["a", "b"], seed=seed, dtype=dtype)


@pytest.fixture(scope="module")
def default_model():
    return det.build_detector(det.DetectorConfig(), ["circle", "square"], seed=0)


class TestForwardShapes:
    def test_feature_shape(self, default_model):
        f = det.extract_features(torch.rand(3, 64, 64), default_model)
        assert f.shape == (1, 64, 4, 4)

    def test_odd_size_rounds_up(self, default_model):
        f = det.extract_features(torch.rand(3, 50, 70), default_model)
        assert f.shape[-2:] == (math.ceil(50 / 16), math.ceil(70 / 16))

    def test_channel_mismatch(self, default_model):
        with pytest.raises(ConfigurationError):
            det.extract_features(torch.rand(1, 64, 64), default_model)

    def test_zero_backbone(self):
        m = det.build_detector(det.DetectorConfig(), ["x"], seed=0)
        with torch.no_grad():
            for p in m.backbone.parameters():
                p.zero_()
        f = det.extract_features(torch.zeros(3, 64, 64), m)
        assert torch.count_nonzero(f) == 0

    def test_rpn_counts(self):
        cfg = det.DetectorConfig(scales=(1, 2, 4, 8, 16))
        m = det.build_detector(cfg, ["x"], seed=0)
        out = det.rpn_forward(det.extract_features(torch.rand(3, 64, 64), m), m)
        assert out.q.shape == (1, 240) and out.r.shape == (1, 240, 4)
        assert len(generate_anchors(cfg.anchor_spec, 64, 64)) == 240

    def test_rpn_zero_head_half(self, default_model):
        m = det.build_detector(det.DetectorConfig(), ["x"], seed=0)
        with torch.no_grad():
            m.rpn_cls.weight.zero_()
            m.rpn_cls.bias.zero_()
        out = det.rpn_forward(det.extract_features(torch.rand(3, 64, 64), m), m)
        assert torch.all(out.q == 0.5)

    def test_deterministic_forward(self):
        x = torch.rand(3, 48, 48, generator=torch.Generator().manual_seed(1))
        outs = []
        for _ in range(2):
            m = det.build_detector(det.DetectorConfig(), ["a", "b"], seed=7)
            f = det.extract_features(x, m)
            rpn = det.rpn_forward(f, m)
            rcn = det.rcn_forward(f, np.array([[0, 0, 30, 30.0], [10, 5, 40, 47]]), m)
            outs.append([f.detach().numpy().tobytes(), rpn.logits.detach().numpy().tobytes(),
                         rcn.p.detach().numpy().tobytes()])
        assert outs[0] == outs[1]

    def test_rcn_shapes(self, default_model):
        f = det.extract_features(torch.rand(3, 64, 64), default_model)
        out = det.rcn_forward(f, np.array([[0, 0, 20, 20.0]] * 5), default_model)
        assert out.p.shape == (5, 3) and out.t.shape == (5, 2, 4)
        empty = det.rcn_forward(f, np.zeros((0, 4)), default_model)
        assert empty.p.shape == (0, 3)

    def test_rcn_rowwise(self, default_model):
        f = det.extract_features(torch.rand(3, 64, 64), default_model)
        rois = np.array([[0, 0, 20, 20.0], [10, 10, 50, 40], [0, 0, 20, 20], [5, 30, 60, 60]])
        out = det.rcn_forward(f, rois, default_model)
        torch.testing.assert_close(out.p[0], out.p[2], rtol=0, atol=0)
        perm = [3, 1, 0, 2]
        out2 = det.rcn_forward(f, rois[perm], default_model)
        torch.testing.assert_close(out2.p, out.p[perm], rtol=1e-6, atol=1e-7)
        torch.testing.assert_close(out2.t, out.t[perm], rtol=1e-6, atol=1e-7)


class TestBoxCoding:
    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        def boxes():
            xy = rng.uniform(0, 100, (50, 2))
            return np.concatenate([xy, xy + rng.uniform(1, 40, (50, 2))], 1)

        ref, gt = boxes(), boxes()
        for w in [(1, 1, 1, 1), (10, 10, 5, 5)]:
            d = det.encode_boxes(ref, gt, w)
            np.testing.assert_allclose(det.decode_boxes(ref, d, w), gt, atol=1e-9)

    def test_zero_delta_identity(self):
        ref = np.array([[1.0, 2, 11, 22]])
        np.testing.assert_allclose(det.decode_boxes(ref, np.zeros((1, 4))), ref)


class TestProposals:
    def anchors(self):
        return generate_anchors(det.DetectorConfig().anchor_spec, 64, 64)

    def test_equal_scores_zero_deltas(self):
        a = self.anchors()
        q = np.full(len(a), 0.5)
        boxes, scores = det.propose_rois(q, np.zeros((len(a), 4)), a, 10_000, 10_000, 0.7, (64, 64))
        clipped = np.clip(a, 0, 64)
        want = oracles.brute_nms([tuple(b) for b in clipped], [0.5] * len(a), 0.7)
        np.testing.assert_allclose(boxes, clipped[want])
        assert boxes[0].tolist() == clipped[0].tolist()

    def test_dominant_first(self):
        a = self.anchors()
        q = np.full(len(a), 0.1)
        q[37] = 0.99
        boxes, scores = det.propose_rois(q, np.zeros((len(a), 4)), a, 50, 10, 0.7, (64, 64))
        np.testing.assert_allclose(boxes[0], np.clip(a[37], 0, 64))
        assert scores[0] == 0.99
        assert np.all(np.diff(scores) <= 0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([0.3, 0.5, 0.7]))
    def test_matches_brute_force_nms(self, seed, thresh):
        a = self.anchors()
        rng = np.random.default_rng(seed)
        q = rng.random(len(a))
        r = rng.normal(0, 0.2, (len(a), 4))
        boxes, scores = det.propose_rois(q, r, a, 1000, 1000, thresh, (64, 64), min_size=0.0)
        dec = np.clip(det.decode_boxes(a, r), 0, 64)
        keep = oracles.brute_nms([tuple(b) for b in dec], list(q), thresh)
        np.testing.assert_allclose(boxes, dec[keep])
        assert boxes.min() >= 0 and boxes[:, [0, 2]].max() <= 64 and boxes[:, [1, 3]].max() <= 64

    def test_bad_counts(self):
        a = self.anchors()
        with pytest.raises(ConfigurationError):
            det.propose_rois(np.zeros(len(a)), np.zeros((len(a), 4)), a, 0, 5, 0.7, (64, 64))


def loss_oracle(rpn_logits, rpn_r, rpn_tgt, roi_p, roi_t, roi_tgt, beta):
    """Scalar re-implementation of the four detection loss terms."""
    n = len(rpn_tgt.indices)
    bce = 0.0
    for i, y in zip(rpn_tgt.indices, rpn_tgt.labels):
        p = oracles.sigmoid(rpn_logits[i])
        bce += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    reg = 0.0
    for k, i in enumerate(rpn_tgt.positive):
        reg += sum(oracles.smooth_l1(rpn_r[i][j] - rpn_tgt.deltas[k][j], beta) for j in range(4))
    kk = len(roi_tgt.labels)
    ce = 0.0
    rreg = 0.0
    for i, lab in enumerate(roi_tgt.labels):
        row = roi_p[i]
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        ce += lse - row[lab]
        if lab > 0:
            rreg += sum(oracles.smooth_l1(roi_t[i][lab - 1][j] - roi_tgt.deltas[i][j], beta) for j in range(4))
    return bce / n, reg / n, ce / kk, rreg / kk


def fixed_instance(seed=0, model=None, empty_gt=False):
    model = model or tiny_model(seed)
    rng = np.random.default_rng(seed)
    img = torch.rand(1, 3, 24, 24, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    gt = np.zeros((0, 4)) if empty_gt else np.array([[2.0, 3.0, 14.0, 13.0], [12.0, 10.0, 23.0, 22.0]])
    labels = np.zeros(0, int) if empty_gt else np.array([0, 1])
    anchors = generate_anchors(TINY.anchor_spec, 24, 24)
    rpn_t = det.rpn_targets(anchors, gt, TINY, rng)
    props = np.array([[0, 0, 12, 12.0], [3, 3, 15, 14], [10, 9, 22, 21], [0, 12, 10, 24]])
    roi_t = det.roi_targets(props, gt, labels, TINY, rng)
    return model, img, rpn_t, roi_t


class TestDetectionLoss:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_terms_match_oracle(self, seed):
        model, img, rpn_t, roi_t = fixed_instance(seed)
        with torch.no_grad():
            f = det.extract_features(img, model)
            rpn = det.rpn_forward(f, model)
            roi = det.rcn_forward(f, roi_t.rois, model)
            # push some deltas away from zero so both smooth-L1 branches are exercised
            rpn = det.RpnOutput(rpn.logits * 50, rpn.r + torch.linspace(-0.5, 0.5, rpn.r.numel(),
                                                                          dtype=torch.float64).view_as(rpn.r))
            roi = det.RoiOutput(roi.p * 30, roi.t + 0.3)
        got = det.faster_rcnn_loss(rpn, roi, rpn_t, roi_t, TINY.smooth_l1_beta)
        want = loss_oracle(rpn.logits[0].tolist(), rpn.r[0].tolist(), rpn_t, roi.p.tolist(),
                           roi.t.tolist(), roi_t, TINY.smooth_l1_beta)
        np.testing.assert_allclose([float(got.rpn_cls), float(got.rpn_reg), float(got.rcn_cls),
                                    float(got.rcn_reg)], want, rtol=1e-10, atol=1e-12)
        assert float(got.rpn_reg) > 0 and float(got.rcn_reg) > 0

    def test_empty_gt_structure(self):
        model, img, rpn_t, roi_t = fixed_instance(0, empty_gt=True)
        assert rpn_t.labels.sum() == 0 and len(rpn_t.indices) > 0
        assert (roi_t.labels == 0).all()
        f = det.extract_features(img, model)
        out = det.faster_rcnn_loss(det.rpn_forward(f, model), det.rcn_forward(f, roi_t.rois, model),
                                   rpn_t, roi_t)
        out = {k: float(getattr(out, k).detach()) for k in ("rpn_cls", "rpn_reg", "rcn_cls", "rcn_reg")}
        assert out["rpn_reg"] == 0 and out["rcn_reg"] == 0
        assert out["rpn_cls"] > 0 and out["rcn_cls"] > 0

    def test_perfect_prediction(self):
        model, img, rpn_t, roi_t = fixed_instance(1)
        n = len(generate_anchors(TINY.anchor_spec, 24, 24))
        logits = torch.full((1, n), -60.0, dtype=torch.float64)
        logits[0, rpn_t.positive] = 60.0
        r = torch.zeros(1, n, 4, dtype=torch.float64)
        r[0, rpn_t.positive] = torch.as_tensor(rpn_t.deltas)
        k = len(roi_t.labels)
        p = torch.full((k, 3), -60.0, dtype=torch.float64)
        p[torch.arange(k), torch.as_tensor(roi_t.labels)] = 60.0
        t = torch.zeros(k, 2, 4, dtype=torch.float64)
        for i, lab in enumerate(roi_t.labels):
            if lab:
                t[i, lab - 1] = torch.as_tensor(roi_t.deltas[i])
        out = det.faster_rcnn_loss(det.RpnOutput(logits, r), det.RoiOutput(p, t), rpn_t, roi_t)
        assert float(out.total) < 1e-20 + 1e-12

    def test_no_sampled_anchors_warns(self, caplog):
        model, img, rpn_t, roi_t = fixed_instance(0)
        empty = det.RpnTargets(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 4)))
        f = det.extract_features(img, model)
        with caplog.at_level("WARNING"):
            out = det.faster_rcnn_loss(det.rpn_forward(f, model), det.rcn_forward(f, roi_t.rois, model),
                                       empty, roi_t)
        assert float(out.rpn_cls.detach()) == 0.0
        assert "no sampled anchors" in caplog.text

    def test_gradient_every_parameter(self):
        """Autograd vs central differences for every scalar parameter of a tiny float64 model."""
        model, img, rpn_t, roi_t = fixed_instance(4)
        rois = roi_t.rois

        def loss():
            f = det.extract_features(img, model)
            return det.faster_rcnn_loss(det.rpn_forward(f, model), det.rcn_forward(f, rois, model),
                                        rpn_t, roi_t, TINY.smooth_l1_beta).total

        model.zero_grad()
        loss().backward()
        h = 1e-5
        worst = 0.0
        n = 0
        with torch.no_grad():
            for name, p in model.named_parameters():
                flat = p.view(-1)
                g = p.grad.view(-1)
                for i in range(flat.numel()):
                    old = flat[i].item()
                    flat[i] = old + h
                    lp = loss().item()
                    flat[i] = old - h
                    lm = loss().item()
                    flat[i] = old
                    fd = (lp - lm) / (2 * h)
                    a = g[i].item()
                    denom = max(abs(a), abs(fd), 1e-5)
                    worst = max(worst, abs(a - fd) / denom)
                    n += 1
        assert n > 800
        assert worst < 1e-3


class TestDetect:
    def test_threshold_one_is_empty(self, default_model):
        assert det.detect(torch.rand(3, 64, 64), default_model, score_thresh=1.0) == []

    def test_untrained_low_scores(self, default_model):
        dets = det.detect(torch.rand(3, 96, 96), default_model, score_thresh=0.9)
        assert dets == []

    def test_overfit_single_image(self):
        spec = SyntheticSceneSpec(seed=5, min_objects=2, max_objects=2, min_size=24, max_size=36,
                                  draw_classes=("circle", "square"))
        ds = generate_synthetic_dataset(spec, 1)
        sample = ds.samples[0]
        model = det.build_detector(det.DetectorConfig(), ["circle", "square"], seed=0)
        train(model, None, [sample], TrainConfig(lr=0.01, iterations=250, batch_size=1, seed=0))
        dets = det.detect(sample.image, model, score_thresh=0.5)
        for ann in sample.annotations:
            ci = model.classes.index(ann.label)
            assert any(d.class_id == ci and iou(d.box, ann.box) >= 0.5 for d in dets), (ann, dets)

    def test_detection_record_roundtrip(self):
        d = det.Detection(Box(1, 2, 3, 4), 1, 0.75, "img7")
        assert det.Detection.from_record(d.to_record()) == d


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = tiny_model(3, torch.float32)
        det.save_checkpoint(m, tmp_path / "m.safetensors", {"step": 2})
        m2 = det.load_checkpoint(tmp_path / "m.safetensors")
        assert m2.classes == m.classes and m2.config == m.config
        for (k, a), (_, b) in zip(m.state_dict().items(), m2.state_dict().items()):
            assert torch.equal(a, b), k
        assert det.read_checkpoint_meta(tmp_path / "m.safetensors")["extra"] == {"step": 2}

    def test_bytes_stable(self, tmp_path):
        m = tiny_model(3, torch.float32)
        det.save_checkpoint(m, tmp_path / "a.safetensors")
        det.save_checkpoint(det.load_checkpoint(tmp_path / "a.safetensors"), tmp_path / "b.safetensors")
        assert (tmp_path / "a.safetensors").read_bytes() == (tmp_path / "b.safetensors").read_bytes()

    def test_bytes_stable_across_processes(self, tmp_path):
        import subprocess
        import sys

        code = ("import sys, torch; from incdet import detector as d; "
                "m = d.build_detector(d.DetectorConfig(), ['a', 'b'], seed=5); "
                "d.save_checkpoint(m, sys.argv[1], {'k': 1})")
        for name in ("p1", "p2"):
            subprocess.run([sys.executable, "-c", code, str(tmp_path / name)], check=True)
        assert (tmp_path / "p1").read_bytes() == (tmp_path / "p2").read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        from safetensors.torch import save_file
        save_file({"x": torch.zeros(2)}, str(tmp_path / "x.safetensors"))
        with pytest.raises(ConfigurationError):
            det.load_checkpoint(tmp_path / "x.safetensors")
