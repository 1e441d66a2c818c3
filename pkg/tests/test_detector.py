import math

import numpy as np
import pytest
import torch

from tablex.detector import (
    CORNER_KINDS,
    CornerPoint,
    DetectorInferenceConfig,
    TableDetector,
    TableProposal,
    assign_proposal_labels,
    corner_loss,
    decode_corners,
    decode_quad,
    detect_tables,
    detector_loss,
    enumerate_proposals,
    frcn_loss,
    gaussian_radius,
    jitter_box,
    make_corner_targets,
    quad_regression_target,
    _worst_case_iou,
)
from tablex.geometry import Box, QuadBox, iou, nms_xyxy
from tablex.neural_ops import FeatureMap

torch.manual_seed(0)


class TestGaussianRadius:
    def test_radius_sound_against_displacement_grid(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            w, h = rng.uniform(4, 40, size=2)
            r = gaussian_radius(w, h, 0.3)
            gt = Box(0, 0, w, h)
            for dx1 in (-r, 0, r):
                for dy1 in (-r, 0, r):
                    for dx2 in (-r, 0, r):
                        for dy2 in (-r, 0, r):
                            x1, y1 = dx1, dy1
                            x2, y2 = w + dx2, h + dy2
                            if x2 - x1 <= 0 or y2 - y1 <= 0:
                                continue
                            assert iou(gt, Box.from_xyxy(x1, y1, x2, y2)) >= 0.3 - 1e-6

    def test_radius_maximal(self):
        for w, h in [(10, 10), (30, 8), (6, 25)]:
            r = gaussian_radius(w, h, 0.3)
            if r < min(w, h) / 2 - 1e-6:
                assert _worst_case_iou(r + 0.05, w, h) < 0.3


class TestMakeCornerTargets:
    def test_floor_mapping_and_offset(self):
        targets = make_corner_targets([Box(37, 21, 30, 40)], (8, 8), 16)
        tl = targets["top_left"]
        assert tl.pos_mask[1, 2]
        assert tl.penalty[1, 2] == 1.0
        assert np.allclose(tl.offsets[1, 2], (37 / 16 - 2, 21 / 16 - 1))
        assert np.allclose(tl.offsets[1, 2], (0.3125, 0.3125))

    def test_zero_offset_on_grid(self):
        targets = make_corner_targets([Box(32, 16, 64, 64)], (8, 8), 16)
        tl = targets["top_left"]
        assert tl.pos_mask[1, 2]
        assert np.allclose(tl.offsets[1, 2], (0.0, 0.0))

    def test_penalty_at_radius_distance(self):
        box = Box(0, 0, 320, 320)  # 20x20 on the heatmap
        targets = make_corner_targets([box], (40, 40), 16)
        tl = targets["top_left"]
        r = gaussian_radius(20, 20, 0.3)
        d = int(round(r))
        # e^{-d^2 / (2 (r/3)^2)}; at d == r this is e^{-4.5}
        want = math.exp(-(d**2) / (2 * (r / 3) ** 2))
        assert tl.penalty[0, d] == pytest.approx(want, rel=1e-6)
        assert math.exp(-4.5) == pytest.approx(0.0111, abs=1e-4)

    def test_corner_outside_map_clamped(self):
        targets = make_corner_targets([Box(100, 100, 100, 100)], (4, 4), 16)
        br = targets["bottom_right"]
        assert br.pos_mask[3, 3]
        assert 0 <= br.offsets[3, 3, 0] < 1

    def test_offsets_in_unit_square(self):
        rng = np.random.default_rng(8)
        boxes = [
            Box(rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(10, 60), rng.uniform(10, 60))
            for _ in range(20)
        ]
        targets = make_corner_targets(boxes, (12, 12), 16)
        for t in targets.values():
            assert (t.offsets[t.pos_mask] >= 0).all()
            assert (t.offsets[t.pos_mask] < 1).all()

    def test_penalty_max_combination(self):
        boxes = [Box(0, 0, 160, 160), Box(32, 0, 160, 160)]
        targets = make_corner_targets(boxes, (16, 16), 16)
        tl = targets["top_left"]
        assert tl.penalty[0, 0] == 1.0
        assert tl.penalty[0, 2] == 1.0


class TestDecodeCorners:
    def test_single_peak(self):
        heat = torch.zeros(5, 5)
        heat[2, 1] = 0.9
        off = torch.zeros(2, 5, 5)
        off[0, 2, 1] = 0.25
        off[1, 2, 1] = 0.5
        pts = decode_corners(heat, off, 16, "top_left", top_k=10, score_threshold=0.3)
        assert len(pts) >= 1
        assert pts[0].x == pytest.approx(20.0)
        assert pts[0].y == pytest.approx(40.0)
        assert pts[0].score == pytest.approx(0.9)

    def test_below_threshold_dropped(self):
        heat = torch.zeros(5, 5)
        heat[2, 2] = 0.2
        pts = decode_corners(heat, torch.zeros(2, 5, 5), 16, "top_left",
                             top_k=10, score_threshold=0.3)
        assert pts == []

    def test_plateau_and_topk_matches_exhaustive_scan(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            heat_np = rng.choice([0.1, 0.4, 0.7, 0.9], size=(6, 7), p=[0.55, 0.2, 0.15, 0.1])
            heat = torch.tensor(heat_np)
            off = torch.zeros(2, 6, 7)
            top_k = int(rng.integers(1, 8))
            got = decode_corners(heat, off, 4, "top_left", top_k=top_k, score_threshold=0.3)

            # oracle: exhaustive 3x3 neighborhood scan
            peaks = []
            for i in range(6):
                for j in range(7):
                    window = heat_np[max(0, i - 1): i + 2, max(0, j - 1): j + 2]
                    if heat_np[i, j] >= window.max():
                        peaks.append((i, j, heat_np[i, j]))
            peaks.sort(key=lambda t: (-t[2], t[0] * 7 + t[1]))
            expected = [(j * 4.0, i * 4.0, s) for i, j, s in peaks[:top_k] if s >= 0.3]
            assert [(p.x, p.y, p.score) for p in got] == expected


class TestEnumerateProposals:
    def test_single_valid_pair(self):
        tl = [CornerPoint("top_left", 10, 10, 0.9)]
        br = [CornerPoint("bottom_right", 100, 50, 0.8)]
        got = enumerate_proposals(tl, br)
        assert len(got) == 1
        assert got[0].box == Box(10, 10, 90, 40)
        assert got[0].score == pytest.approx(0.85)

    def test_invalid_ordering_rejected(self):
        tl = [CornerPoint("top_left", 100, 50, 0.9)]
        br = [CornerPoint("bottom_right", 10, 10, 0.8)]
        assert enumerate_proposals(tl, br) == []

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            tl = [
                CornerPoint("top_left", rng.uniform(0, 80), rng.uniform(0, 80), rng.uniform(0, 1))
                for _ in range(2)
            ]
            br = [
                CornerPoint(
                    "bottom_right", rng.uniform(20, 160), rng.uniform(20, 160), rng.uniform(0, 1)
                )
                for _ in range(2)
            ]
            got = enumerate_proposals(tl, br, 0.7)

            cands = []
            for a in tl:
                for b in br:
                    if a.x < b.x and a.y < b.y:
                        cands.append((Box.from_xyxy(a.x, a.y, b.x, b.y), (a.score + b.score) / 2))
            if cands:
                kept = nms_xyxy(
                    np.array([c[0].as_xyxy() for c in cands]),
                    np.array([c[1] for c in cands]),
                    0.7,
                )
                expected = [cands[i] for i in kept]
            else:
                expected = []
            assert [(p.box, p.score) for p in got] == expected

    def test_strict_ordering_invariant(self):
        rng = np.random.default_rng(5)
        tl = [CornerPoint("top_left", rng.uniform(0, 100), rng.uniform(0, 100), 0.5) for _ in range(5)]
        br = [CornerPoint("bottom_right", rng.uniform(0, 200), rng.uniform(0, 200), 0.5) for _ in range(5)]
        for p in enumerate_proposals(tl, br):
            assert p.box.w > 0 and p.box.h > 0


class TestAssignProposalLabels:
    def test_exact_match_positive(self):
        gt = Box(0, 0, 50, 50)
        labels, matched = assign_proposal_labels([TableProposal(gt, 0.9)], [gt])
        assert labels.tolist() == [1]
        assert matched.tolist() == [0]

    def test_far_negative(self):
        labels, _ = assign_proposal_labels(
            [TableProposal(Box(500, 500, 10, 10), 0.9)], [Box(0, 0, 50, 50)]
        )
        assert labels.tolist() == [0]

    def test_between_thresholds_ignored(self):
        gt = Box(0, 0, 100, 100)
        prop = Box(0, 0, 100, 60)  # IoU 0.6
        assert 0.5 < iou(prop, gt) < 0.7
        labels, _ = assign_proposal_labels([TableProposal(prop, 0.5)], [gt])
        assert labels.tolist() == [-1]

    def test_partition_into_three_classes(self):
        rng = np.random.default_rng(11)
        gts = [Box(0, 0, 60, 60), Box(100, 100, 80, 40)]
        props = [
            TableProposal(
                Box(rng.uniform(0, 150), rng.uniform(0, 150), rng.uniform(10, 90), rng.uniform(10, 70)),
                0.5,
            )
            for _ in range(50)
        ]
        labels, _ = assign_proposal_labels(props, gts)
        assert set(labels.tolist()) <= {-1, 0, 1}
        for p, lab in zip(props, labels):
            best = max(iou(p.box, g) for g in gts)
            if lab == 1:
                assert best > 0.7
            elif lab == 0:
                assert best < 0.5
            else:
                assert 0.5 <= best <= 0.7


class TestQuadRegression:
    def test_zero_deltas_identity(self):
        p = Box(10, 20, 30, 40)
        q = decode_quad(p, np.zeros(8))
        assert np.allclose(q.as_array(), p.corners())

    def test_roundtrip(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            p = Box(rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(20, 60), rng.uniform(20, 60))
            g = QuadBox.from_array(p.corners() + rng.uniform(-3, 3, size=(4, 2)))
            t = quad_regression_target(p, g)
            back = decode_quad(p, t)
            assert np.allclose(back.as_array(), g.as_array(), atol=1e-9)


class TestCornerLoss:
    def _targets(self, hw, boxes, stride=16):
        return make_corner_targets(boxes, hw, stride)

    def test_perfect_prediction_near_zero(self):
        targets = self._targets((8, 8), [Box(16, 16, 64, 64)])
        preds = {}
        for kind in CORNER_KINDS:
            t = targets[kind]
            heat = torch.tensor(np.where(t.pos_mask, 1.0, 0.0))[None, None]
            off = torch.tensor(t.offsets.transpose(2, 0, 1))[None]
            preds[kind] = (heat, off)
        loss = corner_loss(preds, targets, n_tables=1)
        assert loss.item() < 1e-4

    def test_single_pixel_focal_value(self):
        # single-pixel map, target 1, prediction 0.5
        t = {
            "top_left": __import__("tablex.detector", fromlist=["CornerTargets"]).CornerTargets(
                penalty=np.ones((1, 1)),
                offsets=np.zeros((1, 1, 2)),
                pos_mask=np.ones((1, 1), dtype=bool),
            ),
            "bottom_right": __import__("tablex.detector", fromlist=["CornerTargets"]).CornerTargets(
                penalty=np.ones((1, 1)),
                offsets=np.zeros((1, 1, 2)),
                pos_mask=np.ones((1, 1), dtype=bool),
            ),
        }
        preds = {
            k: (torch.full((1, 1, 1, 1), 0.5), torch.zeros(1, 2, 1, 1)) for k in CORNER_KINDS
        }
        loss = corner_loss(preds, t, n_tables=1)
        # focal term per kind: (1-0.5)^2 * -ln 0.5; offsets are exact
        want = 2 * (0.25 * math.log(2))
        assert loss.item() == pytest.approx(want, rel=1e-5)

    def test_matches_direct_sum_oracle(self):
        rng = np.random.default_rng(4)
        targets = self._targets((6, 6), [Box(10, 12, 40, 50)])
        preds = {}
        for kind in CORNER_KINDS:
            heat = torch.tensor(rng.uniform(0.05, 0.95, size=(1, 1, 6, 6)))
            off = torch.tensor(rng.uniform(-0.5, 1.5, size=(1, 2, 6, 6)))
            preds[kind] = (heat, off)
        got = corner_loss(preds, targets, n_tables=1).item()

        # direct pixel-by-pixel oracle
        det, off_sum, n_c = 0.0, 0.0, 0
        for kind in CORNER_KINDS:
            t = targets[kind]
            p = preds[kind][0][0, 0].numpy()
            o = preds[kind][1][0].numpy()
            for i in range(6):
                for j in range(6):
                    if t.pos_mask[i, j]:
                        det += -((1 - p[i, j]) ** 2) * math.log(p[i, j])
                        n_c += 1
                        for k in range(2):
                            d = abs(o[k, i, j] - t.offsets[i, j, k])
                            off_sum += 0.5 * d * d if d < 1 else d - 0.5
                    else:
                        det += -((1 - t.penalty[i, j]) ** 4) * (p[i, j] ** 2) * math.log(1 - p[i, j])
        want = det / 1 + off_sum / n_c
        assert got == pytest.approx(want, rel=1e-6)

    def test_empty_image_contributes_zero(self):
        t = self._targets((4, 4), [])
        preds = {k: (torch.full((1, 1, 4, 4), 0.3), torch.zeros(1, 2, 4, 4)) for k in CORNER_KINDS}
        assert corner_loss(preds, t, n_tables=0).item() == 0.0


class TestFrcnLoss:
    def test_perfect_zero(self):
        scores = torch.tensor([1.0, 0.0]).clamp(1e-6, 1 - 1e-6)
        labels = torch.tensor([1, 0])
        deltas = torch.zeros(2, 8)
        loss = frcn_loss(scores, labels, deltas, torch.zeros(2, 8))
        assert loss.item() < 1e-4

    def test_single_positive_half_score(self):
        scores = torch.tensor([0.5])
        labels = torch.tensor([1])
        deltas = torch.full((1, 8), 0.25)
        targets = torch.zeros(1, 8)
        loss = frcn_loss(scores, labels, deltas, targets)
        assert loss.item() == pytest.approx(math.log(2) + 8 * 0.25, rel=1e-6)

    def test_matches_direct_sum_oracle(self):
        rng = np.random.default_rng(9)
        n = 12
        scores = torch.tensor(rng.uniform(0.05, 0.95, size=n))
        labels = torch.tensor((rng.uniform(size=n) < 0.4).astype(np.int64))
        deltas = torch.tensor(rng.normal(size=(n, 8)))
        targets = torch.tensor(rng.normal(size=(n, 8)))
        got = frcn_loss(scores, labels, deltas, targets).item()
        cls = -np.mean(
            [
                math.log(s) if y == 1 else math.log(1 - s)
                for s, y in zip(scores.numpy(), labels.numpy())
            ]
        )
        pos = labels.numpy() == 1
        reg = np.abs(deltas.numpy()[pos] - targets.numpy()[pos]).sum() / max(1, pos.sum())
        assert got == pytest.approx(cls + reg, rel=1e-6)


class TestDetectorLoss:
    def test_values(self):
        z = torch.tensor(0.0)
        assert detector_loss(z, z).item() == 0.0
        assert detector_loss(torch.tensor(1.0), torch.tensor(0.5)).item() == pytest.approx(0.7)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a, b = rng.uniform(0, 5, size=2)
            got = detector_loss(torch.tensor(a), torch.tensor(b)).item()
            assert got == pytest.approx(0.2 * a + b)


class TestJitterBox:
    def test_within_bounds(self):
        rng = np.random.default_rng(2)
        box = Box(100, 100, 50, 40)
        for _ in range(50):
            j = jitter_box(box, rng, 0.1)
            assert abs(j.x - box.x) <= 5.0 + 1e-9
            assert abs(j.y2 - box.y2) <= 4.0 + 1e-9
            assert j.w > 0 and j.h > 0


class TestModelShapes:
    def test_corner_head_output(self):
        model = TableDetector("tiny").eval()
        with torch.no_grad():
            feat = model.features(torch.rand(1, 3, 128, 128))
            maps = model.corner_maps(feat)
        for kind in CORNER_KINDS:
            heat, off = maps[kind]
            assert heat.shape == (1, 1, 8, 8)
            assert off.shape == (1, 2, 8, 8)
            assert (heat >= 0).all() and (heat <= 1).all()

    def test_zero_weight_head_gives_half(self):
        model = TableDetector("tiny").eval()
        with torch.no_grad():
            for p in model.corner_head.parameters():
                p.zero_()
            feat = model.features(torch.rand(1, 3, 64, 64))
            maps = model.corner_maps(feat)
        for kind in CORNER_KINDS:
            heat, _ = maps[kind]
            assert torch.allclose(heat, torch.full_like(heat, 0.5))

    def test_frcn_outputs(self):
        model = TableDetector("tiny").eval()
        with torch.no_grad():
            feat = model.features(torch.rand(1, 3, 128, 128))
            props = [
                TableProposal(Box(10, 10, 60, 40), 0.9),
                TableProposal(Box(30, 50, 70, 60), 0.8),
            ]
            scores, deltas = model.frcn_forward(feat, props)
        assert scores.shape == (2,)
        assert deltas.shape == (2, 8)
        assert (scores >= 0).all() and (scores <= 1).all()

    def test_detect_on_blank_page(self):
        model = TableDetector("tiny")
        blank = np.full((128, 160, 3), 255, dtype=np.uint8)
        cfg = DetectorInferenceConfig(short_side=128, max_side=192, corner_threshold=0.95)
        dets = detect_tables(model, blank, cfg)
        assert dets == []


class TestRoundTripTargetsDecode:
    def test_targets_decode_within_one_pixel(self):
        rng = np.random.default_rng(6)
        stride = 16
        for _ in range(20):
            boxes = [
                Box(rng.uniform(0, 200), rng.uniform(0, 200), rng.uniform(40, 150), rng.uniform(40, 150))
                for _ in range(int(rng.integers(1, 4)))
            ]
            targets = make_corner_targets(boxes, (32, 32), stride)
            for kind, corner_of in (
                ("top_left", lambda b: (b.x, b.y)),
                ("bottom_right", lambda b: (b.x2, b.y2)),
            ):
                t = targets[kind]
                heat = torch.tensor(np.where(t.pos_mask, t.penalty, t.penalty * 0.999))
                off = torch.tensor(t.offsets.transpose(2, 0, 1))
                pts = decode_corners(heat, off, stride, kind, top_k=50, score_threshold=0.99)
                for b in boxes:
                    qx, qy = corner_of(b)
                    best = min(math.hypot(p.x - qx, p.y - qy) for p in pts)
                    assert best <= 1.0 + 1e-6
