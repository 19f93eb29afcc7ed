import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stbev.bev import grid_to_world
from stbev.geometry import relative_pose, transform_points
from stbev.harness.metrics import average_precision, evaluate
from stbev.harness.scenes import (LANDMARK, MOVER, GroundTruth, SceneConfig, current_first, ego_pose,
                                  generate_sequence, load_sequence, make_sequences,
                                  render_semantic, save_sequence, toy_grid)
from stbev.pipeline import Detection
from stbev.training import render_targets


def frames_equal(a, b):
    return (np.array_equal(a.points.points, b.points.points)
            and np.array_equal(a.points.intensity, b.points.intensity)
            and np.array_equal(a.semantic.data, b.semantic.data)
            and np.array_equal(a.pose.matrix(), b.pose.matrix()) and a.gt == b.gt)


def gt_det(g, frame, conf=1.0):
    scores = np.zeros(2)
    scores[g.cls] = 1.0
    return Detection(scores, g.box, conf, frame)


class TestSceneConfig:
    @pytest.mark.parametrize("kw", [{"frame_dt": 0.0}, {"num_frames": 0}, {"num_movers": -1},
                                    {"noise_sigma": -0.1}, {"mover_speed_range": (2.0, 1.0)}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SceneConfig(**kw)

    def test_json_round_trip(self):
        cfg = SceneConfig.mover_heavy(seed=2**63 + 5)
        assert SceneConfig.from_json(cfg.to_json()) == cfg

    def test_presets(self):
        assert SceneConfig.static_only().num_movers == 0
        m = SceneConfig.mover_heavy()
        assert m.num_movers > m.num_static_landmarks


class TestGenerate:
    def test_seed_determinism(self):
        a, b = generate_sequence(SceneConfig(seed=3)), generate_sequence(SceneConfig(seed=3))
        assert all(frames_equal(x, y) for x, y in zip(a, b))
        c = generate_sequence(SceneConfig(seed=4))
        assert not frames_equal(a[0], c[0])

    def test_shapes_and_order(self):
        cfg = SceneConfig(seed=1, num_frames=4)
        seq = generate_sequence(cfg)
        assert [f.index for f in seq] == [0, 1, 2, 3]
        assert seq[0].semantic.data.shape == (2, 40, 40)
        assert [f.index for f in current_first(seq, 3)] == [3, 2, 1]
        assert seq[0].pose.matrix()[:3, 3] == pytest.approx([0, 0, 0], abs=1e-12)

    def test_static_landmark_alignment(self):
        cfg = SceneConfig(num_movers=0, num_static_landmarks=5, noise_sigma=0.0, clutter_clusters=0,
                          occlusion=(0.0, 0.0), range_falloff=1e6, seed=8, num_frames=4)
        seq = generate_sequence(cfg)
        cur = seq[-1]
        for k in seq[:-1]:
            moved = transform_points(relative_pose(k.pose, cur.pose), k.points)
            assert np.abs(moved.points - cur.points.points).max() < 1e-9

    def test_mover_kinematics(self):
        cfg = SceneConfig(num_movers=4, num_static_landmarks=0, mover_speed_range=(2.0, 2.0),
                          frame_dt=0.5, seed=2, num_frames=3)
        seq = generate_sequence(cfg)
        checked = 0
        for f0, f1 in zip(seq, seq[1:]):
            w0 = {g.obj_id: f0.pose.apply(np.array([*g.box[:2], 0.0])) for g in f0.gt}
            for g in f1.gt:
                if g.obj_id in w0:
                    p1 = f1.pose.apply(np.array([*g.box[:2], 0.0]))
                    assert np.linalg.norm(p1 - w0[g.obj_id]) == pytest.approx(1.0, abs=1e-9)
                    assert math.hypot(*g.velocity) == pytest.approx(2.0)
                    checked += 1
        assert checked > 0

    def test_landmarks_static_in_world(self):
        seq = generate_sequence(SceneConfig(seed=6, num_movers=0))
        first = {g.obj_id: seq[0].pose.apply(np.array([*g.box[:2], 0.0])) for g in seq[0].gt}
        for f in seq[1:]:
            for g in f.gt:
                if g.obj_id in first:
                    assert f.pose.apply(np.array([*g.box[:2], 0.0])) == pytest.approx(first[g.obj_id], abs=1e-9)
                    assert g.velocity == (0.0, 0.0)

    def test_ego_arc(self):
        cfg = SceneConfig(ego_speed=4.0, ego_yaw_rate=0.2)
        p = ego_pose(cfg, 1.5)
        assert p.yaw == pytest.approx(0.3)
        x = 4.0 / 0.2 * math.sin(0.3)
        y = 4.0 / 0.2 * (1 - math.cos(0.3))
        assert p.matrix()[:2, 3] == pytest.approx([x, y], abs=1e-12)
        straight = ego_pose(replace(cfg, ego_yaw_rate=0.0), 1.5)
        assert straight.matrix()[:2, 3] == pytest.approx([6.0, 0.0], abs=1e-12)

    def test_gt_in_grid(self):
        g = toy_grid()
        for f in generate_sequence(SceneConfig(seed=9)):
            for o in f.gt:
                assert g.x_min <= o.box[0] < g.x_max and g.y_min <= o.box[1] < g.y_max
                assert o.cls in (LANDMARK, MOVER)

    def test_semantic_render(self):
        g = toy_grid()
        sem = render_semantic(g, [(0.3, 0.3, 1.2, 1.2, 0.0)], [MOVER])
        assert sem.data[LANDMARK].sum() == 0
        # a 1.2 m box covers 2 x 2 cells before the blur, which preserves mass
        assert sem.data[MOVER].sum() == pytest.approx(4.0, abs=1e-9)
        assert np.all(sem.data >= 0)

    def test_make_sequences_splits(self):
        cfg = SceneConfig(seed=1, num_frames=1)
        a, b = make_sequences(cfg, 2, split=0), make_sequences(cfg, 2, split=1)
        assert not frames_equal(a[0][0], b[0][0])
        assert frames_equal(a[1][0], make_sequences(cfg, 2, split=0)[1][0])

    def test_io_round_trip(self, tmp_path):
        cfg = SceneConfig(seed=5, num_frames=3)
        seq = generate_sequence(cfg)
        save_sequence(tmp_path / "s", seq, cfg)
        back = load_sequence(tmp_path / "s")
        for a, b in zip(seq, back):
            assert a.gt == b.gt and a.index == b.index
            assert np.array_equal(a.semantic.data.astype(np.float32), b.semantic.data.astype(np.float32))
            assert np.array_equal(a.points.points.astype(np.float32), b.points.points.astype(np.float32))
            assert np.allclose(a.pose.matrix(), b.pose.matrix(), atol=1e-12)
        raw = (tmp_path / "s" / "frame_000.bin").read_bytes()
        assert len(raw) == 16 * len(seq[0].points)


class TestEvaluate:
    def gts(self):
        seq = generate_sequence(SceneConfig(seed=11, num_frames=2))
        return {f.index: f.gt for f in seq}

    def test_perfect(self):
        gt = self.gts()
        dets = [gt_det(g, f) for f, gs in gt.items() for g in gs]
        m = evaluate(dets, gt)
        assert (m.center_mae, m.hit_rate, m.toy_ap) == (0.0, 1.0, 1.0)

    def test_no_detections(self):
        m = evaluate([], self.gts())
        assert m.hit_rate == 0.0 and m.toy_ap == 0.0 and m.n_gt > 0

    def test_half(self):
        gt = {0: [GroundTruth(0, 0, (1.0, 1.0, 1, 1, 0), (0, 0)), GroundTruth(1, 0, (5.0, 1.0, 1, 1, 0), (0, 0))]}
        m = evaluate([gt_det(gt[0][0], 0)], gt)
        assert m.hit_rate == 0.5 and m.center_mae == 0.0

    def test_wrong_class_or_frame_misses(self):
        g = GroundTruth(0, 1, (1.0, 1.0, 1, 1, 0), (0, 0))
        wrong_cls = Detection(np.array([1.0, 0.0]), g.box, 1.0, 0)
        assert evaluate([wrong_cls], {0: [g]}).hit_rate == 0.0
        assert evaluate([gt_det(g, 1)], {0: [g]}).hit_rate == 0.0

    def test_radius(self):
        g = GroundTruth(0, 0, (1.0, 1.0, 1, 1, 0), (0, 0))
        near = Detection(np.array([1.0, 0.0]), (1.5, 1.0, 1, 1, 0), 0.9, 0)
        far = Detection(np.array([1.0, 0.0]), (1.7, 1.0, 1, 1, 0), 0.9, 0)
        assert evaluate([near], {0: [g]}).center_mae == pytest.approx(0.5)
        assert evaluate([far], {0: [g]}).hit_rate == 0.0

    def test_false_positive_ranked_first(self):
        g = GroundTruth(0, 0, (1.0, 1.0, 1, 1, 0), (0, 0))
        fp = Detection(np.array([1.0, 0.0]), (8.0, 8.0, 1, 1, 0), 0.9, 0)
        tp = Detection(np.array([1.0, 0.0]), g.box, 0.5, 0)
        # precision at recall 1 is 1/2
        assert evaluate([fp, tp], {0: [g]}).per_class[0]["toy_ap"] == pytest.approx(0.5)

    def test_per_range(self):
        near = GroundTruth(0, 0, (3.0, 0.0, 1, 1, 0), (0, 0))
        far = GroundTruth(1, 0, (20.0, 0.0, 1, 1, 0), (0, 0))
        m = evaluate([gt_det(near, 0)], {0: [near, far]})
        assert m.per_range["0-15m"]["hit_rate"] == 1.0 and m.per_range["15m+"]["hit_rate"] == 0.0

    def test_gt_self_consistency(self):
        """GT rendered to targets and decoded back to detections scores perfectly."""
        grid = toy_grid()
        seq = generate_sequence(SceneConfig(seed=12, num_frames=3))
        tg = render_targets([f.gt for f in seq], grid)
        dets = []
        for (b, r, c), box in zip(zip(*tg.index), tg.boxes):
            cx, cy = grid_to_world(grid, np.array([r, c], dtype=float))
            cls = int(np.argmax(tg.heat[b, :, r, c]))
            scores = np.eye(2)[cls]
            dets.append(Detection(scores, (cx + box[0] * grid.cell, cy + box[1] * grid.cell, 1, 1, 0), 1.0, int(b)))
        m = evaluate(dets, {f.index: f.gt for f in seq})
        assert m.toy_ap == 1.0 and m.hit_rate == 1.0 and m.center_mae < 1e-9

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(1, 40))
    def test_ap_bounds(self, tp, n_gt):
        n_gt = max(n_gt, sum(tp))
        ap = average_precision(np.array(tp, float), n_gt)
        assert 0.0 <= ap <= sum(tp) / n_gt + 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_rates_in_range(self, seed):
        rng = np.random.default_rng(seed)
        gt = self.gts()
        dets = [Detection(np.array([0.5, 0.5]), (rng.uniform(-12, 12), rng.uniform(-12, 12), 1, 1, 0),
                          float(rng.random()), int(rng.integers(0, 2))) for _ in range(20)]
        m = evaluate(dets, gt)
        assert 0 <= m.hit_rate <= 1 and 0 <= m.toy_ap <= 1 and m.center_mae >= 0
