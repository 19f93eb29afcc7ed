import math
from dataclasses import replace

import numpy as np
import pytest

from stbev import tensor as T
from stbev.bev import GridConfig
from stbev.harness.scenes import GroundTruth, SceneConfig
from stbev.pipeline import GROUPS, Model, ModelConfig, StageConfig
from stbev.tensor import Tensor, finite_diff_check
from stbev.training import (VARIANTS, AdamWState, ExperimentConfig, LossReport, LossWeights,
                            StageSchedule, Targets, TrainData, detection_loss, focal_loss,
                            group_checksums, optimizer_step, param_groups, render_targets,
                            run_schedule, variant_schedule)

TINY_GRID = GridConfig(-4.8, 4.8, -4.8, 4.8, -5.0, 3.0, 0.6, 4)   # 16 x 16
TINY_SCENE = SceneConfig(num_static_landmarks=2, num_movers=2, num_frames=3, grid=TINY_GRID,
                         min_separation=1.5, clutter_clusters=1)
TINY_MODEL = ModelConfig(channels=4, history=1, stages=StageConfig(2, 4, 1))


@pytest.fixture(scope="module")
def tiny_data():
    return TrainData.build(replace(TINY_SCENE, seed=5), 8, 0, frames=2)


def empty_targets(shape):
    return Targets(np.zeros(shape), (np.zeros(0, int),) * 3, np.zeros((0, 6)))


class TestDetectionLoss:
    def test_perfect_prediction(self):
        heat = np.zeros((1, 2, 6, 6))
        heat[0, 1, 2, 3] = 1
        boxes = np.array([[0.1, -0.2, 0.0, 0.3, 0.0, 1.0]])
        tg = Targets(heat, (np.array([0]), np.array([2]), np.array([3])), boxes)
        total, h, b = detection_loss(Tensor(heat), Tensor(boxes), tg)
        assert float(total.data) <= 1e-3 and float(b.data) == 0.0

    def test_uniform_half_closed_form(self):
        shape = (2, 2, 5, 7)
        _, h, _ = detection_loss(Tensor(np.full(shape, 0.5)), None, empty_targets(shape))
        n = np.prod(shape)
        assert float(h.data) == pytest.approx(n * 0.75 * 0.25 * math.log(2), rel=1e-12)

    def test_box_weight_linear(self):
        rng = np.random.default_rng(0)
        heat = np.zeros((1, 2, 4, 4))
        heat[0, 0, 1, 1] = 1
        tg = Targets(heat, (np.array([0]), np.array([1]), np.array([1])), rng.normal(size=(1, 6)))
        pred, boxes = Tensor(rng.random(heat.shape)), Tensor(rng.normal(size=(1, 6)))
        t1, h, b = detection_loss(pred, boxes, tg, LossWeights(1.0, 1.0))
        t2, _, _ = detection_loss(pred, boxes, tg, LossWeights(1.0, 2.0))
        assert float(t2.data) - float(t1.data) == pytest.approx(float(b.data), abs=1e-12)
        assert float(t1.data) == pytest.approx(float(h.data) + float(b.data), abs=1e-9)

    def test_focal_gradient(self):
        rng = np.random.default_rng(1)
        tgt = (rng.random((1, 2, 4, 4)) > 0.8).astype(float)
        z = Tensor(rng.normal(size=tgt.shape), requires_grad=True)
        rep = finite_diff_check(lambda: focal_loss(T.sigmoid(z), tgt), z, n_coords=32)
        assert rep.passed, rep

    def test_render_targets(self):
        g = TINY_GRID
        gt = [GroundTruth(0, 1, (0.1, -0.2, 0.9, 1.8, 2.0), (0.0, 0.0))]
        tg = render_targets([gt, []], g)
        assert tg.npos == 1 and tg.heat.sum() == 1
        b, r, c = (int(v[0]) for v in tg.index)
        assert (b, r, c) == (0, 7, 8) and tg.heat[0, 1, 7, 8] == 1
        dx, dy, lw, ll, s, co = tg.boxes[0]
        assert dx == pytest.approx((0.1 + 4.8) / 0.6 - 0.5 - 8)
        assert co >= 0 and s == pytest.approx(math.sin(2.0 - math.pi))
        assert lw == pytest.approx(math.log(0.9))


class TestOptimizer:
    def test_zero_gradient_zero_decay(self):
        p = {"w": Tensor(np.array([1.0, -2.0], np.float32))}
        before = p["w"].data.copy()
        optimizer_step(p, {"w": np.zeros(2)}, AdamWState(weight_decay=0.0), 1e-2)
        assert np.array_equal(p["w"].data, before)

    def test_frozen_untouched(self):
        p = {"w": Tensor(np.ones(3, np.float32)), "v": Tensor(np.ones(3, np.float32))}
        optimizer_step(p, {"w": np.ones(3), "v": np.ones(3)}, AdamWState(), 0.1, frozen=["v"])
        assert np.array_equal(p["v"].data, np.ones(3, np.float32))
        assert not np.array_equal(p["w"].data, np.ones(3, np.float32))

    def test_scalar_recurrence(self):
        g, lr, wd = 0.3, 1e-2, 0.01
        p = {"x": Tensor(np.array([0.5]))}
        st = AdamWState()
        x, m, v = 0.5, 0.0, 0.0
        for t in range(1, 8):
            optimizer_step(p, {"x": np.array([g])}, st, lr)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - lr * ((m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8) + wd * x)
            assert p["x"].data[0] == pytest.approx(x, abs=1e-15)

    def test_nan_gradient(self):
        with pytest.raises(FloatingPointError, match="w"):
            optimizer_step({"w": Tensor(np.ones(2))}, {"w": np.array([np.nan, 0])}, AdamWState(), 1e-3)


class TestSchedule:
    def test_json_round_trip(self):
        s = StageSchedule.default(steps=7)
        back = StageSchedule.from_json(s.to_json())
        assert back == s
        s.validate(protective=True)

    def test_unknown_group(self):
        obj = StageSchedule.default().to_json()
        obj["stages"][0]["trainable"].append("radar_encoder")
        with pytest.raises(T.ConfigError):
            StageSchedule.from_json(obj)

    def test_variants(self):
        exp = ExperimentConfig()
        variant_schedule(VARIANTS["g"], exp).validate(protective=True)
        variant_schedule(VARIANTS["e"], exp).validate(protective=True)
        with pytest.raises(T.ConfigError):
            variant_schedule(VARIANTS["f"], exp).validate(protective=True)
        a = variant_schedule(VARIANTS["a"], exp)
        assert all(s.multi_frame for s in a.stages)
        assert variant_schedule(VARIANTS["d"], exp).stages[1].steps == 0

    def test_loss_report_finite(self):
        with pytest.raises(FloatingPointError):
            LossReport(0, "x", float("nan"), 0.0, 0.0)


class TestRunSchedule:
    def test_zero_steps_keeps_init(self, tiny_data, tmp_path):
        m = Model(TINY_MODEL, TINY_GRID, seed=1)
        init = {k: v.data.copy() for k, v in m.params.items()}
        res = run_schedule(StageSchedule.default(steps=0), tiny_data, m, out_dir=tmp_path)
        assert len(res.checkpoints) == 4 and res.reports == []
        for path in res.checkpoints:
            back = T.load_checkpoint(path)
            assert all(np.array_equal(back[k].data, init[k]) for k in init)

    def test_stage4_freezing(self, tiny_data):
        m = Model(TINY_MODEL, TINY_GRID, seed=2)
        sched = StageSchedule.default(steps=3)
        run_schedule(sched, tiny_data, m, stages=[0, 1, 2])
        before = group_checksums(m)
        log: list = []
        res = run_schedule(sched, tiny_data, m, stages=[3], grad_log=log)
        after = res.checksums[-1]
        for g in ("lidar_encoder", "image_encoder", "fusion", "enhance"):
            assert after[g] == before[g]
        assert after["temporal"] != before["temporal"] and after["head"] != before["head"]
        frozen_ids = {id(m.params[n]) for g in ("lidar_encoder", "image_encoder", "fusion", "enhance")
                      for n in m.groups()[g]}
        assert log and not frozen_ids & set(log)
        groups = param_groups(m, sched.stages[3].trainable)
        assert groups["lidar_encoder"].frozen and not groups["temporal"].frozen

    def test_every_stage_freezes_the_rest(self, tiny_data):
        m = Model(TINY_MODEL, TINY_GRID, seed=3)
        sched = StageSchedule.default(steps=2)
        res = run_schedule(sched, tiny_data, m)
        prev = res.initial_checksums
        for spec, sums in zip(sched.stages, res.checksums):
            for g in spec.frozen:
                assert sums[g] == prev[g], (spec.name, g)
            prev = sums

    def test_metrics_csv_and_determinism(self, tiny_data, tmp_path):
        paths = []
        for run in ("a", "b"):
            m = Model(TINY_MODEL, TINY_GRID, seed=4)
            run_schedule(StageSchedule.default(steps=2), tiny_data, m, seed=9, out_dir=tmp_path / run)
            paths.append(tmp_path / run)
        header = (paths[0] / "metrics.csv").read_text().splitlines()[0]
        assert header == "step,stage,heatmap_loss,box_loss,total"
        for f in ("metrics.csv", "stage1_lidar.ckpt", "stage4_temporal.ckpt"):
            assert (paths[0] / f).read_bytes() == (paths[1] / f).read_bytes()

    def test_descent(self, tiny_data):
        m = Model(TINY_MODEL, TINY_GRID, seed=5)
        sched = StageSchedule.default(steps=40, batch_lr=(3e-3, 3e-3))
        res = run_schedule(sched, tiny_data, m, seed=1)
        for spec in sched.stages:
            r = [x.total for x in res.stage_reports(spec.name)]
            assert np.mean(r[-8:]) < np.mean(r[:8]), spec.name

    def test_checkpoint_round_trip(self, tmp_path):
        m = Model(TINY_MODEL, TINY_GRID, seed=6)
        T.save_checkpoint(tmp_path / "m.ckpt", m.params)
        back = T.load_checkpoint(tmp_path / "m.ckpt")
        assert sorted(back) == sorted(m.params)
        assert T.checksum([back[k] for k in sorted(back)]) == T.checksum([m.params[k] for k in sorted(m.params)])
