import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stbev.geometry import (PointCloud, Pose, pose_compose, pose_inverse, relative_pose,
                            transform_points)

angles = st.floats(-math.pi, math.pi, allow_nan=False)
coords = st.floats(-50, 50, allow_nan=False)


@st.composite
def poses(draw):
    return Pose.from_ypr(draw(angles), draw(st.floats(-1.5, 1.5)), draw(angles),
                         [draw(coords), draw(coords), draw(coords)])


def random_pose(rng):
    return Pose.from_ypr(*rng.uniform(-math.pi, math.pi, 3), rng.uniform(-20, 20, 3))


def test_pose_invariants_rejected():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(2 * np.eye(3), np.zeros(3))


def test_pose_is_immutable():
    p = Pose.identity()
    with pytest.raises(ValueError):
        p.rotation[0, 0] = 3.0


class TestCompose:
    def test_identity(self):
        p = Pose.from_ypr(0.3, 0.1, -0.2, [1, 2, 3])
        q = pose_compose(Pose.identity(), p)
        np.testing.assert_array_equal(q.matrix(), p.matrix())

    def test_inverse_gives_identity(self):
        p = Pose.from_ypr(0.3, 0.1, -0.2, [1, 2, 3])
        np.testing.assert_allclose(pose_compose(p, pose_inverse(p)).matrix(), np.eye(4), atol=1e-12)

    def test_yaw_30_then_60_is_90(self):
        q = pose_compose(Pose.from_ypr(math.radians(30)), Pose.from_ypr(math.radians(60)))
        oracle = Pose.from_ypr(math.radians(30)).matrix() @ Pose.from_ypr(math.radians(60)).matrix()
        np.testing.assert_allclose(q.matrix(), oracle, atol=1e-12)
        np.testing.assert_allclose(q.rotation, Pose.from_ypr(math.pi / 2).rotation, atol=1e-9)

    def test_applies_b_then_a(self):
        rng = np.random.default_rng(1)
        a, b = random_pose(rng), random_pose(rng)
        pts = rng.normal(size=(20, 3))
        np.testing.assert_allclose(pose_compose(a, b).apply(pts), a.apply(b.apply(pts)), atol=1e-9)

    @settings(max_examples=50)
    @given(poses(), poses(), poses())
    def test_associative(self, a, b, c):
        lhs = pose_compose(a, pose_compose(b, c)).matrix()
        rhs = pose_compose(pose_compose(a, b), c).matrix()
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestInverse:
    def test_identity(self):
        np.testing.assert_array_equal(pose_inverse(Pose.identity()).matrix(), np.eye(4))

    def test_pure_translation(self):
        inv = pose_inverse(Pose(np.eye(3), [1, 2, 3]))
        np.testing.assert_array_equal(inv.translation, [-1, -2, -3])

    @settings(max_examples=50)
    @given(poses())
    def test_matches_matrix_inverse(self, p):
        np.testing.assert_allclose(pose_inverse(p).matrix(), np.linalg.inv(p.matrix()), atol=1e-9)
        np.testing.assert_allclose(pose_compose(p, pose_inverse(p)).matrix(), np.eye(4), atol=1e-9)


class TestRelativePose:
    def test_same_frame(self):
        p = Pose.from_ypr(1.0, 0.0, 0.0, [3, 4, 0])
        np.testing.assert_allclose(relative_pose(p, p).matrix(), np.eye(4), atol=1e-12)

    def test_forward_five_meters(self):
        hist, cur = Pose.identity(), Pose(np.eye(3), [5, 0, 0])
        rel = relative_pose(hist, cur)
        # the historical origin sits 5 m behind the current ego
        np.testing.assert_allclose(rel.translation, [-5, 0, 0], atol=1e-12)
        landmark = np.array([12.0, -3.0, 0.5])
        obs_hist = np.linalg.inv(hist.matrix()) @ np.append(landmark, 1)
        obs_cur = np.linalg.inv(cur.matrix()) @ np.append(landmark, 1)
        np.testing.assert_allclose(rel.apply(obs_hist[:3]), obs_cur[:3], atol=1e-12)

    def test_yaw_90_between_frames(self):
        rel = relative_pose(Pose.identity(), Pose.from_ypr(math.pi / 2))
        np.testing.assert_allclose(rel.rotation, Pose.from_ypr(-math.pi / 2).rotation, atol=1e-12)


class TestTransformPoints:
    def test_identity(self):
        pc = PointCloud(np.random.default_rng(0).normal(size=(10, 3)), np.full(10, 0.5), 2)
        out = transform_points(Pose.identity(), pc)
        np.testing.assert_array_equal(out.points, pc.points)
        assert out.timestamp_index == 2
        np.testing.assert_array_equal(out.intensity, pc.intensity)

    def test_translation(self):
        out = transform_points(Pose(np.eye(3), [1, 0, 0]), PointCloud(np.zeros((1, 3))))
        np.testing.assert_array_equal(out.points, [[1, 0, 0]])

    def test_yaw_90(self):
        out = transform_points(Pose.from_ypr(math.pi / 2), PointCloud([[1.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.points, [[0, 1, 0]], atol=1e-9)

    @settings(max_examples=50)
    @given(poses(), st.lists(coords, min_size=6, max_size=6))
    def test_isometry(self, p, xs):
        a, b = np.array(xs[:3]), np.array(xs[3:])
        out = transform_points(p, PointCloud(np.stack([a, b]))).points
        assert abs(np.linalg.norm(out[0] - out[1]) - np.linalg.norm(a - b)) < 1e-9


def test_alignment_consistency():
    """A world-static landmark seen from two ego poses lands on itself."""
    rng = np.random.default_rng(7)
    for _ in range(100):
        ego_k, ego_t = random_pose(rng), random_pose(rng)
        world = rng.uniform(-30, 30, (5, 3))
        obs_k = pose_inverse(ego_k).apply(world)
        obs_t = pose_inverse(ego_t).apply(world)
        moved = transform_points(relative_pose(ego_k, ego_t), PointCloud(obs_k)).points
        assert np.max(np.abs(moved - obs_t)) < 1e-9


def test_json_round_trip():
    p = Pose.from_ypr(0.4, -0.2, 0.1, [1.5, -2.0, 0.25])
    obj = p.to_json()
    assert len(obj["rotation"]) == 9 and len(obj["translation"]) == 3
    q = Pose.from_json(obj)
    np.testing.assert_array_equal(q.matrix(), p.matrix())


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud([[np.nan, 0, 0]])
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], [1.5])
