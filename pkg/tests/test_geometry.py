from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dino4d.errors import BehindCamera, EmptySet, NoVisiblePoints, NonOrthonormalInput, ShapeMismatch
from dino4d.geometry import (
    CameraModel,
    MetricReport,
    Pointmap,
    Pose,
    TrajectorySet,
    apd,
    chamfer_distance,
    compose_pose,
    invert_pose,
    project,
    project_points,
    read_ply,
    rot_z,
    unproject,
    write_ply,
)
from oracles import brute_apd, brute_chamfer_cm, homogeneous, random_rotation


def cam(fx=100.0, cx=50.0, R=None, t=None):
    return CameraModel(np.eye(3) if R is None else R, np.zeros(3) if t is None else t, fx, fx, cx, cx)


class TestProject:
    def test_optical_axis_hits_principal_point(self):
        np.testing.assert_allclose(project([0, 0, 1], cam()), [50, 50])

    def test_pinhole_offset(self):
        np.testing.assert_allclose(project([0.1, 0, 1], cam()), [60, 50])

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            project([0, 0, -1], cam())

    def test_on_camera_plane_is_behind(self):
        with pytest.raises(BehindCamera):
            project([1, 1, 1e-7], cam())

    def test_round_trip(self, rng):
        c = cam(R=random_rotation(rng), t=rng.normal(size=3))
        uv = rng.uniform(0, 100, (200, 2))
        depth = rng.uniform(0.5, 10, 200)
        X = unproject(uv, depth, c)
        back, z, front = project_points(X, c)
        assert front.all()
        np.testing.assert_allclose(z, depth, atol=1e-12)
        assert np.abs(back - uv).max() < 1e-9

    def test_non_orthonormal_rejected(self):
        with pytest.raises(NonOrthonormalInput):
            CameraModel(np.diag([1.0, 1.0, 1.01]), np.zeros(3), 100, 100, 50, 50)


class TestPoses:
    def test_identity_compose(self):
        p = compose_pose(Pose.identity(), Pose.identity())
        np.testing.assert_array_equal(p.matrix(), np.eye(4))

    def test_inverse_law(self):
        a = Pose(rot_z(np.deg2rad(30)), np.array([1.0, 0, 0]))
        ident = compose_pose(invert_pose(a), a)
        np.testing.assert_allclose(ident.matrix(), np.eye(4), atol=1e-12)
        ident = compose_pose(a, invert_pose(a))
        np.testing.assert_allclose(ident.matrix(), np.eye(4), atol=1e-12)

    def test_matches_homogeneous_product(self, rng):
        for _ in range(20):
            a = Pose(random_rotation(rng), rng.normal(size=3))
            b = Pose(random_rotation(rng), rng.normal(size=3))
            expect = homogeneous(a.rotation, a.translation) @ homogeneous(b.rotation, b.translation)
            np.testing.assert_allclose(compose_pose(a, b).matrix(), expect, atol=1e-12)

    def test_associative(self, rng):
        a, b, c = (Pose(random_rotation(rng), rng.normal(size=3)) for _ in range(3))
        left = compose_pose(compose_pose(a, b), c).matrix()
        right = compose_pose(a, compose_pose(b, c)).matrix()
        np.testing.assert_allclose(left, right, atol=1e-9)


class TestChamfer:
    def test_identical_sets(self, rng):
        a = rng.normal(size=(30, 3))
        assert chamfer_distance(a, a) == 0.0

    def test_single_points(self):
        assert chamfer_distance([[0, 0, 0]], [[3, 4, 0]]) == pytest.approx(500.0, abs=1e-12)

    def test_empty(self):
        with pytest.raises(EmptySet):
            chamfer_distance(np.zeros((0, 3)), np.ones((2, 3)))

    def test_brute_force(self, rng):
        for _ in range(10):
            a = rng.normal(size=(64, 3))
            b = rng.normal(size=(64, 3))
            assert chamfer_distance(a, b) == pytest.approx(brute_chamfer_cm(a, b), rel=1e-9)

    def test_exactly_symmetric(self, rng):
        a = rng.normal(size=(40, 3))
        b = rng.normal(size=(57, 3))
        assert chamfer_distance(a, b) == chamfer_distance(b, a)


class TestAPD:
    def _tracks(self, rng, Q=12, T=5):
        truth = rng.normal(size=(Q, T, 3))
        vis = rng.random((Q, T)) > 0.3
        vis[:, 0] = True
        return truth, vis

    def test_perfect(self, rng):
        truth, vis = self._tracks(rng)
        ts = TrajectorySet(truth, vis)
        assert apd(ts, ts, [0.1, 0.3, 0.5]) == [100.0, 100.0, 100.0]

    def test_uniform_offset(self, rng):
        truth, vis = self._tracks(rng)
        pred = truth + np.array([0.2, 0, 0])
        assert apd(TrajectorySet(pred, vis), TrajectorySet(truth, vis), [0.1, 0.3, 0.5]) == [0.0, 100.0, 100.0]

    def test_brute_force(self, rng):
        truth, vis = self._tracks(rng, 20, 6)
        pred = truth + rng.normal(scale=0.25, size=truth.shape)
        got = apd(TrajectorySet(pred, vis), TrajectorySet(truth, vis), [0.1, 0.3, 0.5])
        np.testing.assert_allclose(got, brute_apd(pred, truth, vis, [0.1, 0.3, 0.5]), rtol=1e-12)

    def test_shape_mismatch(self, rng):
        truth, vis = self._tracks(rng)
        with pytest.raises(ShapeMismatch):
            apd(TrajectorySet(truth[:5], vis[:5]), TrajectorySet(truth, vis), [0.1])

    def test_no_visible(self, rng):
        truth, vis = self._tracks(rng)
        pred_vis = vis.copy()
        ts_pred = TrajectorySet(truth, pred_vis)
        empty = TrajectorySet.__new__(TrajectorySet)
        empty.positions, empty.visible = truth, np.zeros_like(vis)
        with pytest.raises(NoVisiblePoints):
            apd(ts_pred, empty, [0.1])

    def test_rigid_invariance(self, rng):
        truth, vis = self._tracks(rng)
        pred = truth + rng.normal(scale=0.2, size=truth.shape)
        R, t = random_rotation(rng), rng.normal(size=3)
        before = apd(TrajectorySet(pred, vis), TrajectorySet(truth, vis), [0.1, 0.3, 0.5])
        after = apd(TrajectorySet(pred @ R.T + t, vis), TrajectorySet(truth @ R.T + t, vis), [0.1, 0.3, 0.5])
        assert before == after

    def test_never_visible_query_rejected(self):
        with pytest.raises(ValueError):
            TrajectorySet(np.zeros((2, 3, 3)), np.array([[True, False, False], [False, False, False]]))

    def test_report_requires_monotone(self):
        with pytest.raises(ValueError):
            MetricReport([0.1, 0.3], [50.0, 40.0], 1.0, 10)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 2.0), min_size=1, max_size=5, unique=True), st.integers(0, 2**31 - 1))
def test_apd_monotone(thresholds, seed):
    rng = np.random.default_rng(seed)
    truth = rng.normal(size=(8, 4, 3))
    vis = np.ones((8, 4), bool)
    pred = truth + rng.normal(scale=0.5, size=truth.shape)
    vals = apd(TrajectorySet(pred, vis), TrajectorySet(truth, vis), sorted(thresholds))
    assert all(b >= a for a, b in zip(vals, vals[1:]))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_chamfer_symmetric_and_matches_oracle(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    assert chamfer_distance(a, b) == chamfer_distance(b, a)
    assert chamfer_distance(a, b) == pytest.approx(brute_chamfer_cm(a, b), rel=1e-9)


class TestPly:
    def test_two_valid_points(self, tmp_path):
        pts = np.zeros((2, 2, 3))
        pts[0, 0] = [1, 2, 3]
        pts[1, 1] = [4, 5, 6]
        valid = np.array([[True, False], [False, True]])
        n = write_ply(Pointmap(pts, valid, 0, 0), tmp_path / "a.ply")
        assert n == 2
        text = (tmp_path / "a.ply").read_text()
        assert "element vertex 2" in text
        assert "property float x" in text or "property double x" in text
        np.testing.assert_allclose(read_ply(tmp_path / "a.ply"), [[1, 2, 3], [4, 5, 6]])
