import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from hoshape.camera import (
    CameraIntrinsics,
    CameraView,
    HandPose,
    build_aligned_feature_grid,
    canonical_to_pixel,
    latent_cell_centers,
    project_points,
    read_pose_file,
    sample_feature,
    write_pose_file,
)
from hoshape.tsdf import GridSpec

INTR = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def random_pose(seed):
    rng = np.random.default_rng(seed)
    return HandPose(Rotation.random(random_state=seed).as_matrix(), rng.normal(size=3))


def bilinear_oracle(fm, x, y):
    """Scalar bilinear lookup in feature-cell units, cells centred on integers."""
    h, w = fm.shape[:2]
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = min(int(np.floor(x)), w - 2), min(int(np.floor(y)), h - 2)
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * fm[y0, x0] + fx * (1 - fy) * fm[y0, x0 + 1]
            + (1 - fx) * fy * fm[y0 + 1, x0] + fx * fy * fm[y0 + 1, x0 + 1])


class TestPose:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            HandPose(np.eye(3) * 1.01, np.zeros(3))
        with pytest.raises(ValueError):
            HandPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_round_trip(self):
        pose = random_pose(3)
        p = np.random.default_rng(0).normal(size=(50, 3))
        np.testing.assert_allclose(pose.apply_inverse(pose.apply(p)), p, atol=1e-9)
        np.testing.assert_allclose(pose.inverse().apply(pose.apply(p)), p, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_isometry(self, seed):
        pose = random_pose(seed)
        a, b = np.random.default_rng(seed).normal(size=(2, 3))
        da = np.linalg.norm(pose.apply(a) - pose.apply(b))
        assert da == pytest.approx(np.linalg.norm(a - b), abs=1e-9)

    def test_pose_file(self, tmp_path):
        pose = random_pose(1)
        write_pose_file(tmp_path / "p.json", pose, INTR)
        d = json.loads((tmp_path / "p.json").read_text())
        assert set(d) == {"R", "t", "fx", "fy", "cx", "cy", "width", "height"}
        assert len(d["R"]) == 9
        pose2, intr2 = read_pose_file(tmp_path / "p.json")
        np.testing.assert_allclose(pose2.rotation, pose.rotation)
        assert intr2 == INTR


class TestProjection:
    def test_intrinsics_invariants(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
        with pytest.raises(ValueError):
            CameraIntrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)

    def test_image_dims_checked(self):
        with pytest.raises(ValueError):
            CameraView(np.zeros((10, 12, 3)), INTR, HandPose.identity())

    def test_optical_axis(self):
        view = CameraView(None, INTR, HandPose.identity())
        assert canonical_to_pixel([0, 0, 1], view) == (320.0, 240.0, 1.0, True)

    def test_known_u(self):
        u, v, z, ok = canonical_to_pixel([0.1, 0, 1], CameraView(None, INTR, HandPose.identity()))
        assert u == pytest.approx(370.0) and v == pytest.approx(240.0) and ok

    def test_behind_camera_flagged(self):
        _, _, z, ok = canonical_to_pixel([0, 0, -0.5], CameraView(None, INTR, HandPose.identity()))
        assert not ok and z == -0.5
        assert not canonical_to_pixel([0, 0, 1e-7], CameraView(None, INTR, HandPose.identity()))[3]

    def test_pose_maps_camera_to_hand(self):
        # camera-frame point q; its canonical coordinates are R q + t
        pose = random_pose(5)
        q = np.array([0.05, -0.02, 0.7])
        u, v, z, ok = canonical_to_pixel(pose.apply(q), CameraView(None, INTR, pose))
        assert ok and z == pytest.approx(0.7)
        assert u == pytest.approx(500 * 0.05 / 0.7 + 320) and v == pytest.approx(500 * -0.02 / 0.7 + 240)

    @settings(max_examples=30, deadline=None)
    @given(lam=st.floats(0.1, 10.0), seed=st.integers(0, 1000))
    def test_scale_invariance(self, lam, seed):
        q = np.random.default_rng(seed).uniform([-0.3, -0.3, 0.5], [0.3, 0.3, 2.0])
        pose = HandPose.identity()
        uv1, _, _ = project_points(q[None], INTR, pose)
        uv2, _, _ = project_points(lam * q[None], INTR, pose)
        np.testing.assert_allclose(uv1, uv2, atol=1e-9)


class TestSampleFeature:
    fm = np.random.default_rng(0).normal(size=(4, 6, 3))  # h=4, w=6 over a 60x40 image

    def test_cell_centre(self):
        # cell (row 2, col 3) centred at image ((3+0.5)*10, (2+0.5)*10)
        np.testing.assert_allclose(sample_feature(self.fm, 35.0, 25.0, (60, 40)), self.fm[2, 3], atol=1e-12)

    def test_out_of_bounds_zero(self):
        assert np.all(sample_feature(self.fm, -5.0, 10.0, (60, 40)) == 0.0)
        assert np.all(sample_feature(self.fm, 30.0, 40.0, (60, 40)) == 0.0)
        assert np.all(sample_feature(self.fm, 30.0, 20.0, (60, 40), valid=False) == 0.0)

    def test_horizontal_midpoint(self):
        got = sample_feature(self.fm, 40.0, 25.0, (60, 40))
        np.testing.assert_allclose(got, (self.fm[2, 3] + self.fm[2, 4]) / 2, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(u=st.floats(0, 59.999), v=st.floats(0, 39.999))
    def test_matches_oracle(self, u, v):
        want = bilinear_oracle(self.fm, u * 6 / 60 - 0.5, v * 4 / 40 - 0.5)
        np.testing.assert_allclose(sample_feature(self.fm, u, v, (60, 40)), want, atol=1e-10)


class TestAlignedGrid:
    spec = GridSpec(32, 0.1, 0.02)

    def view_facing_cube(self):
        # camera 0.5 m in front of the cube centre, looking along +z in hand frame
        pose = HandPose(np.eye(3), np.array([0.0, 0.0, -0.5]))
        return CameraView(None, CameraIntrinsics(100.0, 100.0, 32.0, 32.0, 64, 64), pose)

    def test_cell_centres(self):
        c = latent_cell_centers(self.spec, 8, 1)[:, :, :, 0]
        assert c.shape == (8, 8, 8, 3)
        np.testing.assert_allclose(c[0, 0, 0], [-0.1 + 0.0125] * 3)
        np.testing.assert_allclose(c[7, 7, 7], [0.1 - 0.0125] * 3)

    def test_constant_map(self):
        fm = np.full((16, 16, 5), 2.5)
        cube = build_aligned_feature_grid(fm, self.view_facing_cube(), self.spec)
        assert cube.shape == (8, 8, 8, 5)
        np.testing.assert_allclose(cube, 2.5)
        # a longer lens pushes the near corners out of frame: those cells read zero, the rest stay constant
        tele = CameraView(None, CameraIntrinsics(200.0, 200.0, 32.0, 32.0, 64, 64), self.view_facing_cube().pose)
        cube = build_aligned_feature_grid(fm, tele, self.spec)
        uv, _, ok = project_points(latent_cell_centers(self.spec).reshape(-1, 3), tele.intrinsics, tele.pose)
        inside = (ok & (uv >= 0).all(1) & (uv[:, 0] < 64) & (uv[:, 1] < 64)).reshape(8, 8, 8)
        assert 0 < inside.sum() < 512
        np.testing.assert_allclose(cube[inside], 2.5)
        assert np.all(cube[~inside] == 0.0)

    def test_behind_camera_zero(self):
        pose = HandPose(np.eye(3), np.array([0.0, 0.0, 0.5]))  # cube sits behind
        view = CameraView(None, CameraIntrinsics(200.0, 200.0, 32.0, 32.0, 64, 64), pose)
        cube = build_aligned_feature_grid(np.ones((16, 16, 4)), view, self.spec)
        assert np.all(cube == 0.0)

    def test_manual_projection_oracle(self):
        fm = np.random.default_rng(2).normal(size=(16, 16, 4))
        view = self.view_facing_cube()
        cube = build_aligned_feature_grid(fm, view, self.spec)
        centres = latent_cell_centers(self.spec, 8, 1)[:, :, :, 0]
        rng = np.random.default_rng(3)
        for _ in range(10):
            i, j, k = rng.integers(0, 8, size=3)
            p = centres[i, j, k]
            cam = p - view.pose.translation  # identity rotation
            u = 100 * cam[0] / cam[2] + 32
            v = 100 * cam[1] / cam[2] + 32
            want = bilinear_oracle(fm, u * 16 / 64 - 0.5, v * 16 / 64 - 0.5) if (0 <= u < 64 and 0 <= v < 64) else 0
            np.testing.assert_allclose(cube[i, j, k], want, atol=1e-10)
