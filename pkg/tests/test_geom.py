"""Pose algebra, point-cloud transforms, and sector removal."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarloop.geom import (
    Point,
    PointCloud,
    Pose,
    PoseError,
    apply_pose,
    compose,
    inverse,
    pose_error,
    remove_sector,
)

from helpers import random_pose, random_rotation, rodrigues


def rotations(draw):
    """Hypothesis helper: rotation from a drawn axis and angle."""
    ax = draw(st.tuples(*[st.floats(-1, 1) for _ in range(3)]))
    if np.linalg.norm(ax) < 1e-2:
        ax = (1.0, 0.0, 0.0)
    angle = draw(st.floats(-math.pi, math.pi))
    return rodrigues(ax, angle)


rotation_st = st.composite(rotations)()
translation_st = st.tuples(*[st.floats(-100, 100) for _ in range(3)])


class TestPointCloud:
    def test_point_accessor(self):
        c = PointCloud(np.array([[1.0, 2.0, 3.0]]), np.array([0.5]))
        assert c.point(0) == Point(1.0, 2.0, 3.0, 0.5)

    def test_default_intensity_is_zero(self):
        c = PointCloud(np.zeros((4, 3)))
        assert np.all(c.intensity == 0.0)

    def test_rejects_nan_coordinates_naming_index(self):
        xyz = np.zeros((5, 3))
        xyz[3, 1] = np.nan
        with pytest.raises(ValueError, match="index 3"):
            PointCloud(xyz)

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((4, 2)))

    def test_immutable_after_construction(self):
        c = PointCloud(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            c.xyz[0, 0] = 1.0


class TestPoseValidation:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError, match="orthonormal"):
            Pose(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            Pose(r, np.zeros(3))

    def test_from_matrix_roundtrip(self):
        rng = np.random.default_rng(3)
        p = random_pose(rng)
        q = Pose.from_matrix(p.matrix())
        np.testing.assert_allclose(q.rotation, p.rotation)
        np.testing.assert_allclose(q.translation, p.translation)


class TestApplyPose:
    def test_identity_is_noop(self):
        rng = np.random.default_rng(0)
        cloud = PointCloud(rng.normal(size=(50, 3)))
        out = apply_pose(Pose.identity(), cloud)
        np.testing.assert_array_equal(out.xyz, cloud.xyz)

    def test_yaw_90_moves_x_axis_to_y_axis(self):
        pose = Pose.from_rpy(0.0, 0.0, math.pi / 2)
        cloud = PointCloud(np.array([[1.0, 0.0, 0.0]]))
        out = apply_pose(pose, cloud)
        np.testing.assert_allclose(out.xyz[0], [0.0, 1.0, 0.0], atol=1e-12)

    def test_preserves_pairwise_distances(self):
        # Rigid transforms are isometries.
        rng = np.random.default_rng(7)
        cloud = PointCloud(rng.normal(size=(40, 3)) * 10)
        out = apply_pose(random_pose(rng), cloud)
        d_in = np.linalg.norm(cloud.xyz[:, None] - cloud.xyz[None], axis=-1)
        d_out = np.linalg.norm(out.xyz[:, None] - out.xyz[None], axis=-1)
        np.testing.assert_allclose(d_out, d_in, atol=1e-9)

    def test_preserves_intensity_and_order(self):
        rng = np.random.default_rng(11)
        cloud = PointCloud(rng.normal(size=(20, 3)), rng.uniform(0, 1, 20))
        out = apply_pose(random_pose(rng), cloud)
        np.testing.assert_array_equal(out.intensity, cloud.intensity)


class TestPoseAlgebra:
    @given(rotation_st, translation_st)
    @settings(max_examples=50, deadline=None)
    def test_compose_with_inverse_is_identity(self, r, t):
        p = Pose(r, np.asarray(t))
        ident = compose(p, inverse(p))
        np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(ident.translation, 0.0, atol=1e-7)

    def test_compose_matches_matrix_product(self):
        rng = np.random.default_rng(5)
        a, b = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose(
            compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-12
        )

    def test_long_chain_stays_orthonormal(self):
        # compose() re-projects when drift exceeds the tolerance, so even a
        # 10k-deep chain must produce a valid Pose.
        rng = np.random.default_rng(9)
        p = Pose.identity()
        step = random_pose(rng, trans_scale=0.1)
        for _ in range(10_000):
            p = compose(p, step)
        drift = np.abs(p.rotation.T @ p.rotation - np.eye(3)).max()
        assert drift <= 1e-9


class TestPoseError:
    def test_identical_poses_zero_error(self):
        rng = np.random.default_rng(2)
        p = random_pose(rng)
        err = pose_error(p, p)
        assert err.translation_error == 0.0
        assert err.rotation_error == pytest.approx(0.0, abs=1e-6)

    def test_pure_yaw_offset(self):
        truth = Pose.identity()
        est = Pose.from_rpy(0.0, 0.0, math.radians(10.0))
        err = pose_error(est, truth)
        assert err.translation_error == 0.0
        assert err.rotation_error == pytest.approx(10.0, abs=1e-9)

    def test_translation_error_is_euclidean_distance(self):
        truth = Pose(np.eye(3), np.array([1.0, 2.0, 2.0]))
        est = Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        err = pose_error(est, truth)
        assert err.translation_error == pytest.approx(math.sqrt(8.0))

    @given(rotation_st, rotation_st)
    @settings(max_examples=50, deadline=None)
    def test_rotation_error_in_valid_range(self, r1, r2):
        err = pose_error(Pose(r1, np.zeros(3)), Pose(r2, np.zeros(3)))
        assert 0.0 <= err.rotation_error <= 180.0

    def test_half_turn_is_180(self):
        est = Pose.from_rpy(0.0, 0.0, math.pi)
        err = pose_error(est, Pose.identity())
        assert err.rotation_error == pytest.approx(180.0, abs=1e-6)

    def test_clamps_acos_argument(self):
        # Trace of R_t^T R_e can exceed 3 by float noise; must not raise.
        rng = np.random.default_rng(4)
        for _ in range(200):
            r = random_rotation(rng)
            err = pose_error(Pose(r, np.zeros(3)), Pose(r.copy(), np.zeros(3)))
            assert err.rotation_error == pytest.approx(0.0, abs=1e-5)

    def test_rejects_negative_error_values(self):
        with pytest.raises(ValueError):
            PoseError(-0.1, 0.0)
        with pytest.raises(ValueError):
            PoseError(0.0, 181.0)


def ring_cloud(n=360, radius=10.0):
    ang = np.radians(np.arange(n, dtype=float))
    xyz = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(n)], axis=1)
    return PointCloud(xyz)


class TestRemoveSector:
    def test_quarter_sector_on_degree_ring(self):
        # 360 points at 1-degree spacing; a 90-degree wedge covers exactly 90
        # of them (half-open interval), leaving 270 — oracle: direct count.
        cloud = ring_cloud()
        out = remove_sector(cloud, center_deg=30.0, width_deg=90.0)
        assert len(out) == 270

    def test_wraparound_matches_brute_force(self):
        # Sector straddling the +/-180 seam, checked per point.
        rng = np.random.default_rng(12)
        xyz = rng.normal(size=(500, 3)) * 20
        cloud = PointCloud(xyz)
        center, width = 175.0, 40.0
        out = remove_sector(cloud, center, width)
        az = np.degrees(np.arctan2(xyz[:, 1], xyz[:, 0]))
        diff = (az - center + 180.0) % 360.0 - 180.0
        expect_removed = np.count_nonzero((diff >= -20.0) & (diff < 20.0))
        assert expect_removed > 0  # the seam sector is populated
        assert len(out) == len(cloud) - expect_removed

    def test_zero_width_removes_nothing(self):
        cloud = ring_cloud()
        assert len(remove_sector(cloud, 10.0, 0.0)) == len(cloud)

    def test_width_bounds_enforced(self):
        with pytest.raises(ValueError):
            remove_sector(ring_cloud(), 0.0, 360.0)

    def test_tiling_removes_every_point_once(self):
        # Four disjoint 90-degree wedges partition the circle.
        cloud = ring_cloud(n=257)  # odd count, not aligned with wedges
        total_removed = 0
        for center in (0.0, 90.0, 180.0, 270.0):
            kept = remove_sector(cloud, center, 90.0)
            total_removed += len(cloud) - len(kept)
        assert total_removed == len(cloud)
