"""Feature matching, RANSAC, and ICP refinement."""

import math

import numpy as np
import pytest

from lidarloop.features import FeatureSpec, KeypointFeatures, extract_features
from lidarloop.geom import (
    PointCloud,
    Pose,
    apply_pose,
    pose_error,
    transform_points,
)
from lidarloop.ingest import (
    PairSpec,
    SceneSpec,
    SyntheticScene,
    generate_scene_cloud,
    generate_synthetic_pair,
)
from lidarloop.registration import (
    IcpParams,
    InsufficientMatchesError,
    RansacParams,
    RegistrationResult,
    icp,
    match_features,
    ransac_register,
    success_check,
)
from lidarloop.sampling import KeypointSet, VoxelGridSpec, farthest_point_sampling, voxel_downsample
from lidarloop.transport import UotParams, estimate_pose_uot

from helpers import random_pose, rodrigues


def features_from(vectors, coords, tag="test"):
    """Wrap raw unit vectors + coordinates as a KeypointFeatures."""
    vectors = np.asarray(vectors, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    kp = KeypointSet(np.arange(len(coords)), coords)
    return KeypointFeatures(kp, vectors, tag)


def paired_sets(rng, n, pose, wrong=0, span=25.0):
    """Feature-identified correspondence sets: source i matches target i.

    The first ``n - wrong`` targets obey ``pose``; the rest are placed
    uniformly at random, so exactly ``wrong`` matches are geometric
    outliers.
    """
    src_pts = rng.uniform(-span, span, (n, 3))
    tgt_pts = transform_points(pose, src_pts)
    if wrong:
        tgt_pts[n - wrong:] = rng.uniform(-span, span, (wrong, 3))
    eye = np.eye(n)
    return (features_from(eye, src_pts), features_from(eye, tgt_pts))


class TestMatchFeatures:
    def test_self_match_is_identity_with_zero_cost(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(12, 6))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        f = features_from(v, rng.normal(size=(12, 3)))
        matches = match_features(f, f)
        assert sorted(m[0] for m in matches) == list(range(12))
        for i, j, c in matches:
            assert i == j
            assert abs(c) < 1e-12

    def test_mutual_check_keeps_at_most_one_per_contested_column(self):
        # both rows prefer column 2; only the closer row survives
        a = features_from([[1.0, 0.0], [0.9, math.sqrt(1 - 0.81)]],
                          np.zeros((2, 3)))
        b = features_from([[0.0, 1.0], [0.6, 0.8], [0.99, math.sqrt(1 - 0.9801)]],
                          np.zeros((3, 3)))
        matches = match_features(a, b, mutual=True)
        assert [(i, j) for i, j, _ in matches] == [(0, 2)]

    def test_non_mutual_keeps_every_row(self):
        a = features_from([[1.0, 0.0], [0.9, math.sqrt(1 - 0.81)]],
                          np.zeros((2, 3)))
        b = features_from([[0.0, 1.0], [0.99, math.sqrt(1 - 0.9801)]],
                          np.zeros((2, 3)))
        matches = match_features(a, b, mutual=False)
        assert len(matches) == 2
        assert all(j == 1 for _, j, _ in matches)

    def test_orthogonal_sets_match_at_cost_one(self):
        a = features_from([[1.0, 0.0, 0.0]], np.zeros((1, 3)))
        b = features_from([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], np.zeros((2, 3)))
        matches = match_features(a, b, mutual=False)
        assert len(matches) == 1
        assert abs(matches[0][2] - 1.0) < 1e-12

    def test_sorted_by_cost_ascending(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=(20, 8))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        f = features_from(v, rng.normal(size=(20, 3)))
        g = features_from(np.roll(v, 1, axis=0) + rng.normal(0, 0.05, v.shape),
                          rng.normal(size=(20, 3)))
        costs = [c for _, _, c in match_features(f, g, mutual=False)]
        assert costs == sorted(costs)

    def test_empty_rejected(self):
        f = features_from(np.eye(3), np.zeros((3, 3)))
        empty = KeypointFeatures(
            KeypointSet(np.empty(0, dtype=np.int64), np.empty((0, 3))),
            np.empty((0, 3)), "test")
        with pytest.raises(ValueError, match="empty"):
            match_features(f, empty)

    def test_dim_mismatch_rejected(self):
        f = features_from(np.eye(3), np.zeros((3, 3)))
        g = features_from(np.eye(4), np.zeros((4, 3)))
        with pytest.raises(ValueError, match="dimension"):
            match_features(f, g)


class TestRansac:
    def test_exact_correspondences_recover_pose(self):
        rng = np.random.default_rng(1)
        true = random_pose(rng)
        src, tgt = paired_sets(rng, 60, true)
        result = ransac_register(src, tgt, seed=4)
        assert result.converged
        assert result.fitness == 1.0
        np.testing.assert_allclose(result.pose.rotation, true.rotation,
                                   atol=1e-9)
        np.testing.assert_allclose(result.pose.translation, true.translation,
                                   atol=1e-9)

    def test_half_outliers_still_recover(self):
        rng = np.random.default_rng(2)
        true = random_pose(rng)
        src, tgt = paired_sets(rng, 400, true, wrong=200)
        params = RansacParams(inlier_threshold=0.3)
        result = ransac_register(src, tgt, params, seed=7)
        err = pose_error(result.pose, true)
        assert result.converged
        assert err.translation_error < 0.1
        assert err.rotation_error < 1.0
        assert abs(result.fitness - 0.5) < 0.1

    @pytest.mark.parametrize("seed", range(20))
    def test_all_random_matches_do_not_converge(self, seed):
        rng = np.random.default_rng(100 + seed)
        src_pts = rng.uniform(-25, 25, (120, 3))
        tgt_pts = rng.uniform(-25, 25, (120, 3))
        eye = np.eye(120)
        result = ransac_register(features_from(eye, src_pts),
                                 features_from(eye, tgt_pts), seed=seed)
        assert not result.converged

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(5)
        true = random_pose(rng)
        src, tgt = paired_sets(rng, 150, true, wrong=60)
        a = ransac_register(src, tgt, seed=11)
        b = ransac_register(src, tgt, seed=11)
        assert np.array_equal(a.pose.rotation, b.pose.rotation)
        assert np.array_equal(a.pose.translation, b.pose.translation)
        assert a.fitness == b.fitness
        assert a.inlier_rmse == b.inlier_rmse

    def test_fitness_counts_inliers_of_returned_pose(self):
        rng = np.random.default_rng(6)
        true = random_pose(rng)
        src, tgt = paired_sets(rng, 200, true, wrong=50)
        params = RansacParams(inlier_threshold=0.4)
        result = ransac_register(src, tgt, params, seed=3)
        matches = match_features(src, tgt, params.mutual_check)
        s = src.keypoints.coordinates[[m[0] for m in matches]]
        t = tgt.keypoints.coordinates[[m[1] for m in matches]]
        d = np.linalg.norm(transform_points(result.pose, s) - t, axis=1)
        assert int(round(result.fitness * len(matches))) == int(
            (d < params.inlier_threshold).sum())

    def test_noisy_inliers_beat_single_sample_fit(self):
        # the consensus refit averages noise over all inliers
        rng = np.random.default_rng(8)
        true = random_pose(rng)
        src_pts = rng.uniform(-25, 25, (300, 3))
        tgt_pts = transform_points(true, src_pts) + rng.normal(0, 0.05,
                                                               (300, 3))
        eye = np.eye(300)
        result = ransac_register(features_from(eye, src_pts),
                                 features_from(eye, tgt_pts), seed=1)
        err = pose_error(result.pose, true)
        assert result.converged
        assert err.translation_error < 0.02
        assert err.rotation_error < 0.1

    def test_insufficient_matches_raise(self):
        f = features_from(np.eye(2), np.zeros((2, 3)))
        with pytest.raises(InsufficientMatchesError):
            ransac_register(f, f)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            RansacParams(sample_size=2)
        with pytest.raises(ValueError):
            RansacParams(inlier_threshold=0.0)
        with pytest.raises(ValueError):
            RansacParams(min_inlier_fraction=0.0)
        with pytest.raises(ValueError):
            RansacParams(max_iterations=0)


@pytest.fixture(scope="module")
def structured_pair():
    """A dense structured scene and its 180-degree-yaw counterpart."""
    spec = SceneSpec(n_points=6000, ground_fraction=0.2, wall_fraction=0.3,
                     box_fraction=0.32, clutter_fraction=0.18,
                     n_walls=7, n_boxes=12, n_poles=16)
    base = generate_scene_cloud(spec, seed=42)
    pair_spec = PairSpec(trans_xy=1.0, trans_z=0.1, yaw_deg=0.0,
                         roll_pitch_deg=0.0, noise_sigma=0.01)
    rng = np.random.default_rng(9)
    yaw = math.radians(180.0)
    pose = Pose(rodrigues([0, 0, 1], yaw),
                np.array([1.2, -0.7, 0.05]))
    noisy_src = PointCloud(base.xyz + rng.normal(0, 0.01, base.xyz.shape))
    moved = apply_pose(pose, base)
    noisy_tgt = PointCloud(moved.xyz + rng.normal(0, 0.01, moved.xyz.shape))
    return noisy_src, noisy_tgt, pose


class TestIcp:
    def test_truth_initialization_converges_immediately(self):
        base = generate_scene_cloud(SceneSpec(n_points=3000), seed=21)
        pose = Pose(rodrigues([0, 0, 1], math.radians(170.0)),
                    np.array([0.8, -0.4, 0.02]))
        result = icp(base, apply_pose(pose, base), pose)
        assert result.converged
        assert result.iterations_used <= 2
        assert result.inlier_rmse < 1e-9
        err = pose_error(result.pose, pose)
        assert err.translation_error < 1e-9

    def test_self_registration_returns_initial(self):
        cloud = generate_scene_cloud(SceneSpec(n_points=2000), seed=3)
        rng = np.random.default_rng(4)
        p = random_pose(rng, trans_scale=2.0)
        result = icp(cloud, apply_pose(p, cloud), p)
        assert result.converged
        assert result.fitness == 1.0
        err = pose_error(result.pose, p)
        assert err.translation_error < 1e-9
        assert err.rotation_error < 1e-7

    def test_identity_init_fails_on_reverse_pair(self, structured_pair):
        src, tgt, pose = structured_pair
        result = icp(voxel_downsample(src), voxel_downsample(tgt),
                     Pose.identity())
        err = pose_error(result.pose, pose)
        assert not success_check(err)

    def test_uot_seed_refines_to_success(self, structured_pair):
        src, tgt, pose = structured_pair
        fspec = FeatureSpec(radii=(1.0, 2.0, 4.0))
        feats = []
        for side in (src, tgt):
            ds = voxel_downsample(side)
            kp = farthest_point_sampling(ds, 1024)
            feats.append(extract_features(ds, kp, fspec))
        seed_pose, _ = estimate_pose_uot(
            feats[0], feats[1],
            UotParams(lam=0.003, rho=0.1, iterations=10),
            mass_floor_scale=0.5)
        result = icp(voxel_downsample(src), voxel_downsample(tgt), seed_pose)
        err = pose_error(result.pose, pose)
        assert err.translation_error < 0.2
        assert err.rotation_error < 1.0

    def test_point_to_point_history_non_increasing(self, structured_pair):
        src, tgt, pose = structured_pair
        rng = np.random.default_rng(12)
        jitter = Pose(rodrigues(rng.normal(size=3), 0.05),
                      pose.translation + rng.normal(0, 0.2, 3))
        nudged = Pose(jitter.rotation @ pose.rotation @ pose.rotation.T
                      @ pose.rotation, jitter.translation)
        result = icp(voxel_downsample(src), voxel_downsample(tgt), nudged,
                     IcpParams(correspondence_distance=5.0))
        hist = result.error_history
        assert len(hist) >= 2
        for earlier, later in zip(hist, hist[1:]):
            assert later <= earlier + 1e-12

    def test_point_to_plane_variant_converges(self, structured_pair):
        src, tgt, pose = structured_pair
        rng = np.random.default_rng(13)
        nudged = Pose(rodrigues([0, 0, 1], 0.03) @ pose.rotation,
                      pose.translation + rng.normal(0, 0.1, 3))
        result = icp(voxel_downsample(src), voxel_downsample(tgt), nudged,
                     IcpParams(variant="point_to_plane"))
        assert result.converged
        err = pose_error(result.pose, pose)
        assert err.translation_error < 0.05
        assert err.rotation_error < 0.5

    def test_disjoint_clouds_report_failure(self):
        rng = np.random.default_rng(14)
        a = PointCloud(rng.uniform(0, 5, (50, 3)))
        b = PointCloud(rng.uniform(100, 105, (50, 3)))
        result = icp(a, b, Pose.identity(),
                     IcpParams(correspondence_distance=0.5))
        assert not result.converged
        assert result.fitness == 0.0

    def test_small_clouds_rejected(self):
        tiny = PointCloud(np.zeros((5, 3)))
        with pytest.raises(ValueError, match="at least 10"):
            icp(tiny, tiny, Pose.identity())

    def test_param_validation(self):
        with pytest.raises(ValueError, match="variant"):
            IcpParams(variant="point2point")
        with pytest.raises(ValueError):
            IcpParams(max_iterations=0)
        with pytest.raises(ValueError):
            IcpParams(correspondence_distance=0.0)


class TestSuccessCheck:
    def test_zero_error_succeeds(self):
        assert success_check(pose_error(Pose.identity(), Pose.identity()))

    def test_boundary_is_strict(self):
        from lidarloop.geom import PoseError
        assert not success_check(PoseError(2.0, 0.0))
        assert not success_check(PoseError(0.0, 5.0))
        assert success_check(PoseError(1.99, 4.99))


class TestResultValidation:
    def test_fitness_range_enforced(self):
        with pytest.raises(ValueError, match="fitness"):
            RegistrationResult(Pose.identity(), 1.5, 0.0, 1, True)

    def test_negative_rmse_rejected(self):
        with pytest.raises(ValueError, match="rmse"):
            RegistrationResult(Pose.identity(), 0.5, -1.0, 1, True)
