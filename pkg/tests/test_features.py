"""Local shape descriptors: invariances, degenerate cases, cost matrix."""

import math

import numpy as np
import pytest

from lidarloop.features import (
    FeatureSpec,
    KeypointFeatures,
    cost_matrix,
    extract_features,
)
from lidarloop.geom import PointCloud, Pose, apply_pose
from lidarloop.ingest import SceneSpec, generate_scene_cloud
from lidarloop.sampling import KeypointSet, farthest_point_sampling

from helpers import brute_force_radius_neighbors


def keypoints_at(cloud, indices):
    idx = np.asarray(indices, dtype=np.int64)
    return KeypointSet(idx, cloud.xyz[idx])


@pytest.fixture(scope="module")
def scene():
    return generate_scene_cloud(SceneSpec(n_points=3000), seed=11)


@pytest.fixture(scope="module")
def scene_features(scene):
    kp = farthest_point_sampling(scene, 64)
    return extract_features(scene, kp)


class TestBasicShape:
    def test_dimension_is_radii_times_block(self, scene_features):
        spec = FeatureSpec()
        assert spec.dim == len(spec.radii) * 22
        assert scene_features.features.shape == (64, spec.dim)

    def test_rows_are_unit_norm(self, scene_features):
        norms = np.linalg.norm(scene_features.features, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)

    def test_rows_are_finite(self, scene_features):
        assert np.isfinite(scene_features.features).all()

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            FeatureSpec(radii=())
        with pytest.raises(ValueError):
            FeatureSpec(radii=(1.0, 0.5))  # not ascending
        with pytest.raises(ValueError):
            FeatureSpec(min_neighbors=2)

    def test_spec_hash_distinguishes_specs(self):
        a = FeatureSpec()
        b = FeatureSpec(radii=(0.5, 1.0, 2.0))
        assert a.spec_hash() != b.spec_hash()
        assert a.spec_hash() == FeatureSpec().spec_hash()


class TestPlaneSignature:
    def test_flat_plane_keypoint(self):
        # Dense horizontal plane: the smallest eigenvalue ratio vanishes and
        # all normal-angle mass sits in the vertical (first) bin.
        rng = np.random.default_rng(0)
        xyz = np.zeros((2000, 3))
        xyz[:, :2] = rng.uniform(-3, 3, (2000, 2))
        cloud = PointCloud(xyz)
        kp = keypoints_at(cloud, [0])
        spec = FeatureSpec()
        feats = extract_features(cloud, kp, spec)
        block = feats.features[0, :spec.block_dim]
        eig_ratios = block[0:3]
        angle_hist = block[3:11]
        assert eig_ratios[2] < 1e-9          # planar: third eigenvalue ~ 0
        assert angle_hist[0] > 0             # vertical bin owns the mass
        np.testing.assert_allclose(angle_hist[1:], 0.0, atol=1e-12)

    def test_vertical_pole_is_linear(self):
        # Points along a vertical line: dominant eigenvalue ratio ~ 1.
        z = np.linspace(0, 3, 300)
        xyz = np.stack([np.zeros_like(z), np.zeros_like(z), z], axis=1)
        cloud = PointCloud(xyz)
        feats = extract_features(cloud, keypoints_at(cloud, [150]))
        spec = FeatureSpec()
        assert feats.features[150 * 0, 0] > 0  # well-defined
        block = feats.features[0, :spec.block_dim]
        ratios = block[0:3] / np.linalg.norm(block[0:3], 1)
        assert ratios[0] > 0.95


class TestInvariance:
    def test_yaw_rotation_invariance(self, scene):
        # Same scene yawed by 37 degrees; keypoints correspond by index
        # because apply_pose preserves point order.
        kp = farthest_point_sampling(scene, 48)
        base = extract_features(scene, kp)
        pose = Pose.from_rpy(0.0, 0.0, math.radians(37.0),
                             (0.0, 0.0, 0.0))
        rotated = apply_pose(pose, scene)
        kp_rot = keypoints_at(rotated, kp.indices)
        rot = extract_features(rotated, kp_rot)
        np.testing.assert_allclose(rot.features, base.features, atol=1e-5)

    def test_translation_invariance(self, scene):
        kp = farthest_point_sampling(scene, 48)
        base = extract_features(scene, kp)
        pose = Pose(np.eye(3), np.array([12.0, -7.0, 1.3]))
        moved = apply_pose(pose, scene)
        kp_mv = keypoints_at(moved, kp.indices)
        mv = extract_features(moved, kp_mv)
        np.testing.assert_allclose(mv.features, base.features, atol=1e-6)

    def test_not_invariant_to_tilt(self, scene):
        # Sanity: a large roll changes height/normal statistics, so the
        # descriptor is yaw-invariant but not fully SO(3)-invariant.
        kp = farthest_point_sampling(scene, 32)
        base = extract_features(scene, kp)
        pose = Pose.from_rpy(math.radians(60.0), 0.0, 0.0, (0, 0, 0))
        tilted = apply_pose(pose, scene)
        tl = extract_features(tilted, keypoints_at(tilted, kp.indices))
        assert np.abs(tl.features - base.features).max() > 1e-3


class TestDegenerateNeighborhoods:
    def test_isolated_keypoint_gets_designated_unit_vector(self):
        xyz = np.vstack([np.zeros((1, 3)) + 1000.0,
                         np.random.default_rng(1).normal(size=(50, 3))])
        cloud = PointCloud(xyz)
        spec = FeatureSpec()
        feats = extract_features(cloud, keypoints_at(cloud, [0]), spec)
        expected = np.full(spec.dim, 1.0 / math.sqrt(spec.dim))
        np.testing.assert_allclose(feats.features[0], expected, atol=1e-12)

    def test_underpopulated_radius_zero_padded(self):
        # Three tight points plus far-away mass: the smallest radius sees
        # fewer than min_neighbors, so its histograms are zero but the
        # density channel still registers the two neighbors.
        xyz = np.array([[0.0, 0, 0], [0.05, 0, 0], [0, 0.05, 0]])
        far = np.random.default_rng(2).normal(size=(100, 3)) + 8.0
        cloud = PointCloud(np.vstack([xyz, far]))
        spec = FeatureSpec(radii=(0.6, 20.0), min_neighbors=5)
        feats = extract_features(cloud, keypoints_at(cloud, [0]), spec)
        first_block = feats.features[0, :spec.block_dim]
        np.testing.assert_array_equal(first_block[:-1], 0.0)
        assert first_block[-1] > 0  # 2 neighbors counted

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValueError):
            extract_features(PointCloud(np.empty((0, 3))),
                             KeypointSet(np.empty(0, dtype=np.int64),
                                         np.empty((0, 3))))


class TestNeighborhoodExactness:
    def test_tree_neighbors_match_brute_force(self, scene):
        # The descriptor relies on exact neighborhoods; verify the k-d tree
        # lookup against an O(N^2) scan for a sample of keypoints and radii.
        from scipy.spatial import cKDTree
        tree = cKDTree(scene.xyz)
        rng = np.random.default_rng(3)
        for idx in rng.integers(0, len(scene), 10):
            for radius in (0.6, 1.2, 2.4):
                got = sorted(tree.query_ball_point(scene.xyz[idx], radius))
                want = sorted(brute_force_radius_neighbors(
                    scene.xyz, scene.xyz[idx], radius).tolist())
                assert got == want


class TestCostMatrix:
    def test_identical_features_give_zero_diagonal(self, scene_features):
        c = cost_matrix(scene_features, scene_features)
        np.testing.assert_allclose(np.diag(c), 0.0, atol=1e-6)

    def test_range_and_formula(self, scene_features):
        c = cost_matrix(scene_features, scene_features)
        assert c.min() >= 0.0 and c.max() <= 2.0
        f = scene_features.features
        np.testing.assert_allclose(c, np.clip(1.0 - f @ f.T, 0, 2), atol=1e-12)

    def test_orthogonal_unit_vectors_cost_one(self):
        kp = KeypointSet(np.arange(2), np.zeros((2, 3)))
        spec = FeatureSpec()
        e0 = np.zeros(spec.dim)
        e0[0] = 1.0
        e1 = np.zeros(spec.dim)
        e1[1] = 1.0
        a = KeypointFeatures(kp, np.vstack([e0, e1]), spec.spec_hash())
        c = cost_matrix(a, a)
        np.testing.assert_allclose(c, [[0.0, 1.0], [1.0, 0.0]], atol=1e-12)

    def test_spec_mismatch_rejected(self, scene, scene_features):
        kp = farthest_point_sampling(scene, 8)
        other = extract_features(scene, kp, FeatureSpec(radii=(0.5, 1.0, 2.0)))
        with pytest.raises(ValueError, match="spec mismatch"):
            cost_matrix(scene_features, other)

    def test_naive_double_loop_oracle(self, scene_features):
        f = scene_features.features[:10]
        kp = KeypointSet(np.arange(10), np.zeros((10, 3)))
        sub = KeypointFeatures(kp, f, scene_features.spec_hash)
        c = cost_matrix(sub, sub)
        for i in range(10):
            for j in range(10):
                want = 1.0 - float(np.dot(f[i], f[j]))
                assert abs(c[i, j] - max(0.0, min(2.0, want))) < 1e-12


def _reference_extract(cloud, keypoints, spec):
    """Straightforward per-keypoint loop over np.histogram / np.cov-style
    statistics; independent of the package's segment-bincount aggregation."""
    from scipy.spatial import cKDTree

    from lidarloop.features import estimate_vertical_angles

    xyz = cloud.xyz
    tree = cKDTree(xyz)
    angles = estimate_vertical_angles(xyz, tree, spec.normal_neighbors)
    out = np.zeros((len(keypoints), spec.dim))
    for i in range(len(keypoints)):
        neigh = np.asarray(tree.query_ball_point(keypoints.coordinates[i],
                                                 spec.radii[-1]),
                           dtype=np.int64)
        neigh = neigh[neigh != keypoints.indices[i]]
        offsets = (xyz[neigh] - keypoints.coordinates[i]
                   if neigh.size else np.empty((0, 3)))
        dists = np.linalg.norm(offsets, axis=1) if neigh.size else np.empty(0)
        for b, radius in enumerate(spec.radii):
            inside = dists <= radius
            count = int(np.count_nonzero(inside))
            block = np.zeros(spec.block_dim)
            block[-1] = count / (count + 32.0)
            if count >= spec.min_neighbors:
                off_r = offsets[inside]
                centered = off_r - off_r.mean(axis=0)
                eigvals = np.linalg.eigvalsh(centered.T @ centered / count)[::-1]
                if eigvals.sum() > 0:
                    block[0:3] = np.clip(eigvals, 0.0, None) / eigvals.sum()
                ah, _ = np.histogram(angles[neigh[inside]],
                                     bins=spec.angle_bins,
                                     range=(0.0, np.pi / 2.0))
                block[3:3 + spec.angle_bins] = ah / count
                rh, _ = np.histogram(dists[inside], bins=spec.radial_bins,
                                     range=(0.0, radius))
                o = 3 + spec.angle_bins
                block[o:o + spec.radial_bins] = rh / count
                block[o + spec.radial_bins] = off_r[:, 2].mean() / radius
                block[o + spec.radial_bins + 1] = off_r[:, 2].std() / radius
            out[i, b * spec.block_dim:(b + 1) * spec.block_dim] = block
    norms = np.linalg.norm(out, axis=1)
    empty = norms < 1e-12
    out[empty] = 1.0 / np.sqrt(spec.dim)
    norms[empty] = 1.0
    return out / norms[:, None]


class TestAgainstLoopReference:
    def test_matches_per_keypoint_loop(self, scene):
        spec = FeatureSpec()
        kp = farthest_point_sampling(scene, 48)
        got = extract_features(scene, kp, spec)
        want = _reference_extract(scene, kp, spec)
        np.testing.assert_allclose(got.features, want, atol=1e-10)

    def test_matches_loop_with_sparse_cloud(self):
        # few points: many keypoints fall below min_neighbors per radius
        rng = np.random.default_rng(5)
        cloud = PointCloud(rng.uniform(-6, 6, (60, 3)).astype(np.float64))
        kp = farthest_point_sampling(cloud, 20)
        spec = FeatureSpec(radii=(0.8, 3.0), min_neighbors=4)
        got = extract_features(cloud, kp, spec)
        want = _reference_extract(cloud, kp, spec)
        np.testing.assert_allclose(got.features, want, atol=1e-10)
