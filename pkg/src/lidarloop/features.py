"""Handcrafted local shape descriptors for keypoints.

Each keypoint is described by concatenating, for every radius in
``FeatureSpec.radii``, a 22-dimensional block of statistics over the
neighborhood within that radius:

* 3 covariance eigenvalue ratios (sorted descending, normalized to sum 1) —
  the classic linearity/planarity/scatter signature,
* 8-bin histogram of the angle between each neighbor's surface normal and
  the vertical axis (mass fractions),
* 8-bin histogram of neighbor distances over [0, radius] (mass fractions),
* mean and standard deviation of neighbor height relative to the keypoint,
  divided by the radius,
* a saturating neighbor-count channel ``c / (c + 32)``.

Every ingredient depends only on distances, relative heights, and |n_z|, so
the descriptor is exactly invariant to translations and rotations about the
vertical axis — a scan revisited from the opposite direction produces the
same local features. The final vector is L2-normalized; keypoints with no
neighbors anywhere map to a designated unit "empty" vector (uniform over
all components) so downstream cosine costs stay well-defined.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geom import PointCloud
from .sampling import KeypointSet

_BLOCK_DOC = ("eigen ratios (3) | normal-angle hist (8) | radial hist (8) | "
              "height mean/std (2) | density (1)")

# count scale for the saturating density channel
_DENSITY_SCALE = 32.0


@dataclass(frozen=True)
class FeatureSpec:
    """Neighborhood radii and histogram resolution of the descriptor."""

    radii: tuple = (0.6, 1.2, 2.4)
    angle_bins: int = 8
    radial_bins: int = 8
    min_neighbors: int = 5
    normal_neighbors: int = 10

    def __post_init__(self):
        if len(self.radii) == 0 or any(r <= 0 for r in self.radii):
            raise ValueError("radii must be positive")
        if tuple(sorted(self.radii)) != tuple(self.radii):
            raise ValueError("radii must be ascending")
        if self.angle_bins < 1 or self.radial_bins < 1:
            raise ValueError("histogram bins must be >= 1")
        if self.min_neighbors < 3:
            raise ValueError("min_neighbors must be >= 3 (covariance rank)")
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))

    @property
    def block_dim(self) -> int:
        return 3 + self.angle_bins + self.radial_bins + 2 + 1

    @property
    def dim(self) -> int:
        return len(self.radii) * self.block_dim

    def spec_hash(self) -> str:
        """Stable digest of every field; guards against mixing descriptors
        computed under different specs."""
        payload = repr((self.radii, self.angle_bins, self.radial_bins,
                        self.min_neighbors, self.normal_neighbors))
        return hashlib.sha1(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class KeypointFeatures:
    """Rows of ``features`` are unit-norm descriptors for ``keypoints``."""

    keypoints: KeypointSet
    features: np.ndarray  # (n, dim) float64
    spec_hash: str

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] != len(self.keypoints):
            raise ValueError("features must be (n_keypoints, dim)")
        object.__setattr__(self, "features", f)

    def __len__(self):
        return len(self.keypoints)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def estimate_vertical_angles(cloud_xyz: np.ndarray, tree: cKDTree,
                             k: int) -> np.ndarray:
    """Angle in [0, pi/2] between each point's surface normal and vertical.

    The normal is the smallest-eigenvalue eigenvector of the k-NN
    covariance; its sign is unobservable, so the angle uses |n_z|. For
    (near-)isotropic neighborhoods the smallest eigenvector is ill-defined,
    which would make the angle depend on the coordinate frame; a tiny
    downward bias on the zz entry breaks the tie deterministically and —
    because ``e_z e_z^T`` commutes with rotations about the vertical — in a
    yaw-invariant way.
    """
    n = cloud_xyz.shape[0]
    k_eff = min(k + 1, n)
    _, idx = tree.query(cloud_xyz, k=k_eff, workers=-1)
    if k_eff == 1:
        idx = idx[:, None]
    neighbors = cloud_xyz[idx]  # (n, k_eff, 3)
    centered = neighbors - neighbors.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k_eff
    cov[:, 2, 2] -= 1e-3 * np.trace(cov, axis1=1, axis2=2)
    # eigh returns ascending eigenvalues; column 0 is the normal direction
    _, vecs = np.linalg.eigh(cov)
    nz = np.abs(vecs[:, 2, 0])
    return np.arccos(np.clip(nz, 0.0, 1.0))


def _segment_histogram(owner: np.ndarray, values: np.ndarray, n_owners: int,
                       n_bins: int, upper: float) -> np.ndarray:
    """Per-owner histogram of ``values`` over [0, upper], right edge folded
    into the last bin. One bincount over combined (owner, bin) keys."""
    bins = np.minimum((values * (n_bins / upper)).astype(np.int64), n_bins - 1)
    flat = np.bincount(owner * n_bins + bins, minlength=n_owners * n_bins)
    return flat.reshape(n_owners, n_bins).astype(np.float64)


def extract_features(cloud: PointCloud, keypoints: KeypointSet,
                     spec: FeatureSpec = FeatureSpec(),
                     workers: int = -1) -> KeypointFeatures:
    """Describe each keypoint by multi-radius neighborhood statistics.

    Neighbor lookups are exact (k-d tree); the keypoint itself is excluded
    from its neighborhood. Radii with fewer than ``spec.min_neighbors``
    neighbors contribute zero histograms (the density channel still counts
    what is there). All per-keypoint statistics are accumulated with
    segment-wise bincounts over one flattened neighbor table, so results do
    not depend on evaluation order or ``workers``.
    """
    if len(cloud) == 0:
        raise ValueError("cannot extract features from an empty cloud")
    xyz = cloud.xyz
    tree = cKDTree(xyz)
    angles = estimate_vertical_angles(xyz, tree, spec.normal_neighbors)

    n_kp = len(keypoints)
    out = np.zeros((n_kp, spec.dim))
    if n_kp == 0:
        return KeypointFeatures(keypoints, out, spec.spec_hash())
    max_r = spec.radii[-1]
    # one query at the widest radius; narrower radii filter by distance
    all_neigh = tree.query_ball_point(keypoints.coordinates, max_r,
                                      workers=workers)
    lengths = np.fromiter((len(nb) for nb in all_neigh), dtype=np.int64,
                          count=n_kp)
    total = int(lengths.sum())
    flat = np.fromiter(itertools.chain.from_iterable(all_neigh),
                       dtype=np.int64, count=total)
    owner = np.repeat(np.arange(n_kp), lengths)
    keep = flat != keypoints.indices[owner]  # a keypoint is not its own neighbor
    flat, owner = flat[keep], owner[keep]
    offsets = xyz[flat] - keypoints.coordinates[owner]
    dists = np.linalg.norm(offsets, axis=1)
    neigh_angles = angles[flat]

    for b, radius in enumerate(spec.radii):
        if radius < max_r:
            inside = dists <= radius
            own = owner[inside]
            off = offsets[inside]
            d_r = dists[inside]
            ang = neigh_angles[inside]
        else:
            own, off, d_r, ang = owner, offsets, dists, neigh_angles
        count = np.bincount(own, minlength=n_kp).astype(np.float64)
        block = np.zeros((n_kp, spec.block_dim))
        block[:, -1] = count / (count + _DENSITY_SCALE)
        ok = count >= spec.min_neighbors
        if np.any(ok):
            safe = np.maximum(count, 1.0)
            first = np.stack([np.bincount(own, weights=off[:, a],
                                          minlength=n_kp) for a in range(3)],
                             axis=1)
            mean = first / safe[:, None]
            second = np.empty((n_kp, 3, 3))
            for a in range(3):
                for c in range(a, 3):
                    m = np.bincount(own, weights=off[:, a] * off[:, c],
                                    minlength=n_kp) / safe
                    second[:, a, c] = m
                    second[:, c, a] = m
            cov = second - mean[:, :, None] * mean[:, None, :]
            cov[~ok] = np.eye(3)  # placeholder; rows masked out below
            eigvals = np.linalg.eigvalsh(cov)[:, ::-1]  # descending
            spread = eigvals.sum(axis=1)
            ratios = np.clip(eigvals, 0.0, None)
            ratios /= np.where(spread > 0, spread, 1.0)[:, None]
            ratios[spread <= 0] = 0.0
            block[:, 0:3] = np.where(ok[:, None], ratios, 0.0)

            ah = _segment_histogram(own, ang, n_kp, spec.angle_bins,
                                    np.pi / 2.0)
            block[:, 3:3 + spec.angle_bins] = np.where(
                ok[:, None], ah / safe[:, None], 0.0)
            rh = _segment_histogram(own, d_r, n_kp, spec.radial_bins, radius)
            o = 3 + spec.angle_bins
            block[:, o:o + spec.radial_bins] = np.where(
                ok[:, None], rh / safe[:, None], 0.0)

            dz_mean = np.bincount(own, weights=off[:, 2],
                                  minlength=n_kp) / safe
            dz_sq = np.bincount(own, weights=off[:, 2] ** 2,
                                minlength=n_kp) / safe
            dz_std = np.sqrt(np.clip(dz_sq - dz_mean ** 2, 0.0, None))
            block[:, o + spec.radial_bins] = np.where(ok, dz_mean / radius, 0.0)
            block[:, o + spec.radial_bins + 1] = np.where(
                ok, dz_std / radius, 0.0)
        out[:, b * spec.block_dim:(b + 1) * spec.block_dim] = block

    norms = np.linalg.norm(out, axis=1)
    empty = norms < 1e-12
    out[empty] = 1.0 / np.sqrt(spec.dim)  # designated "no neighborhood" vector
    norms[empty] = 1.0
    out /= norms[:, None]
    return KeypointFeatures(keypoints, out, spec.spec_hash())


def cost_matrix(source: KeypointFeatures, target: KeypointFeatures) -> np.ndarray:
    """Cosine matching cost ``C[i, j] = 1 - f_i . g_j`` in [0, 2].

    Descriptors must come from the same feature spec; comparing across
    specs (different radii or binning) is meaningless and raises.
    """
    if source.spec_hash != target.spec_hash:
        raise ValueError(
            f"feature spec mismatch: {source.spec_hash} vs {target.spec_hash}"
        )
    if source.dim != target.dim:
        raise ValueError(
            f"descriptor dimension mismatch: {source.dim} vs {target.dim}"
        )
    c = 1.0 - source.features @ target.features.T
    return np.clip(c, 0.0, 2.0)
