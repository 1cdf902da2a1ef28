"""Point-budget reduction: voxel-grid downsampling and farthest point sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import PointCloud


@dataclass(frozen=True)
class VoxelGridSpec:
    """Axis-aligned voxel grid with a crop box.

    Points outside ``[min_bound, max_bound]`` are dropped before bucketing.
    Defaults match common automotive LiDAR preprocessing: +/-70.4 m in x/y
    and [-1, 3] m in z at 0.1 m resolution.
    """

    voxel_size: float = 0.1
    min_bound: tuple = (-70.4, -70.4, -1.0)
    max_bound: tuple = (70.4, 70.4, 3.0)

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        lo, hi = np.asarray(self.min_bound), np.asarray(self.max_bound)
        if not (lo < hi).all():
            raise ValueError("min_bound must be strictly below max_bound")


def voxel_downsample(cloud: PointCloud, spec: VoxelGridSpec = VoxelGridSpec()) -> PointCloud:
    """Replace each occupied voxel by the centroid of its points.

    Intensity is averaged alongside the coordinates. The output is ordered
    by ascending voxel index with z as the most significant key, then y,
    then x, which makes the result independent of input point order. An
    empty crop yields an empty cloud (callers decide whether that is fatal).
    """
    lo = np.asarray(spec.min_bound, dtype=np.float64)
    hi = np.asarray(spec.max_bound, dtype=np.float64)
    xyz = cloud.xyz
    inside = np.all((xyz >= lo) & (xyz <= hi), axis=1)
    xyz = xyz[inside]
    intensity = cloud.intensity[inside]
    if xyz.shape[0] == 0:
        return PointCloud(np.empty((0, 3)), np.empty(0), cloud.frame_id)

    idx3 = np.floor((xyz - lo) / spec.voxel_size).astype(np.int64)
    # points exactly on the upper face belong to the last voxel
    dims = np.ceil((hi - lo) / spec.voxel_size).astype(np.int64)
    idx3 = np.minimum(idx3, dims - 1)
    linear = (idx3[:, 2] * dims[1] + idx3[:, 1]) * dims[0] + idx3[:, 0]

    order = np.argsort(linear, kind="stable")
    linear = linear[order]
    xyz = xyz[order]
    intensity = intensity[order]
    uniq, start, counts = np.unique(linear, return_index=True, return_counts=True)
    sums = np.add.reduceat(xyz, start, axis=0)
    isum = np.add.reduceat(intensity, start)
    out_xyz = sums / counts[:, None]
    out_int = isum / counts
    return PointCloud(out_xyz, out_int, cloud.frame_id)


@dataclass(frozen=True)
class KeypointSet:
    """Indices into the cloud the keypoints were sampled from, plus coordinates."""

    indices: np.ndarray       # (n,) int64
    coordinates: np.ndarray   # (n, 3) float64

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        xyz = np.asarray(self.coordinates, dtype=np.float64)
        if idx.ndim != 1 or xyz.shape != (len(idx), 3):
            raise ValueError("indices and coordinates disagree in shape")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "coordinates", xyz)

    def __len__(self):
        return len(self.indices)


def farthest_point_sampling(cloud: PointCloud, n: int,
                            seed_index: int = 0) -> KeypointSet:
    """Greedy max-min sampling of ``n`` points.

    Starting from ``seed_index``, each step adds the point with the largest
    distance to the already-selected set; distance ties are broken toward
    the lowest index, so the result is fully deterministic. If ``n`` meets
    or exceeds the cloud size, all indices are returned in original order.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if len(cloud) == 0:
        raise ValueError("cannot sample from an empty cloud")
    if not 0 <= seed_index < len(cloud):
        raise ValueError(f"seed_index {seed_index} out of range")
    xyz = cloud.xyz
    if n >= len(cloud):
        idx = np.arange(len(cloud), dtype=np.int64)
        return KeypointSet(idx, xyz.copy())

    selected = np.empty(n, dtype=np.int64)
    selected[0] = seed_index
    # squared distances: same argmax/minimum ordering, no per-step sqrt
    diff = xyz - xyz[seed_index]
    dist_sq = np.einsum("ij,ij->i", diff, diff)
    for k in range(1, n):
        nxt = int(np.argmax(dist_sq))  # first (lowest) index wins ties
        selected[k] = nxt
        diff = xyz - xyz[nxt]
        np.minimum(dist_sq, np.einsum("ij,ij->i", diff, diff), out=dist_sq)
    return KeypointSet(selected, xyz[selected])
