"""Rigid-body geometry: point clouds, SE(3) poses, and pose-error metrics.

Conventions used throughout the package:

* point clouds are row-major ``(N, 3)`` float64 arrays in meters,
* a pose maps points from its own frame into the reference frame via
  ``R @ p + t``,
* rotation error between two poses is the geodesic angle on SO(3),
  reported in degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

# Orthonormality drift tolerated before a rotation matrix is rejected /
# re-projected.
ORTHONORMALITY_TOL = 1e-9


class Point(NamedTuple):
    """A single LiDAR return: position in meters plus unitless reflectance."""

    x: float
    y: float
    z: float
    intensity: float = 0.0


def _as_readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PointCloud:
    """An unordered set of points, immutable after construction.

    ``xyz`` is ``(N, 3)`` float64, ``intensity`` is ``(N,)`` float64 with the
    convention of values in [0, 1]. ``frame_id`` is free-form plumbing for
    callers that want to track which scan a cloud came from.
    """

    xyz: np.ndarray
    intensity: np.ndarray = field(default=None)  # type: ignore[assignment]
    frame_id: str = ""

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (N, 3), got {xyz.shape}")
        if not np.isfinite(xyz).all():
            bad = int(np.flatnonzero(~np.isfinite(xyz).all(axis=1))[0])
            raise ValueError(f"non-finite coordinates at point index {bad}")
        if self.intensity is None:
            intensity = np.zeros(len(xyz))
        else:
            intensity = np.asarray(self.intensity, dtype=np.float64)
        if intensity.shape != (len(xyz),):
            raise ValueError(
                f"intensity must be ({len(xyz)},), got {intensity.shape}"
            )
        if not np.isfinite(intensity).all():
            bad = int(np.flatnonzero(~np.isfinite(intensity))[0])
            raise ValueError(f"non-finite intensity at point index {bad}")
        object.__setattr__(self, "xyz", _as_readonly(xyz))
        object.__setattr__(self, "intensity", _as_readonly(intensity))

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def point(self, i: int) -> Point:
        x, y, z = self.xyz[i]
        return Point(float(x), float(y), float(z), float(self.intensity[i]))


def _project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) with det +1."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


@dataclass(frozen=True)
class Pose:
    """SE(3) rigid transform: ``rotation`` (3, 3) and ``translation`` (3,).

    Construction validates orthonormality (``R^T R = I`` within 1e-9) and
    ``det R = +1``; invalid matrices raise ``ValueError``.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be (3, 3), got {r.shape}")
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("pose contains non-finite values")
        drift = np.abs(r.T @ r - np.eye(3)).max()
        if drift > ORTHONORMALITY_TOL:
            raise ValueError(
                f"rotation is not orthonormal (max |R^T R - I| = {drift:.3e})"
            )
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMALITY_TOL:
            raise ValueError("rotation determinant is not +1 (reflection?)")
        object.__setattr__(self, "rotation", _as_readonly(r))
        object.__setattr__(self, "translation", _as_readonly(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        """Build from a 3x4 or 4x4 homogeneous matrix."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape not in ((3, 4), (4, 4)):
            raise ValueError(f"expected (3, 4) or (4, 4) matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rpy(cls, roll: float, pitch: float, yaw: float,
                 translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Euler ZYX convention, angles in radians: R = Rz(yaw) Ry(pitch) Rx(roll)."""
        cr, sr = math.cos(roll), math.sin(roll)
        cp, sp = math.cos(pitch), math.sin(pitch)
        cy, sy = math.cos(yaw), math.sin(yaw)
        rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
        ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
        rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
        return cls(rz @ ry @ rx, np.asarray(translation, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def kitti_row(self) -> np.ndarray:
        """Row-major flattening of the 3x4 [R | t] block (12 values)."""
        return np.hstack([self.rotation, self.translation[:, None]]).ravel()

    def yaw(self) -> float:
        """Heading about +z in radians, atan2 convention."""
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])


@dataclass(frozen=True)
class PoseError:
    """Translation error in meters, rotation error in degrees (geodesic)."""

    translation_error: float
    rotation_error: float

    def __post_init__(self):
        if self.translation_error < 0:
            raise ValueError("translation error must be >= 0")
        if not 0.0 <= self.rotation_error <= 180.0:
            raise ValueError("rotation error must be in [0, 180] degrees")


def apply_pose(pose: Pose, cloud: PointCloud) -> PointCloud:
    """Transform every point: p -> R p + t. Intensity and order preserved."""
    xyz = cloud.xyz @ pose.rotation.T + pose.translation
    return PointCloud(xyz, cloud.intensity, cloud.frame_id)


def transform_points(pose: Pose, pts: np.ndarray) -> np.ndarray:
    """`apply_pose` for a bare (N, 3) array."""
    return np.asarray(pts, dtype=np.float64) @ pose.rotation.T + pose.translation


def compose(a: Pose, b: Pose) -> Pose:
    """Composition (a * b): apply ``b`` first, then ``a``.

    Long chains accumulate float drift; if the product rotation exceeds the
    orthonormality tolerance it is re-projected onto SO(3) before the Pose
    constructor sees it.
    """
    r = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    if np.abs(r.T @ r - np.eye(3)).max() > ORTHONORMALITY_TOL:
        r = _project_to_rotation(r)
    return Pose(r, t)


def inverse(pose: Pose) -> Pose:
    r = pose.rotation.T
    return Pose(r, -r @ pose.translation)


def rotation_angle_deg(r: np.ndarray) -> float:
    """Geodesic distance of a rotation matrix from the identity, degrees.

    Mathematically this is arccos((trace(R) - 1) / 2) with the argument
    clamped to [-1, 1]; it is evaluated as atan2(|skew(R)|_F / sqrt(2),
    (trace(R) - 1) / 2), the same angle but well-conditioned near 0 where
    the arccos form loses half the significant digits.
    """
    c = min(1.0, max(-1.0, (np.trace(r) - 1.0) / 2.0))
    s = np.linalg.norm(r - r.T) / (2.0 * math.sqrt(2.0))
    return math.degrees(math.atan2(s, c))


def pose_error(estimate: Pose, truth: Pose) -> PoseError:
    """Compare two poses.

    Translation error is the Euclidean distance between the two translation
    vectors; rotation error is the geodesic angle of ``R_truth^T R_est``
    (the arccos argument is clamped to [-1, 1] against float drift).
    """
    te = float(np.linalg.norm(estimate.translation - truth.translation))
    re = rotation_angle_deg(truth.rotation.T @ estimate.rotation)
    return PoseError(te, re)


def remove_sector(cloud: PointCloud, center_deg: float, width_deg: float) -> PointCloud:
    """Drop all points whose azimuth falls in a wedge around ``center_deg``.

    Azimuth is atan2(y, x) in degrees. The wedge is the half-open interval
    ``[center - width/2, center + width/2)`` with wrap-around, so tiling a
    full circle with sectors removes each point exactly once. ``width_deg``
    must lie in [0, 360); 0 removes nothing.
    """
    if not 0.0 <= width_deg < 360.0:
        raise ValueError(f"sector width must be in [0, 360), got {width_deg}")
    if len(cloud) == 0 or width_deg == 0.0:
        return cloud
    az = np.degrees(np.arctan2(cloud.xyz[:, 1], cloud.xyz[:, 0]))
    # signed angular difference in [-180, 180)
    diff = (az - center_deg + 180.0) % 360.0 - 180.0
    keep = ~((diff >= -width_deg / 2.0) & (diff < width_deg / 2.0))
    return PointCloud(cloud.xyz[keep], cloud.intensity[keep], cloud.frame_id)
