"""Shared test utilities: random rigid transforms and small brute-force oracles.

Everything here is deliberately naive (no shared code with the package under
test) so it can serve as an independent check.
"""

from __future__ import annotations

import math

import numpy as np

from lidarloop.geom import Pose


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng: np.random.Generator, trans_scale: float = 5.0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-trans_scale, trans_scale, 3))


def rodrigues(axis, angle: float) -> np.ndarray:
    """Rotation matrix from axis-angle, textbook formula."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    k = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def brute_force_radius_neighbors(points: np.ndarray, center: np.ndarray,
                                 radius: float) -> np.ndarray:
    """Indices of all points within ``radius`` of ``center`` (inclusive)."""
    d = np.linalg.norm(points - center, axis=1)
    return np.flatnonzero(d <= radius)
