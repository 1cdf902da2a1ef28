"""Robust pose estimation from feature correspondences.

Two inference-time paths on top of the matching features:

* :func:`ransac_register` — mutual-nearest-neighbor matches fed to a
  vectorized RANSAC with a final refit on the consensus set, and
* :func:`icp` — classic iterative closest point (point-to-point or
  point-to-plane) used to refine an initial guess.

Both are pure given their inputs and seed, so they can run in parallel
across scan pairs without shared state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .features import KeypointFeatures
from .geom import Pose, PointCloud, compose, rotation_angle_deg, transform_points

_RANSAC_CHUNK = 256  # candidate models scored per inlier-count batch


class InsufficientMatchesError(ValueError):
    """Fewer correspondences than the minimal sample needs."""


@dataclass(frozen=True)
class RansacParams:
    """Sampling budget and consensus rules for :func:`ransac_register`."""

    max_iterations: int = 5000
    inlier_threshold: float = 0.6
    sample_size: int = 3
    min_inlier_fraction: float = 0.05
    mutual_check: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be > 0")
        if self.sample_size < 3:
            raise ValueError("sample_size must be >= 3 (rigid fit rank)")
        if not 0 < self.min_inlier_fraction <= 1:
            raise ValueError("min_inlier_fraction must be in (0, 1]")


@dataclass(frozen=True)
class IcpParams:
    """Variant and stopping rules for :func:`icp`.

    ``convergence_epsilon`` bounds the pose delta between iterations,
    measured as translation change (m) plus rotation change (rad).
    """

    variant: str = "point_to_point"
    max_iterations: int = 30
    correspondence_distance: float = 1.0
    convergence_epsilon: float = 1e-6
    normal_neighbors: int = 10

    def __post_init__(self):
        if self.variant not in ("point_to_point", "point_to_plane"):
            raise ValueError(
                f"unknown ICP variant {self.variant!r}; expected "
                "'point_to_point' or 'point_to_plane'")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.correspondence_distance <= 0:
            raise ValueError("correspondence_distance must be > 0")
        if self.convergence_epsilon <= 0:
            raise ValueError("convergence_epsilon must be > 0")
        if self.normal_neighbors < 3:
            raise ValueError("normal_neighbors must be >= 3")


@dataclass(frozen=True)
class RegistrationResult:
    """Estimated pose plus quality diagnostics.

    ``fitness`` is the consensus fraction (RANSAC: inliers over matches;
    ICP: source points with a correspondence at the final pose) and
    ``error_history`` records the mean squared correspondence distance at
    each ICP pairing (empty for RANSAC).
    """

    pose: Pose
    fitness: float
    inlier_rmse: float
    iterations_used: int
    converged: bool
    error_history: tuple = field(default=())

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ValueError(f"fitness must be in [0, 1], got {self.fitness}")
        if self.inlier_rmse < 0:
            raise ValueError("inlier_rmse must be >= 0")


def match_features(a: KeypointFeatures, b: KeypointFeatures,
                   mutual: bool = True):
    """Nearest-neighbor correspondences by cosine cost.

    Returns ``[(i, j, cost), ...]`` sorted by cost ascending (stable, so
    ties keep source order). With ``mutual`` only pairs that are each
    other's nearest neighbor survive — the usual cheap outlier filter.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("cannot match empty feature sets")
    if a.dim != b.dim:
        raise ValueError(f"descriptor dimension mismatch: {a.dim} vs {b.dim}")
    cost = 1.0 - a.features @ b.features.T
    nearest_col = np.argmin(cost, axis=1)
    rows = np.arange(len(a))
    if mutual:
        nearest_row = np.argmin(cost, axis=0)
        keep = nearest_row[nearest_col] == rows
        rows = rows[keep]
    cols = nearest_col[rows]
    costs = cost[rows, cols]
    order = np.argsort(costs, kind="stable")
    return [(int(rows[k]), int(cols[k]), float(costs[k])) for k in order]


def _kabsch_batch(p: np.ndarray, q: np.ndarray):
    """Rigid fits for a batch of correspondence sets.

    ``p``, ``q`` are (B, k, 3); returns rotations (B, 3, 3) and
    translations (B, 3) minimizing unweighted squared error per batch row.
    Degenerate samples still yield proper rotations (det +1); their poor
    fit is handled by consensus scoring, as in classic RANSAC.
    """
    p_mean = p.mean(axis=1, keepdims=True)
    q_mean = q.mean(axis=1, keepdims=True)
    h = np.einsum("bki,bkj->bij", p - p_mean, q - q_mean)
    u, _, vt = np.linalg.svd(h)
    v = vt.transpose(0, 2, 1)
    det = np.linalg.det(v @ u.transpose(0, 2, 1))
    v_fixed = v.copy()
    v_fixed[:, :, 2] *= det[:, None]
    rot = v_fixed @ u.transpose(0, 2, 1)
    trans = q_mean[:, 0, :] - np.einsum("bij,bj->bi", rot, p_mean[:, 0, :])
    return rot, trans


def _count_inliers(rot, trans, src, tgt, threshold):
    """Inlier counts for candidate models, chunked to bound memory."""
    n_models = rot.shape[0]
    counts = np.empty(n_models, dtype=np.int64)
    thr_sq = threshold * threshold
    for lo in range(0, n_models, _RANSAC_CHUNK):
        hi = min(lo + _RANSAC_CHUNK, n_models)
        moved = np.einsum("bij,mj->bmi", rot[lo:hi], src) + trans[lo:hi, None, :]
        d_sq = ((moved - tgt) ** 2).sum(axis=2)
        counts[lo:hi] = (d_sq < thr_sq).sum(axis=1)
    return counts


def ransac_register(source: KeypointFeatures, target: KeypointFeatures,
                    params: RansacParams = RansacParams(),
                    seed: int = 0) -> RegistrationResult:
    """Feature matching plus RANSAC with a consensus refit.

    All candidate models are sampled up front from ``default_rng(seed)``
    and scored in batches, so the result is bit-deterministic for a given
    seed. The refit pose is kept only if it preserves at least the best
    sampled model's inlier count; ``converged`` reports whether that count
    reaches ``min_inlier_fraction`` of the matches.
    """
    matches = match_features(source, target, params.mutual_check)
    n_matches = len(matches)
    if n_matches < params.sample_size:
        raise InsufficientMatchesError(
            f"need at least {params.sample_size} matches, got {n_matches}")
    idx_s = np.array([m[0] for m in matches], dtype=np.int64)
    idx_t = np.array([m[1] for m in matches], dtype=np.int64)
    src = source.keypoints.coordinates[idx_s]
    tgt = target.keypoints.coordinates[idx_t]

    rng = np.random.default_rng(seed)
    samples = rng.integers(0, n_matches, (params.max_iterations,
                                          params.sample_size))
    rot, trans = _kabsch_batch(src[samples], tgt[samples])
    counts = _count_inliers(rot, trans, src, tgt, params.inlier_threshold)
    best = int(np.argmax(counts))  # first maximum: deterministic tie-break
    best_count = int(counts[best])
    pose = Pose(rot[best], trans[best])

    thr_sq = params.inlier_threshold ** 2
    d_sq = ((transform_points(pose, src) - tgt) ** 2).sum(axis=1)
    inliers = d_sq < thr_sq
    if inliers.sum() >= params.sample_size:
        refit_r, refit_t = _kabsch_batch(src[inliers][None], tgt[inliers][None])
        refit = Pose(refit_r[0], refit_t[0])
        refit_d_sq = ((transform_points(refit, src) - tgt) ** 2).sum(axis=1)
        if int((refit_d_sq < thr_sq).sum()) >= best_count:
            pose, d_sq = refit, refit_d_sq
            inliers = d_sq < thr_sq

    final_count = int(inliers.sum())
    fitness = final_count / n_matches
    rmse = math.sqrt(float(d_sq[inliers].mean())) if final_count else 0.0
    return RegistrationResult(
        pose=pose,
        fitness=fitness,
        inlier_rmse=rmse,
        iterations_used=params.max_iterations,
        converged=fitness >= params.min_inlier_fraction,
    )


def _surface_normals(xyz: np.ndarray, tree: cKDTree, k: int) -> np.ndarray:
    """Unit normals from k-NN covariance, oriented toward the origin."""
    k_eff = min(k + 1, xyz.shape[0])
    _, idx = tree.query(xyz, k=k_eff, workers=-1)
    if k_eff == 1:
        idx = idx[:, None]
    neighbors = xyz[idx]
    centered = neighbors - neighbors.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    flip = np.einsum("ni,ni->n", normals, xyz) > 0
    normals[flip] = -normals[flip]
    return normals


def _solve_point_to_plane(moved, tgt, normals):
    """One linearized point-to-plane step: small rotation + translation."""
    residual = np.einsum("ni,ni->n", tgt - moved, normals)
    a = np.hstack([np.cross(moved, normals), normals])
    x, *_ = np.linalg.lstsq(a, residual, rcond=None)
    omega, t_delta = x[:3], x[3:]
    angle = np.linalg.norm(omega)
    if angle < 1e-12:
        r_delta = np.eye(3)
    else:
        k = omega / angle
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        r_delta = np.eye(3) + math.sin(angle) * kx \
            + (1 - math.cos(angle)) * (kx @ kx)
    return Pose(r_delta, t_delta)


def icp(source: PointCloud, target: PointCloud, initial: Pose,
        params: IcpParams = IcpParams()) -> RegistrationResult:
    """Iterative closest point refinement of ``initial``.

    Each iteration pairs every transformed source point with its nearest
    target point within ``correspondence_distance``, then minimizes either
    the point-to-point squared error (closed form) or the linearized
    point-to-plane error (normals from ``normal_neighbors``-NN covariance,
    oriented toward the sensor origin). Stops when the pose stops moving
    or the iteration budget runs out; an iteration with no pairs at all
    aborts with ``converged=False`` at the last good pose.
    """
    if len(source) < 10 or len(target) < 10:
        raise ValueError("ICP needs at least 10 points per cloud")
    src = source.xyz
    tgt = target.xyz
    tree = cKDTree(tgt)
    normals = (_surface_normals(tgt, tree, params.normal_neighbors)
               if params.variant == "point_to_plane" else None)

    pose = initial
    history = []
    converged = False
    iterations = 0
    for _ in range(params.max_iterations):
        moved = transform_points(pose, src)
        dist, nearest = tree.query(
            moved, k=1, distance_upper_bound=params.correspondence_distance,
            workers=-1)
        paired = np.isfinite(dist)
        if not paired.any():
            history.append(math.inf)
            return RegistrationResult(pose, 0.0, math.inf, iterations, False,
                                      tuple(history))
        history.append(float((dist[paired] ** 2).mean()))
        p_src = src[paired]
        p_tgt = tgt[nearest[paired]]
        iterations += 1
        if params.variant == "point_to_point":
            rot, trans = _kabsch_batch(p_src[None], p_tgt[None])
            new_pose = Pose(rot[0], trans[0])
        else:
            delta = _solve_point_to_plane(moved[paired], p_tgt,
                                          normals[nearest[paired]])
            new_pose = compose(delta, pose)
        step = (np.linalg.norm(new_pose.translation - pose.translation)
                + math.radians(rotation_angle_deg(
                    new_pose.rotation @ pose.rotation.T)))
        pose = new_pose
        if step < params.convergence_epsilon:
            converged = True
            break

    moved = transform_points(pose, src)
    dist, _ = tree.query(moved, k=1,
                         distance_upper_bound=params.correspondence_distance,
                         workers=-1)
    paired = np.isfinite(dist)
    n_paired = int(paired.sum())
    history.append(float((dist[paired] ** 2).mean()) if n_paired else math.inf)
    fitness = n_paired / len(src)
    rmse = math.sqrt(float((dist[paired] ** 2).mean())) if n_paired else math.inf
    return RegistrationResult(pose, fitness, rmse, iterations, converged,
                              tuple(history))


def success_check(err, max_translation: float = 2.0,
                  max_rotation_deg: float = 5.0) -> bool:
    """Registration counts as successful strictly below both error bounds."""
    return (err.translation_error < max_translation
            and err.rotation_error < max_rotation_deg)
