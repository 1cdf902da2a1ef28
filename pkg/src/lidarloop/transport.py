"""Unbalanced optimal transport matching and the differentiable pose head.

Given a cost matrix :math:`C` between two keypoint feature sets, a few
Sinkhorn iterations produce a soft correspondence plan

.. math::

    T = \\operatorname{diag}(u)\\, K \\operatorname{diag}(v), \\qquad
    K = e^{-C/\\lambda},

with the unbalanced update :math:`u \\leftarrow (a \\oslash Kv)^{\\rho/(\\rho+\\lambda)}`
(and symmetrically for ``v``), where :math:`a, b` are uniform marginals.
The marginal-relaxation weight ``rho`` lets mass vanish on keypoints that
have no counterpart — occlusions, dropout — instead of forcing a match.

The plan is turned into a pose by projecting each source keypoint onto the
plan-weighted barycenter of the target keypoints and solving a weighted
Procrustes problem in closed form (SVD), with transported row masses as
weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .geom import Pose

# Beyond this value of min(C)/lambda the plain kernel exp(-C/lambda)
# underflows badly enough that whole rows of K@v can vanish; switch to the
# log-domain evaluation instead.
_LOG_DOMAIN_THRESHOLD = 30.0


class TransportComputationError(ValueError):
    """Sinkhorn produced non-finite values (kernel under/overflow)."""


class NoCorrespondencesError(ValueError):
    """Every transport row fell below the mass floor."""


class DegenerateGeometryError(ValueError):
    """Weighted SVD cannot recover a unique rotation (e.g. collinear points)."""


@dataclass(frozen=True)
class UotParams:
    """Entropic regularization ``lam``, marginal relaxation ``rho``, iteration
    count. Smaller ``lam`` sharpens plans toward hard assignments; smaller
    ``rho`` lets badly-matched points shed mass instead of forcing a match.
    Registration-oriented settings found by grid search live in the pipeline
    configuration (see scripts/uot_grid_search.py)."""

    lam: float = 0.03
    rho: float = 1.0
    iterations: int = 5

    def __post_init__(self):
        if self.lam <= 0 or self.rho <= 0:
            raise ValueError("lam and rho must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class TransportPlan:
    """A (N_source, N_target) non-negative plan plus its row masses."""

    matrix: np.ndarray
    row_mass: np.ndarray
    params: UotParams

    @property
    def shape(self):
        return self.matrix.shape


def _check_cost(cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] == 0 or cost.shape[1] == 0:
        raise ValueError(f"cost must be a non-empty 2-D matrix, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    return cost


def _sinkhorn_direct(cost, a, b, params: UotParams):
    k = np.exp(-cost / params.lam)
    exponent = params.rho / (params.rho + params.lam)
    v = b.copy()
    u = np.ones_like(a)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for _ in range(params.iterations):
            u = (a / (k @ v)) ** exponent
            v = (b / (k.T @ u)) ** exponent
        t = u[:, None] * k * v[None, :]
    return t


def _sinkhorn_log(cost, a, b, params: UotParams):
    log_k = -cost / params.lam
    exponent = params.rho / (params.rho + params.lam)
    log_a, log_b = np.log(a), np.log(b)
    log_v = log_b.copy()
    for _ in range(params.iterations):
        log_u = exponent * (log_a - logsumexp(log_k + log_v[None, :], axis=1))
        log_v = exponent * (log_b - logsumexp(log_k + log_u[:, None], axis=0))
    return np.exp(log_u[:, None] + log_k + log_v[None, :])


def sinkhorn_uot(cost, params: UotParams = UotParams()) -> TransportPlan:
    """Run the fixed-iteration unbalanced Sinkhorn scaling loop.

    Marginals are uniform: ``a = 1/N_source``, ``b = 1/N_target``. When the
    kernel would underflow (``min(C)/lam > 30``) the same recursion is
    evaluated in the log domain; the two paths agree to high precision
    wherever both are stable. Non-finite output raises
    ``TransportComputationError`` naming ``lam``, the usual culprit.
    """
    cost = _check_cost(cost)
    n_src, n_tgt = cost.shape
    a = np.full(n_src, 1.0 / n_src)
    b = np.full(n_tgt, 1.0 / n_tgt)
    if cost.min() / params.lam > _LOG_DOMAIN_THRESHOLD:
        t = _sinkhorn_log(cost, a, b, params)
    else:
        t = _sinkhorn_direct(cost, a, b, params)
    if not np.isfinite(t).all():
        raise TransportComputationError(
            f"transport plan is not finite; lam={params.lam} is likely too "
            f"small for this cost range (max cost {cost.max():.3g})"
        )
    return TransportPlan(t, t.sum(axis=1), params)


@dataclass(frozen=True)
class SoftCorrespondences:
    """Per-source-keypoint matched coordinates, weights, and validity."""

    projected: np.ndarray   # (N_source, 3); rows under the floor are zeros
    weights: np.ndarray     # (N_source,) transported row masses
    valid: np.ndarray       # (N_source,) bool


def project_soft(plan: TransportPlan, target_points: np.ndarray,
                 mass_floor_scale: float = 1e-9) -> SoftCorrespondences:
    """Barycentric projection of each source keypoint onto the target set.

    Row j maps to ``sum_k T[j, k] * s_k / sum_k T[j, k]``. Rows whose mass
    falls below ``mass_floor_scale * max(row_mass)`` are marked invalid —
    with unbalanced transport those are keypoints the plan chose to leave
    unmatched. All rows invalid raises ``NoCorrespondencesError``.
    """
    target_points = np.asarray(target_points, dtype=np.float64)
    if target_points.shape != (plan.shape[1], 3):
        raise ValueError(
            f"target points {target_points.shape} do not match plan "
            f"width {plan.shape[1]}"
        )
    mass = plan.row_mass
    floor = mass_floor_scale * mass.max()
    valid = mass > floor
    if not valid.any():
        raise NoCorrespondencesError(
            "no transport row carries usable mass; the clouds may share no "
            "structure at all"
        )
    projected = np.zeros((plan.shape[0], 3))
    projected[valid] = (plan.matrix[valid] @ target_points) / mass[valid, None]
    return SoftCorrespondences(projected, mass.copy(), valid)


def weighted_svd(source_points, target_points, weights) -> Pose:
    """Closed-form weighted rigid alignment (Kabsch with a det correction).

    Minimizes ``sum_j w_j || R p_j + t - s_j ||^2``: subtract the weighted
    centroids, build the 3x3 cross-covariance ``H = sum_j w_j p~_j s~_j^T``,
    take ``H = U S V^T`` and form ``R = V diag(1, 1, det(V U^T)) U^T``,
    ``t = s_bar - R p_bar``. Needs at least three points of positive weight
    in general position; collinear support raises
    ``DegenerateGeometryError``.
    """
    p = np.asarray(source_points, dtype=np.float64)
    s = np.asarray(target_points, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if p.shape != s.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError("source/target must both be (N, 3)")
    if w.shape != (p.shape[0],):
        raise ValueError("weights must be (N,)")
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    if np.count_nonzero(w > 0) < 3:
        raise DegenerateGeometryError(
            "need at least 3 points with positive weight"
        )
    wsum = w.sum()
    p_bar = (w @ p) / wsum
    s_bar = (w @ s) / wsum
    pc = p - p_bar
    sc = s - s_bar
    h = (pc * w[:, None]).T @ sc
    u, sing, vt = np.linalg.svd(h)
    if sing[1] <= 1e-12 * max(sing[0], 1e-300):
        raise DegenerateGeometryError(
            "weighted point sets are (near-)collinear; rotation is not unique"
        )
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(r, s_bar - r @ p_bar)


def estimate_pose_from_cost(cost, source_points, target_points,
                            params: UotParams = UotParams(),
                            mass_floor_scale: float = 1e-9):
    """Cost matrix -> plan -> soft projection -> weighted SVD.

    Returns ``(pose, plan)``. SVD weights are the transported row masses of
    the valid rows, so confidently matched keypoints dominate the fit.
    """
    plan = sinkhorn_uot(cost, params)
    corr = project_soft(plan, target_points, mass_floor_scale)
    source_points = np.asarray(source_points, dtype=np.float64)
    if source_points.shape != (plan.shape[0], 3):
        raise ValueError("source points do not match plan height")
    v = corr.valid
    pose = weighted_svd(source_points[v], corr.projected[v], corr.weights[v])
    return pose, plan


def estimate_pose_uot(source_features, target_features,
                      params: UotParams = UotParams(),
                      mass_floor_scale: float = 1e-9):
    """Full UOT pose head on two feature sets (see features.cost_matrix)."""
    from .features import cost_matrix  # local import avoids a cycle

    cost = cost_matrix(source_features, target_features)
    return estimate_pose_from_cost(
        cost, source_features.keypoints.coordinates,
        target_features.keypoints.coordinates, params, mass_floor_scale,
    )


def write_plan(path, plan: TransportPlan) -> None:
    """Dump a plan as text: one header line (rows cols lam rho iterations),
    then one row of the matrix per line."""
    with open(path, "w") as fh:
        fh.write(f"{plan.shape[0]} {plan.shape[1]} "
                 f"{plan.params.lam:.17g} {plan.params.rho:.17g} "
                 f"{plan.params.iterations}\n")
        for row in plan.matrix:
            fh.write(" ".join(format(v, ".17g") for v in row) + "\n")


def read_plan(path) -> TransportPlan:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 5:
            raise ValueError(f"{path}: bad plan header")
        rows, cols = int(header[0]), int(header[1])
        params = UotParams(float(header[2]), float(header[3]), int(header[4]))
        matrix = np.loadtxt(fh, ndmin=2)
    if matrix.shape != (rows, cols):
        raise ValueError(f"{path}: header says {(rows, cols)}, data is {matrix.shape}")
    return TransportPlan(matrix, matrix.sum(axis=1), params)
