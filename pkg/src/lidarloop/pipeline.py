"""End-to-end loop closing: descriptor retrieval, gating, pose estimation.

:class:`LoopCloser` consumes scans in trajectory order. Each scan is
downsampled, described, and queried against the database of earlier scans;
a sufficiently similar candidate triggers relative pose estimation
(RANSAC over feature matches by default, the direct transport head with
``method="fast"``) and an ICP consistency gate. The scan's descriptor is
appended to the database afterwards regardless of the outcome, so
detection never influences what later scans can match.

The differentiable loss functions live here too, as offline diagnostics:
they power smoothness checks and give any future training loop a tested
reference implementation.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .descriptor import (
    DescriptorDatabase,
    VladParams,
    descriptor_distance,
    global_descriptor,
)
from .features import FeatureSpec, KeypointFeatures, extract_features
from .geom import PointCloud, Pose, transform_points
from .registration import (
    IcpParams,
    InsufficientMatchesError,
    RansacParams,
    icp,
    ransac_register,
)
from .sampling import VoxelGridSpec, farthest_point_sampling, voxel_downsample
from .transport import (
    DegenerateGeometryError,
    NoCorrespondencesError,
    TransportPlan,
    UotParams,
    estimate_pose_uot,
    project_soft,
)

_REJECT_REASONS = (None, "threshold", "consistency")
_DETECTION_HEADER = ("query_index", "matched_index", "distance", "accepted",
                     "reject_reason", "tx", "ty", "tz", "yaw_deg", "fitness")


@dataclass(frozen=True)
class LcdConfig:
    """Loop-closure gates plus the per-scan processing recipe.

    ``similarity_threshold`` gates on descriptor distance,
    ``icp_fitness_threshold`` on registration consensus; candidates inside
    the last ``exclusion`` scans are never considered. The remaining fields
    configure the per-scan feature/registration machinery and default to
    settings tuned on synthetic scenes (see scripts/uot_grid_search.py).
    """

    similarity_threshold: float = 0.8
    icp_fitness_threshold: float = 0.6
    exclusion: int = 50
    loop_radius: float = 4.0
    method: str = "ransac"
    refine_icp: bool = True
    keyframe_stride: int = 1
    n_keypoints: int = 512
    voxel: VoxelGridSpec = field(default_factory=VoxelGridSpec)
    feature_spec: FeatureSpec = field(
        default_factory=lambda: FeatureSpec(radii=(1.0, 2.0, 4.0)))
    uot: UotParams = field(
        default_factory=lambda: UotParams(lam=0.003, rho=0.1, iterations=10))
    mass_floor_scale: float = 0.5
    ransac: RansacParams = field(default_factory=RansacParams)
    icp: IcpParams = field(default_factory=IcpParams)
    seed: int = 0
    workers: int = -1

    def __post_init__(self):
        if self.similarity_threshold < 0:
            raise ValueError("similarity_threshold must be >= 0")
        if not 0.0 <= self.icp_fitness_threshold <= 1.0:
            raise ValueError("icp_fitness_threshold must be in [0, 1]")
        if self.exclusion < 0:
            raise ValueError("exclusion must be >= 0")
        if self.loop_radius <= 0:
            raise ValueError("loop_radius must be > 0")
        if self.method not in ("ransac", "fast"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.keyframe_stride < 1:
            raise ValueError("keyframe_stride must be >= 1")
        if self.n_keypoints < 1:
            raise ValueError("n_keypoints must be >= 1")


@dataclass(frozen=True)
class LoopDetection:
    """Outcome of querying one scan against the database."""

    query_index: int
    matched_index: int
    descriptor_distance: float
    pose: Pose
    fitness: float
    accepted: bool
    reject_reason: str | None

    def __post_init__(self):
        if self.reject_reason not in _REJECT_REASONS:
            raise ValueError(f"unknown reject_reason {self.reject_reason!r}")
        if self.accepted != (self.reject_reason is None):
            raise ValueError("accepted detections must have no reject_reason")


class LoopCloser:
    """Sequential loop-closure state over one trajectory.

    Keeps the descriptor database plus each processed scan's keypoint
    features and downsampled cloud (needed to register against it later).
    Scans must arrive with strictly increasing indices.
    """

    def __init__(self, vlad_params: VladParams, config: LcdConfig = LcdConfig()):
        self.config = config
        self.vlad_params = vlad_params
        self.database = DescriptorDatabase()
        self._features: dict[int, KeypointFeatures] = {}
        self._clouds: dict[int, PointCloud] = {}
        self._seen = 0
        self.timings: dict[str, list] = {
            "descriptor_extraction": [],
            "pairwise_comparison": [],
            "database_query": [],
            "pose_estimation": [],
        }

    def _describe(self, cloud: PointCloud):
        ds = voxel_downsample(cloud, self.config.voxel)
        kp = farthest_point_sampling(ds, self.config.n_keypoints)
        feats = extract_features(ds, kp, self.config.feature_spec,
                                 workers=self.config.workers)
        return ds, feats, global_descriptor(feats, self.vlad_params)

    def _estimate_pose(self, query: KeypointFeatures, match: KeypointFeatures):
        cfg = self.config
        if cfg.method == "ransac":
            result = ransac_register(query, match, cfg.ransac, seed=cfg.seed)
            return result.pose, result.fitness
        pose, plan = estimate_pose_uot(query, match, cfg.uot,
                                       cfg.mass_floor_scale)
        coverage = float(
            (plan.row_mass
             >= cfg.mass_floor_scale * plan.row_mass.max()).mean())
        return pose, coverage

    def process_scan(self, scan_index: int, cloud: PointCloud):
        """Describe, query, gate; returns a LoopDetection or None.

        None means no eligible candidate existed (empty window or skipped
        keyframe); gate rejections come back as unaccepted detections.
        """
        cfg = self.config
        self._seen += 1
        if (self._seen - 1) % cfg.keyframe_stride != 0:
            return None

        t0 = time.perf_counter()
        ds, feats, desc = self._describe(cloud)
        self.timings["descriptor_extraction"].append(time.perf_counter() - t0)

        t0 = time.perf_counter()
        hit = self.database.query(desc, scan_index, cfg.exclusion)
        self.timings["database_query"].append(time.perf_counter() - t0)

        detection = None
        if hit is not None:
            matched_index, dist = hit
            if dist >= cfg.similarity_threshold:
                detection = LoopDetection(scan_index, matched_index, dist,
                                          Pose.identity(), 0.0, False,
                                          "threshold")
            else:
                t0 = time.perf_counter()
                detection = self._geometric_check(scan_index, matched_index,
                                                  dist, ds, feats)
                self.timings["pose_estimation"].append(
                    time.perf_counter() - t0)

        self.database.append(scan_index, desc)
        self._features[scan_index] = feats
        self._clouds[scan_index] = ds
        return detection

    def _geometric_check(self, scan_index, matched_index, dist, ds, feats):
        cfg = self.config
        try:
            pose, fitness = self._estimate_pose(feats,
                                                self._features[matched_index])
            if cfg.refine_icp:
                refined = icp(ds, self._clouds[matched_index], pose, cfg.icp)
                pose, fitness = refined.pose, refined.fitness
        except (InsufficientMatchesError, NoCorrespondencesError,
                DegenerateGeometryError):
            return LoopDetection(scan_index, matched_index, dist,
                                 Pose.identity(), 0.0, False, "consistency")
        accepted = fitness > cfg.icp_fitness_threshold
        return LoopDetection(scan_index, matched_index, dist, pose, fitness,
                             accepted, None if accepted else "consistency")

    def compare(self, a, b) -> float:
        """Timed single-pair descriptor comparison (O(G) by construction)."""
        t0 = time.perf_counter()
        d = descriptor_distance(a, b)
        self.timings["pairwise_comparison"].append(time.perf_counter() - t0)
        return d


# ---------------------------------------------------------------------------
# loss diagnostics


@dataclass(frozen=True)
class LossConfig:
    """Triplet margin, auxiliary-loss weight, and the per-point norm.

    Descriptor distance inside the triplet loss is always L2 on unit
    vectors; ``point_norm`` selects how per-point deviations are reduced in
    the pose and transport losses (the reference formulation is ambiguous
    between L1 and L2 — tests pin L1).
    """

    margin: float = 0.5
    beta: float = 0.05
    point_norm: str = "l1"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.point_norm not in ("l1", "l2"):
            raise ValueError(f"unknown point_norm {self.point_norm!r}")


def _point_norms(deltas: np.ndarray, kind: str) -> np.ndarray:
    if kind == "l1":
        return np.abs(deltas).sum(axis=1)
    return np.linalg.norm(deltas, axis=1)


def triplet_loss(anchor, positive, negative,
                 config: LossConfig = LossConfig()) -> float:
    """max(0, d(a, p) - d(a, n) + margin) with L2 descriptor distance."""
    d_pos = descriptor_distance(anchor, positive)
    d_neg = descriptor_distance(anchor, negative)
    return max(0.0, d_pos - d_neg + config.margin)


def pose_loss(cloud: PointCloud, predicted: Pose, truth: Pose,
              config: LossConfig = LossConfig()) -> float:
    """Mean per-point deviation between predicted and true transforms."""
    if len(cloud) == 0:
        raise ValueError("pose loss needs a non-empty cloud")
    deltas = transform_points(predicted, cloud.xyz) \
        - transform_points(truth, cloud.xyz)
    return float(_point_norms(deltas, config.point_norm).mean())


def _as_coordinates(obj) -> np.ndarray:
    if isinstance(obj, KeypointFeatures):
        return obj.keypoints.coordinates
    if hasattr(obj, "coordinates"):
        return obj.coordinates
    return np.asarray(obj, dtype=np.float64)


def ot_aux_loss(plan: TransportPlan, anchor_keypoints, positive_keypoints,
                truth: Pose, config: LossConfig = LossConfig(),
                mass_floor_scale: float = 1e-9) -> float:
    """Mean deviation of transport-projected matches from the true targets.

    Keypoint arguments may be feature sets, keypoint sets, or plain (n, 3)
    arrays. Rows whose transported mass falls under the floor are excluded,
    exactly as in the pose head's soft projection.
    """
    corr = project_soft(plan, _as_coordinates(positive_keypoints),
                        mass_floor_scale)
    valid = corr.valid
    truth_targets = transform_points(
        truth, _as_coordinates(anchor_keypoints)[valid])
    deltas = corr.projected[valid] - truth_targets
    return float(_point_norms(deltas, config.point_norm).mean())


def total_loss(triplet: float, pose: float, ot_aux: float,
               config: LossConfig = LossConfig()) -> float:
    """Linear combination: triplet + pose + beta * transport auxiliary."""
    for name, value in (("triplet", triplet), ("pose", pose),
                        ("ot_aux", ot_aux)):
        if not math.isfinite(value):
            raise ValueError(f"{name} loss must be finite, got {value}")
    return triplet + pose + config.beta * ot_aux


# ---------------------------------------------------------------------------
# detection log serialization


def _format_float(x: float) -> str:
    return repr(float(x))


def write_detections(path, detections) -> None:
    """One CSV row per processed scan, reproducible byte-for-byte.

    ``None`` results (no eligible candidate) become rows with
    ``matched_index`` -1 and empty metric fields, so the log length always
    equals the number of scans. Floats are written with ``repr`` (shortest
    round-trip form).
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_DETECTION_HEADER)
        for scan_index, det in detections:
            if det is None:
                writer.writerow([scan_index, -1, "", "false", "", "", "",
                                 "", "", ""])
                continue
            writer.writerow([
                det.query_index,
                det.matched_index,
                _format_float(det.descriptor_distance),
                "true" if det.accepted else "false",
                det.reject_reason or "",
                _format_float(det.pose.translation[0]),
                _format_float(det.pose.translation[1]),
                _format_float(det.pose.translation[2]),
                _format_float(math.degrees(det.pose.yaw())),
                _format_float(det.fitness),
            ])


def read_detections(path):
    """Parse a detection log back into ``(scan_index, LoopDetection|None)``.

    Poses reconstruct only the logged yaw + translation (the log is a
    summary, not a full pose serialization).
    """
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(_DETECTION_HEADER):
            raise ValueError(f"unexpected detection log header: {header}")
        for row in reader:
            if len(row) != len(_DETECTION_HEADER):
                raise ValueError(f"malformed detection row: {row}")
            scan_index = int(row[0])
            if row[1] == "-1" and row[2] == "":
                out.append((scan_index, None))
                continue
            yaw = math.radians(float(row[8]))
            rot = np.array([
                [math.cos(yaw), -math.sin(yaw), 0.0],
                [math.sin(yaw), math.cos(yaw), 0.0],
                [0.0, 0.0, 1.0],
            ])
            det = LoopDetection(
                query_index=scan_index,
                matched_index=int(row[1]),
                descriptor_distance=float(row[2]),
                pose=Pose(rot, np.array([float(row[5]), float(row[6]),
                                         float(row[7])])),
                fitness=float(row[9]),
                accepted=row[3] == "true",
                reject_reason=row[4] or None,
            )
            out.append((scan_index, det))
    return out
