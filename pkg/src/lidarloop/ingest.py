"""Scan and pose I/O, sequence handling, loop groundtruth, synthetic data.

File formats follow the KITTI odometry layout:

* a scan is a raw little-endian binary file of 16-byte records
  ``(float32 x, float32 y, float32 z, float32 intensity)``;
* a pose file has one line per scan with 12 whitespace-separated numbers,
  the row-major ``3x4`` matrix ``[R | t]`` mapping the scan frame into the
  reference frame.

The synthetic generators produce structured outdoor-like clouds (ground
plane, walls, boxes, scattered clutter) and perturbed scan pairs or whole
trajectories with known groundtruth, which back most of the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence as TypingSequence

import numpy as np

from .geom import PointCloud, Pose, apply_pose, remove_sector

_RECORD_BYTES = 16  # 4 little-endian float32 per point

# Orthonormality handling for poses read from text files: drift beyond
# _POSE_FIX_TOL is silently re-projected onto SO(3); drift beyond
# _POSE_REJECT_TOL is a hard error.
_POSE_FIX_TOL = 1e-6
_POSE_REJECT_TOL = 1e-3


def read_scan(path) -> PointCloud:
    """Read a KITTI-style binary scan.

    Raises ``ValueError`` if the file size is not a multiple of the 16-byte
    record, or if any coordinate / intensity is non-finite (the error names
    the offending point index).
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % _RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: size {len(raw)} is not a multiple of {_RECORD_BYTES} bytes"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(data[:, :3], data[:, 3], frame_id=path.stem)


def write_scan(path, cloud: PointCloud) -> None:
    """Write a cloud in the binary scan format (values cast to float32)."""
    rec = np.empty((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.xyz
    rec[:, 3] = cloud.intensity
    Path(path).write_bytes(rec.tobytes())


def _pose_from_row(values: np.ndarray, line_no: int) -> Pose:
    m = values.reshape(3, 4)
    r, t = m[:, :3], m[:, 3]
    drift = np.abs(r.T @ r - np.eye(3)).max()
    if drift > _POSE_REJECT_TOL:
        raise ValueError(
            f"pose line {line_no}: rotation drift {drift:.2e} exceeds "
            f"{_POSE_REJECT_TOL:.0e}, refusing to repair"
        )
    if drift > _POSE_FIX_TOL:
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] = -u[:, -1]
            r = u @ vt
    return Pose(r, t)


def read_poses(path) -> list[Pose]:
    """Read a KITTI pose file (12 numbers per non-empty line)."""
    poses = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 12:
                raise ValueError(
                    f"pose line {line_no}: expected 12 values, got {len(parts)}"
                )
            try:
                values = np.array([float(p) for p in parts])
            except ValueError as exc:
                raise ValueError(f"pose line {line_no}: {exc}") from None
            if not np.isfinite(values).all():
                raise ValueError(f"pose line {line_no}: non-finite value")
            poses.append(_pose_from_row(values, line_no))
    return poses


def write_poses(path, poses: TypingSequence[Pose]) -> None:
    with open(path, "w") as fh:
        for pose in poses:
            fh.write(" ".join(format(v, ".17g") for v in pose.kitti_row()) + "\n")


@dataclass
class ScanSequence:
    """An ordered set of scans with one groundtruth pose each.

    Scans are loaded lazily through ``loaders`` so a long sequence never has
    to be resident in memory at once; loading the same index twice returns
    equal clouds.
    """

    name: str
    loaders: list[Callable[[], PointCloud]]
    poses: list[Pose]

    def __post_init__(self):
        if len(self.loaders) != len(self.poses):
            raise ValueError(
                f"{len(self.loaders)} scans but {len(self.poses)} poses"
            )

    def __len__(self) -> int:
        return len(self.loaders)

    def scan(self, i: int) -> PointCloud:
        return self.loaders[i]()

    @classmethod
    def from_kitti(cls, scan_dir, poses_path, name: str = "") -> "ScanSequence":
        scan_dir = Path(scan_dir)
        paths = sorted(scan_dir.glob("*.bin"))
        if not paths:
            raise ValueError(f"no .bin scans found in {scan_dir}")
        poses = read_poses(poses_path)
        if len(poses) != len(paths):
            raise ValueError(
                f"{len(paths)} scans in {scan_dir} but {len(poses)} poses"
            )
        loaders = [(lambda p=p: read_scan(p)) for p in paths]
        return cls(name or scan_dir.name, loaders, poses)

    @classmethod
    def from_clouds(cls, clouds: TypingSequence[PointCloud],
                    poses: TypingSequence[Pose], name: str = "synthetic"):
        loaders = [(lambda c=c: c) for c in clouds]
        return cls(name, loaders, list(poses))


@dataclass(frozen=True)
class LoopGroundtruth:
    """All scan pairs that close a loop.

    ``pairs`` holds ``(i, j)`` with ``i > j``, ``i - j > exclusion_window``
    and 3D pose distance <= ``loop_radius``.
    """

    pairs: frozenset
    loop_radius: float
    exclusion_window: int
    num_scans: int

    def partners(self, i: int) -> set[int]:
        return {j for (a, j) in self.pairs if a == i}

    def has_loop(self, i: int) -> bool:
        return any(a == i for (a, _) in self.pairs)

    def queries_with_loops(self) -> set[int]:
        return {a for (a, _) in self.pairs}


def build_loop_groundtruth(poses: TypingSequence[Pose], loop_radius: float = 4.0,
                           exclusion_window: int = 50) -> LoopGroundtruth:
    """Label every (i, j) revisit pair from groundtruth poses.

    A pair qualifies when the scans are more than ``exclusion_window`` apart
    in time and their positions are within ``loop_radius`` meters (full 3D
    distance).
    """
    if loop_radius <= 0:
        raise ValueError("loop_radius must be positive")
    if exclusion_window < 0:
        raise ValueError("exclusion_window must be >= 0")
    t = np.array([p.translation for p in poses])
    n = len(t)
    pairs = set()
    for i in range(exclusion_window + 1, n):
        js = np.arange(0, i - exclusion_window)
        d = np.linalg.norm(t[js] - t[i], axis=1)
        for j in js[d <= loop_radius]:
            pairs.add((i, int(j)))
    return LoopGroundtruth(frozenset(pairs), loop_radius, exclusion_window, n)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a structured synthetic cloud.

    Fractions control how the point budget is split; they must sum to <= 1
    and any remainder is assigned to the ground plane. The geometry is
    deliberately anisotropic (boxes and walls at random yaws, vertical
    poles) so local shape statistics vary across the scene.
    """

    n_points: int = 6000
    extent: float = 18.0            # half-size of the square footprint, m
    ground_fraction: float = 0.30
    wall_fraction: float = 0.25
    box_fraction: float = 0.28
    clutter_fraction: float = 0.17
    n_walls: int = 5
    n_boxes: int = 9
    n_poles: int = 12
    ground_thickness: float = 0.02  # std of ground z jitter, m
    max_height: float = 3.0

    def __post_init__(self):
        if self.n_points < 100:
            raise ValueError("scene requires at least 100 points")
        total = (self.ground_fraction + self.wall_fraction
                 + self.box_fraction + self.clutter_fraction)
        if total > 1.0 + 1e-9:
            raise ValueError(f"fractions sum to {total:.3f} > 1")
        for f in (self.ground_fraction, self.wall_fraction,
                  self.box_fraction, self.clutter_fraction):
            if f < 0:
                raise ValueError("fractions must be non-negative")


def _box_surface_points(rng, n, center, size, yaw, with_top=True):
    """Uniform-ish samples on the vertical faces (and top) of a box."""
    lx, ly, lz = size
    areas = np.array([ly * lz, ly * lz, lx * lz, lx * lz,
                      lx * ly if with_top else 0.0])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, n)
    v = rng.uniform(0.0, 1.0, n)
    pts = np.empty((n, 3))
    side = face < 4
    sx = np.where(face == 0, 0.5, np.where(face == 1, -0.5, u))
    sy = np.where(face == 2, 0.5, np.where(face == 3, -0.5, u))
    pts[:, 0] = sx * lx
    pts[:, 1] = sy * ly
    pts[:, 2] = np.where(side, v * lz, lz)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    pts[:, :2] = pts[:, :2] @ rot.T
    pts[:, 0] += center[0]
    pts[:, 1] += center[1]
    return pts


def generate_scene_cloud(spec: SceneSpec, seed: int) -> PointCloud:
    """Build a deterministic structured cloud; exactly ``spec.n_points`` points."""
    rng = np.random.default_rng(seed)
    e = spec.extent
    n = spec.n_points

    n_wall = int(round(n * spec.wall_fraction))
    n_box = int(round(n * spec.box_fraction))
    n_clutter = int(round(n * spec.clutter_fraction))
    n_ground = n - n_wall - n_box - n_clutter
    blocks = []

    if n_ground > 0:
        g = np.empty((n_ground, 3))
        g[:, 0] = rng.uniform(-e, e, n_ground)
        g[:, 1] = rng.uniform(-e, e, n_ground)
        g[:, 2] = rng.normal(0.0, spec.ground_thickness, n_ground)
        blocks.append(g)

    if n_wall > 0 and spec.n_walls > 0:
        per = np.array_split(np.arange(n_wall), spec.n_walls)
        for chunk in per:
            if len(chunk) == 0:
                continue
            center = rng.uniform(-0.8 * e, 0.8 * e, 2)
            length = rng.uniform(5.0, 0.7 * e)
            height = rng.uniform(1.8, spec.max_height)
            yaw = rng.uniform(-math.pi, math.pi)
            blocks.append(_box_surface_points(
                rng, len(chunk), center, (length, 0.1, height), yaw,
                with_top=False))

    if n_box > 0 and spec.n_boxes > 0:
        per = np.array_split(np.arange(n_box), spec.n_boxes)
        for chunk in per:
            if len(chunk) == 0:
                continue
            center = rng.uniform(-0.85 * e, 0.85 * e, 2)
            size = (rng.uniform(0.8, 3.0), rng.uniform(0.8, 3.0),
                    rng.uniform(0.8, min(2.5, spec.max_height)))
            yaw = rng.uniform(-math.pi, math.pi)
            blocks.append(_box_surface_points(rng, len(chunk), center, size, yaw))

    if n_clutter > 0:
        # Half loose points, half short vertical pole segments.
        n_loose = n_clutter // 2
        n_pole = n_clutter - n_loose
        if n_loose > 0:
            c = np.empty((n_loose, 3))
            c[:, 0] = rng.uniform(-e, e, n_loose)
            c[:, 1] = rng.uniform(-e, e, n_loose)
            c[:, 2] = rng.uniform(0.0, spec.max_height, n_loose)
            blocks.append(c)
        if n_pole > 0 and spec.n_poles > 0:
            per = np.array_split(np.arange(n_pole), spec.n_poles)
            for chunk in per:
                if len(chunk) == 0:
                    continue
                base = rng.uniform(-e, e, 2)
                height = rng.uniform(1.2, spec.max_height)
                p = np.empty((len(chunk), 3))
                p[:, 0] = base[0] + rng.normal(0, 0.02, len(chunk))
                p[:, 1] = base[1] + rng.normal(0, 0.02, len(chunk))
                p[:, 2] = rng.uniform(0.0, height, len(chunk))
                blocks.append(p)

    xyz = np.vstack(blocks) if blocks else np.empty((0, 3))
    assert xyz.shape[0] == n, (xyz.shape[0], n)
    intensity = rng.uniform(0.0, 1.0, n)
    return PointCloud(xyz, intensity, frame_id=f"scene-{seed}")


@dataclass(frozen=True)
class PairSpec:
    """Perturbation ranges for a synthetic registration pair.

    Translation is drawn uniformly within +/-``trans_xy`` in x and y and
    +/-``trans_z`` in z; yaw within +/-``yaw_deg``; roll and pitch within
    +/-``roll_pitch_deg``. ``noise_sigma`` is isotropic per-point Gaussian
    noise, ``dropout`` a per-point drop probability, ``sector_deg`` the
    width of a random azimuth wedge removed from each side (0 disables).
    """

    trans_xy: float = 1.5
    trans_z: float = 0.25
    yaw_deg: float = 180.0
    roll_pitch_deg: float = 3.0
    noise_sigma: float = 0.0
    dropout: float = 0.0
    sector_deg: float = 0.0


@dataclass(frozen=True)
class SyntheticScene:
    """A base cloud plus the perturbation recipe used to derive pairs."""

    base_cloud: PointCloud
    pair_spec: PairSpec = field(default_factory=PairSpec)


def _perturb_side(rng, cloud: PointCloud, spec: PairSpec) -> PointCloud:
    xyz = cloud.xyz
    if spec.noise_sigma > 0:
        xyz = xyz + rng.normal(0.0, spec.noise_sigma, xyz.shape)
    out = PointCloud(xyz, cloud.intensity, cloud.frame_id)
    if spec.dropout > 0:
        keep = rng.random(len(out)) >= spec.dropout
        out = PointCloud(out.xyz[keep], out.intensity[keep], out.frame_id)
    if spec.sector_deg > 0:
        center = rng.uniform(-180.0, 180.0)
        out = remove_sector(out, center, spec.sector_deg)
    return out


def generate_synthetic_pair(scene: SyntheticScene, seed: int):
    """Derive a (source, target, groundtruth pose) registration problem.

    ``target`` is the base cloud moved by a pose drawn from the ranges in
    the pair spec; noise, dropout and sector removal are then applied to
    source and target independently. With all perturbations at zero,
    ``apply_pose(H, source)`` equals ``target`` exactly.
    """
    rng = np.random.default_rng(seed)
    spec = scene.pair_spec
    t = np.array([
        rng.uniform(-spec.trans_xy, spec.trans_xy) if spec.trans_xy > 0 else 0.0,
        rng.uniform(-spec.trans_xy, spec.trans_xy) if spec.trans_xy > 0 else 0.0,
        rng.uniform(-spec.trans_z, spec.trans_z) if spec.trans_z > 0 else 0.0,
    ])
    yaw = math.radians(rng.uniform(-spec.yaw_deg, spec.yaw_deg)) \
        if spec.yaw_deg > 0 else 0.0
    roll = math.radians(rng.uniform(-spec.roll_pitch_deg, spec.roll_pitch_deg)) \
        if spec.roll_pitch_deg > 0 else 0.0
    pitch = math.radians(rng.uniform(-spec.roll_pitch_deg, spec.roll_pitch_deg)) \
        if spec.roll_pitch_deg > 0 else 0.0
    pose = Pose.from_rpy(roll, pitch, yaw, t)

    source = _perturb_side(rng, scene.base_cloud, spec)
    target = _perturb_side(rng, apply_pose(pose, scene.base_cloud), spec)
    return source, target, pose


# ---------------------------------------------------------------------------
# synthetic trajectories


@dataclass(frozen=True)
class TrajectorySpec:
    """A scripted drive through a synthetic world.

    The route is built from straight legs with teleports between them, so
    revisit geometry is fully controlled: ``same_dir_revisits`` scans
    re-drive the start of leg A with the same heading, ``reverse_revisits``
    re-drive the start of leg B with opposite heading. All other scans stay
    more than ``loop radius`` away from each other. With both revisit
    counts at zero the route is a single straight line.
    """

    n_scans: int = 300
    same_dir_revisits: int = 20
    reverse_revisits: int = 20
    spacing: float = 2.0          # distance between consecutive scans, m
    scan_range: float = 25.0      # sensor range, m
    noise_sigma: float = 0.01
    ground_density: float = 3.0   # points / m^2
    structure_points: int = 220   # per structure
    n_structures_per_100m: int = 22
    max_height: float = 3.0

    def __post_init__(self):
        if self.n_scans < 1:
            raise ValueError("need at least one scan")
        has_revisits = self.same_dir_revisits + self.reverse_revisits > 0
        if has_revisits and self.n_scans < 200 + self.same_dir_revisits + self.reverse_revisits:
            raise ValueError(
                "revisit layout needs n_scans >= 200 + revisit count"
            )


@dataclass(frozen=True)
class TrajectoryData:
    """Scans in sensor frame, groundtruth poses, and revisit bookkeeping."""

    clouds: list
    poses: list
    same_dir_queries: list
    reverse_queries: list

    def sequence(self, name="synthetic") -> ScanSequence:
        return ScanSequence.from_clouds(self.clouds, self.poses, name)


def _route_poses(spec: TrajectorySpec):
    """Scan positions/headings plus which indices are scripted revisits."""
    s = spec.spacing
    n_same, n_rev = spec.same_dir_revisits, spec.reverse_revisits
    if n_same + n_rev == 0:
        states = [(i * s, 0.0, 0.0) for i in range(spec.n_scans)]
        return states, [], []

    n_plain = spec.n_scans - n_same - n_rev
    len_a = max(100, n_plain // 3)
    len_b = max(100, n_plain // 3)
    len_e = n_plain - len_a - len_b
    if len_e < 0:
        raise ValueError("n_scans too small for the revisit layout")

    states = []
    # Leg A: eastbound along y = 0.
    states += [(i * s, 0.0, 0.0) for i in range(len_a)]
    # Leg B: eastbound along y = 34 (far from A).
    states += [(i * s, 34.0, 0.0) for i in range(len_b)]
    # Leg C: same-direction revisits of the start of leg A. Offset keeps
    # the revisit within ~1 m of its partner; index gap >= len_a + len_b.
    same_q = []
    for k in range(n_same):
        same_q.append(len(states))
        states.append((k * s + 0.7, 0.4, 0.0))
    # Leg D: reverse revisits of the start of leg B (driving westbound).
    rev_q = []
    for m in range(n_rev):
        rev_q.append(len(states))
        k = n_rev - 1 - m  # walk west: decreasing x
        states.append((k * s + 0.6, 34.4, math.pi))
    # Leg E: filler on a distant lane, no revisits.
    states += [(i * s, 80.0, 0.0) for i in range(len_e)]
    assert len(states) == spec.n_scans
    return states, same_q, rev_q


def _world_cloud(spec: TrajectorySpec, states, rng) -> np.ndarray:
    """Structures and ground strewn along every lane the route touches."""
    xs = np.array([st[0] for st in states])
    ys = np.array([st[1] for st in states])
    lanes = sorted(set(round(y, 6) for y in ys))
    x_lo, x_hi = xs.min() - spec.scan_range, xs.max() + spec.scan_range
    blocks = []
    corridor = 14.0  # ground half-width around each lane, m
    for lane in lanes:
        length = x_hi - x_lo
        n_ground = int(length * 2 * corridor * spec.ground_density)
        g = np.empty((n_ground, 3))
        g[:, 0] = rng.uniform(x_lo, x_hi, n_ground)
        g[:, 1] = rng.uniform(lane - corridor, lane + corridor, n_ground)
        g[:, 2] = rng.normal(0.0, 0.02, n_ground)
        blocks.append(g)

        n_structs = max(4, int(length / 100.0 * spec.n_structures_per_100m))
        for _ in range(n_structs):
            cx = rng.uniform(x_lo, x_hi)
            cy = lane + rng.choice([-1.0, 1.0]) * rng.uniform(4.0, 12.0)
            kind = rng.random()
            if kind < 0.45:  # box
                size = (rng.uniform(1.0, 4.0), rng.uniform(1.0, 4.0),
                        rng.uniform(1.0, spec.max_height))
                yaw = rng.uniform(-math.pi, math.pi)
                blocks.append(_box_surface_points(
                    rng, spec.structure_points, (cx, cy), size, yaw))
            elif kind < 0.75:  # wall
                size = (rng.uniform(4.0, 10.0), 0.1,
                        rng.uniform(1.8, spec.max_height))
                yaw = rng.uniform(-math.pi, math.pi)
                blocks.append(_box_surface_points(
                    rng, spec.structure_points, (cx, cy), size, yaw,
                    with_top=False))
            else:  # pole cluster
                n = spec.structure_points // 2
                height = rng.uniform(1.5, spec.max_height)
                p = np.empty((n, 3))
                p[:, 0] = cx + rng.normal(0, 0.03, n)
                p[:, 1] = cy + rng.normal(0, 0.03, n)
                p[:, 2] = rng.uniform(0.0, height, n)
                blocks.append(p)
    return np.vstack(blocks)


def generate_trajectory(spec: TrajectorySpec, seed: int) -> TrajectoryData:
    """Render every scan of a scripted route through one synthetic world."""
    rng = np.random.default_rng(seed)
    states, same_q, rev_q = _route_poses(spec)
    world = _world_cloud(spec, states, rng)

    clouds, poses = [], []
    for i, (x, y, heading) in enumerate(states):
        pos = np.array([x, y, 0.0])
        pose = Pose.from_rpy(0.0, 0.0, heading, pos)
        d = np.linalg.norm(world[:, :2] - pos[:2], axis=1)
        local = world[d <= spec.scan_range]
        # into sensor frame: p_local = R^T (p - t)
        local = (local - pos) @ pose.rotation
        if spec.noise_sigma > 0:
            local = local + rng.normal(0.0, spec.noise_sigma, local.shape)
        clouds.append(PointCloud(local, frame_id=f"{i:06d}"))
        poses.append(pose)
    return TrajectoryData(clouds, poses, same_q, rev_q)
