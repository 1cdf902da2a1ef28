"""Flat key=value run configuration shared by every CLI command.

One :class:`RunConfig` carries every tunable in the pipeline, so a single
``--config`` file (or repeated ``-o key=value`` overrides) pins a whole
run. Unknown keys are rejected loudly — a typo must never silently fall
back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .features import FeatureSpec
from .pipeline import LcdConfig, LossConfig
from .registration import IcpParams, RansacParams
from .sampling import VoxelGridSpec
from .transport import UotParams


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_radii(text) -> tuple:
    if isinstance(text, tuple):
        return text
    radii = tuple(float(part) for part in str(text).split(",") if part.strip())
    if not radii:
        raise ValueError("feature_radii needs at least one radius")
    return radii


def _fmt_radii(value) -> str:
    return ",".join(repr(r) for r in value)


# key -> (parser, unit, description); the declaration order is the --help
# order, grouped roughly by pipeline stage.
_KEY_SPECS = {
    "seed": (int, "-", "root seed for every stochastic component"),
    "threads": (int, "count", "worker threads for neighbor queries "
                              "(-1 = all cores); never changes results"),
    "voxel_size": (float, "m", "voxel edge for downsampling"),
    "n_keypoints": (int, "count", "farthest-point keypoints per scan"),
    "feature_radii": (_parse_radii, "m", "comma-separated multi-scale "
                                         "neighborhood radii"),
    "feature_angle_bins": (int, "count", "normal-angle histogram bins"),
    "feature_radial_bins": (int, "count", "radial histogram bins"),
    "feature_min_neighbors": (int, "count", "neighbors required before a "
                                            "radius block is populated"),
    "feature_normal_neighbors": (int, "count", "k-NN size for surface "
                                               "normals"),
    "vlad_clusters": (int, "count", "descriptor codebook size"),
    "descriptor_dim": (int, "count", "global descriptor output width"),
    "vlad_alpha": (float, "-", "soft-assignment sharpness used when "
                               "fitting"),
    "uot_lambda": (float, "-", "entropic regularization of the matcher"),
    "uot_rho": (float, "-", "marginal relaxation strength"),
    "uot_iterations": (int, "count", "Sinkhorn iterations"),
    "mass_floor_scale": (float, "-", "relative row-mass floor for valid "
                                     "soft matches"),
    "ransac_iterations": (int, "count", "RANSAC hypothesis budget"),
    "ransac_inlier_threshold": (float, "m", "inlier distance cutoff"),
    "ransac_sample_size": (int, "count", "correspondences per hypothesis"),
    "ransac_min_inlier_fraction": (float, "-", "consensus needed to report "
                                               "convergence"),
    "ransac_mutual_check": (_parse_bool, "flag", "keep only mutual nearest "
                                                 "feature matches"),
    "icp_variant": (str, "-", "point_to_point or point_to_plane"),
    "icp_iterations": (int, "count", "ICP iteration cap"),
    "icp_distance": (float, "m", "ICP correspondence cutoff"),
    "icp_epsilon": (float, "-", "ICP convergence step size"),
    "similarity_threshold": (float, "-", "descriptor distance gate for "
                                         "loop candidates"),
    "icp_fitness_threshold": (float, "-", "registration consensus gate"),
    "exclusion": (int, "scans", "recent scans excluded from retrieval"),
    "loop_radius": (float, "m", "groundtruth revisit radius"),
    "keyframe_stride": (int, "scans", "process every k-th scan"),
    "lcd_method": (str, "-", "loop pose estimator: ransac or fast"),
    "refine_icp": (_parse_bool, "flag", "refine loop poses with ICP"),
    "triplet_margin": (float, "-", "margin of the triplet loss"),
    "loss_beta": (float, "-", "weight of the transport auxiliary loss"),
}


@dataclass(frozen=True)
class RunConfig:
    """Every module default in one flat namespace.

    Defaults follow the reference operating point (4096 keypoints, a
    64-cluster codebook compressed to 256 dims, 5 matcher iterations,
    margin 0.5, beta 0.05, 4 m loop radius, 50-scan exclusion).
    """

    seed: int = 0
    threads: int = -1
    voxel_size: float = 0.1
    n_keypoints: int = 4096
    feature_radii: tuple = (1.0, 2.0, 4.0)
    feature_angle_bins: int = 8
    feature_radial_bins: int = 8
    feature_min_neighbors: int = 5
    feature_normal_neighbors: int = 10
    vlad_clusters: int = 64
    descriptor_dim: int = 256
    vlad_alpha: float = 10.0
    uot_lambda: float = 0.03
    uot_rho: float = 1.0
    uot_iterations: int = 5
    mass_floor_scale: float = 0.5
    ransac_iterations: int = 5000
    ransac_inlier_threshold: float = 0.6
    ransac_sample_size: int = 3
    ransac_min_inlier_fraction: float = 0.05
    ransac_mutual_check: bool = True
    icp_variant: str = "point_to_point"
    icp_iterations: int = 30
    icp_distance: float = 1.0
    icp_epsilon: float = 1e-6
    similarity_threshold: float = 0.8
    icp_fitness_threshold: float = 0.6
    exclusion: int = 50
    loop_radius: float = 4.0
    keyframe_stride: int = 1
    lcd_method: str = "ransac"
    refine_icp: bool = True
    triplet_margin: float = 0.5
    loss_beta: float = 0.05

    def with_overrides(self, items) -> "RunConfig":
        """Apply ``key=value`` strings; unknown keys raise ValueError."""
        updates = {}
        for item in items:
            key, sep, raw = item.partition("=")
            key = key.strip()
            if not sep:
                raise ValueError(f"expected key=value, got {item!r}")
            if key not in _KEY_SPECS:
                raise ValueError(f"unknown config key {key!r}")
            parser = _KEY_SPECS[key][0]
            try:
                updates[key] = parser(raw.strip())
            except ValueError as exc:
                raise ValueError(f"bad value for {key}: {exc}") from exc
        return replace(self, **updates)

    # -- sub-config builders -------------------------------------------

    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec(
            radii=self.feature_radii,
            angle_bins=self.feature_angle_bins,
            radial_bins=self.feature_radial_bins,
            min_neighbors=self.feature_min_neighbors,
            normal_neighbors=self.feature_normal_neighbors,
        )

    def voxel_spec(self) -> VoxelGridSpec:
        return VoxelGridSpec(voxel_size=self.voxel_size)

    def uot_params(self) -> UotParams:
        return UotParams(lam=self.uot_lambda, rho=self.uot_rho,
                         iterations=self.uot_iterations)

    def ransac_params(self) -> RansacParams:
        return RansacParams(
            max_iterations=self.ransac_iterations,
            inlier_threshold=self.ransac_inlier_threshold,
            sample_size=self.ransac_sample_size,
            min_inlier_fraction=self.ransac_min_inlier_fraction,
            mutual_check=self.ransac_mutual_check,
        )

    def icp_params(self) -> IcpParams:
        return IcpParams(
            variant=self.icp_variant,
            max_iterations=self.icp_iterations,
            correspondence_distance=self.icp_distance,
            convergence_epsilon=self.icp_epsilon,
            normal_neighbors=self.feature_normal_neighbors,
        )

    def lcd_config(self) -> LcdConfig:
        return LcdConfig(
            similarity_threshold=self.similarity_threshold,
            icp_fitness_threshold=self.icp_fitness_threshold,
            exclusion=self.exclusion,
            loop_radius=self.loop_radius,
            method=self.lcd_method,
            refine_icp=self.refine_icp,
            keyframe_stride=self.keyframe_stride,
            n_keypoints=self.n_keypoints,
            voxel=self.voxel_spec(),
            feature_spec=self.feature_spec(),
            uot=self.uot_params(),
            mass_floor_scale=self.mass_floor_scale,
            ransac=self.ransac_params(),
            icp=self.icp_params(),
            seed=self.seed,
            workers=self.threads,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(margin=self.triplet_margin, beta=self.loss_beta)


def load_config(path) -> RunConfig:
    """Parse a ``key = value`` file (one per line, # comments)."""
    path = Path(path)
    items = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{line_no}: expected key=value, "
                             f"got {stripped!r}")
        items.append(stripped)
    return RunConfig().with_overrides(items)


def describe_keys() -> str:
    """One line per config key: name, default, unit, description."""
    defaults = RunConfig()
    lines = []
    for f in fields(RunConfig):
        _, unit, doc = _KEY_SPECS[f.name]
        value = getattr(defaults, f.name)
        shown = _fmt_radii(value) if f.name == "feature_radii" else value
        lines.append(f"  {f.name} = {shown} [{unit}]  {doc}")
    return "\n".join(lines)
