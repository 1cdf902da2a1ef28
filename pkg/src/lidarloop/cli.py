"""Command-line front end: register, detect, eval, synth, fit-vlad.

Every command honors ``--config`` (a flat key=value file), repeated
``-o key=value`` overrides, and ``--seed``; two runs with the same
configuration and seed write byte-identical CSV outputs. Exit codes:
0 success, 1 stage failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import ingest
from .config import RunConfig, describe_keys, load_config
from .descriptor import (
    fit_vlad_params,
    global_descriptor,
    read_database,
    read_vlad_params,
    write_database,
    write_vlad_params,
)
from .evaluation import (
    ScoredPair,
    emit_report,
    protocol1,
    protocol2,
    registration_stats,
    score_all_pairs,
)
from .features import extract_features
from .geom import compose, inverse, pose_error
from .pipeline import LoopCloser, read_detections, write_detections
from .registration import icp, ransac_register, success_check
from .sampling import farthest_point_sampling, voxel_downsample
from .transport import estimate_pose_uot, write_plan


class UsageError(Exception):
    """Bad arguments or unreadable inputs: exit code 2."""


def _require_file(path, kind: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{kind} not found: {p}")
    return p


def _require_dir(path, kind: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{kind} not found: {p}")
    return p


def _load(reader, *args):
    """Run an input parser; malformed inputs become usage errors."""
    try:
        return reader(*args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _build_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        cfg = load_config(_require_file(args.config, "config file"))
    try:
        cfg = cfg.with_overrides(args.opt or [])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.seed is not None:
        cfg = cfg.with_overrides([f"seed={args.seed}"])
    if args.threads is not None:
        cfg = cfg.with_overrides([f"threads={args.threads}"])
    return cfg


def _describe_scan(path, cfg: RunConfig):
    cloud = _load(ingest.read_scan, path)
    ds = voxel_downsample(cloud, cfg.voxel_spec())
    kp = farthest_point_sampling(ds, cfg.n_keypoints)
    feats = extract_features(ds, kp, cfg.feature_spec(),
                             workers=cfg.threads)
    return ds, feats


def _print_pose_line(pose) -> None:
    print(" ".join(repr(float(v)) for v in pose.kitti_row()))


# ---------------------------------------------------------------------------
# register


def cmd_register(args) -> int:
    cfg = _build_config(args)
    source_path = _require_file(args.source, "source scan")
    target_path = _require_file(args.target, "target scan")
    if args.dump_plan and args.method != "fast":
        raise UsageError("--dump-plan requires --method fast")

    src_ds, src_feats = _describe_scan(source_path, cfg)
    tgt_ds, tgt_feats = _describe_scan(target_path, cfg)

    report = {"method": args.method,
              "source": str(source_path), "target": str(target_path)}
    if args.method == "ransac":
        result = ransac_register(src_feats, tgt_feats, cfg.ransac_params(),
                                 seed=cfg.seed)
        pose = result.pose
        report.update(fitness=result.fitness, inlier_rmse=result.inlier_rmse,
                      iterations=result.iterations_used,
                      converged=result.converged)
    else:
        pose, plan = estimate_pose_uot(src_feats, tgt_feats,
                                       cfg.uot_params(),
                                       cfg.mass_floor_scale)
        floor = cfg.mass_floor_scale * plan.row_mass.max()
        report.update(
            valid_rows=int((plan.row_mass > floor).sum()),
            total_rows=int(plan.row_mass.shape[0]),
        )
        if args.dump_plan:
            write_plan(args.dump_plan, plan)
            report["plan_path"] = str(args.dump_plan)

    if not args.no_icp:
        refined = icp(src_ds, tgt_ds, pose, cfg.icp_params())
        pose = refined.pose
        report.update(icp_fitness=refined.fitness,
                      icp_rmse=refined.inlier_rmse,
                      icp_iterations=refined.iterations_used,
                      icp_converged=refined.converged)

    report["pose"] = [float(v) for v in pose.kitti_row()]
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    print(f"method: {report['method']}")
    _print_pose_line(pose)
    for key in ("fitness", "inlier_rmse", "iterations", "converged",
                "valid_rows", "total_rows", "plan_path", "icp_fitness",
                "icp_rmse", "icp_iterations", "icp_converged"):
        if key in report:
            print(f"{key}: {report[key]}")
    return 0


# ---------------------------------------------------------------------------
# detect


def _fit_vlad_on_sequence(seq, cfg: RunConfig, max_scans: int = 20):
    picks = np.unique(np.linspace(0, len(seq) - 1,
                                  min(max_scans, len(seq))).round()
                      .astype(int))
    train = []
    for i in picks:
        ds = voxel_downsample(seq.scan(int(i)), cfg.voxel_spec())
        kp = farthest_point_sampling(ds, cfg.n_keypoints)
        train.append(extract_features(ds, kp, cfg.feature_spec(),
                                      workers=cfg.threads))
    return fit_vlad_params(train, k=cfg.vlad_clusters,
                           output_dim=cfg.descriptor_dim, seed=cfg.seed,
                           alpha=cfg.vlad_alpha)


def cmd_detect(args) -> int:
    cfg = _build_config(args)
    scan_dir = _require_dir(args.scan_dir, "scan directory")
    poses_path = _require_file(args.poses, "pose file")
    seq = _load(ingest.ScanSequence.from_kitti, scan_dir, poses_path)

    if args.vlad_params is not None:
        params = _load(read_vlad_params,
                       _require_file(args.vlad_params, "descriptor params"))
    else:
        print("fitting descriptor parameters on the sequence")
        params = _fit_vlad_on_sequence(seq, cfg)

    closer = LoopCloser(params, cfg.lcd_config())
    rows = []
    counts = {"scans": len(seq), "candidates": 0, "accepted": 0,
              "threshold": 0, "consistency": 0, "failures": 0}
    for i in range(len(seq)):
        try:
            det = closer.process_scan(i, seq.scan(i))
        except Exception as exc:  # keep streaming past bad scans
            print(f"scan {i} failed: {exc}", file=sys.stderr)
            counts["failures"] += 1
            rows.append((i, None))
            continue
        rows.append((i, det))
        if det is not None:
            counts["candidates"] += 1
            if det.accepted:
                counts["accepted"] += 1
            else:
                counts[det.reject_reason] += 1

    write_detections(args.out, rows)
    if args.descriptors_out:
        write_database(args.descriptors_out, closer.database)
        print(f"wrote descriptors to {args.descriptors_out}")
    print(f"scans: {counts['scans']}  candidates: {counts['candidates']}  "
          f"accepted: {counts['accepted']}  "
          f"threshold-rejected: {counts['threshold']}  "
          f"consistency-rejected: {counts['consistency']}  "
          f"failures: {counts['failures']}")
    print(f"wrote detections to {args.out}")
    if counts["failures"] > 0.1 * len(seq):
        print(f"{counts['failures']} of {len(seq)} scans failed",
              file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    poses = _load(ingest.read_poses, _require_file(args.poses, "pose file"))
    gt = ingest.build_loop_groundtruth(poses, loop_radius=cfg.loop_radius,
                                       exclusion_window=cfg.exclusion)

    if args.protocol == 1:
        if args.detections is None:
            raise UsageError("protocol 1 needs --detections")
        rows = _load(read_detections,
                     _require_file(args.detections, "detection log"))
        if any(idx >= len(poses) for idx, _ in rows):
            raise UsageError("detection log indices exceed the pose file")
        queries = [idx for idx, _ in rows]
        candidates = []
        results = []
        for idx, det in rows:
            if det is None:
                continue
            candidates.append(ScoredPair(
                det.query_index, det.matched_index,
                -det.descriptor_distance,
                (det.query_index, det.matched_index) in gt.pairs))
            if det.accepted:
                truth = compose(inverse(poses[det.matched_index]),
                                poses[det.query_index])
                err = pose_error(det.pose, truth)
                results.append((err, success_check(err)))
        curve = protocol1(queries, candidates, gt)
        stats = registration_stats(results) if results else None
    else:
        if args.descriptors is None:
            raise UsageError("protocol 2 needs --descriptors")
        db = _load(read_database,
                   _require_file(args.descriptors, "descriptor store"))
        entries = [db.entry(i) for i in range(len(db))]
        if [idx for idx, _ in entries] != list(range(len(poses))):
            raise UsageError("descriptor store indices do not match the "
                             "pose file")
        vectors = np.stack([d.vector for _, d in entries])
        curve = protocol2(score_all_pairs(vectors, gt))
        stats = None

    csv_path, svg_path = emit_report(curve, stats=stats, path=args.out)
    if curve.n_positives == 0:
        print("no positives in groundtruth; empty report")
    else:
        print(f"AP: {curve.ap!r}  positives: {curve.n_positives}")
    print(f"wrote report to {csv_path}")
    if svg_path:
        print(f"wrote plot to {svg_path}")
    return 0


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    cfg = _build_config(args)
    try:
        spec = ingest.TrajectorySpec(n_scans=args.scans,
                                     same_dir_revisits=args.same_dir,
                                     reverse_revisits=args.reverse)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data = ingest.generate_trajectory(spec, cfg.seed)
    out_dir = Path(args.out_dir)
    scan_dir = out_dir / "velodyne"
    scan_dir.mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(data.clouds):
        ingest.write_scan(scan_dir / f"{i:06d}.bin", cloud)
    ingest.write_poses(out_dir / "poses.txt", data.poses)
    print(f"wrote {len(data.clouds)} scans to {scan_dir}")
    print(f"wrote poses to {out_dir / 'poses.txt'}")
    print(f"revisits: {len(data.same_dir_queries)} same-direction, "
          f"{len(data.reverse_queries)} reverse")
    return 0


# ---------------------------------------------------------------------------
# fit-vlad


def cmd_fit_vlad(args) -> int:
    cfg = _build_config(args)
    scan_dir = _require_dir(args.scan_dir, "scan directory")
    paths = sorted(scan_dir.glob("*.bin"))
    if not paths:
        raise UsageError(f"no .bin scans found in {scan_dir}")
    picks = np.unique(np.linspace(0, len(paths) - 1,
                                  min(args.max_scans, len(paths))).round()
                      .astype(int))
    train = []
    for i in picks:
        _, feats = _describe_scan(paths[int(i)], cfg)
        train.append(feats)
    params = fit_vlad_params(train, k=cfg.vlad_clusters,
                             output_dim=cfg.descriptor_dim, seed=cfg.seed,
                             alpha=cfg.vlad_alpha)
    write_vlad_params(args.out, params)
    print(f"fit {params.n_clusters} clusters over {len(train)} scans; "
          f"output dim {params.output_dim}")
    print(f"wrote descriptor params to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("-o", "--opt", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--threads", type=int,
                        help="worker threads for neighbor queries; results "
                             "do not depend on this")

    parser = argparse.ArgumentParser(
        prog="lidarloop",
        description="Loop closure detection and point cloud registration.",
        epilog="config keys (set via --config file or -o key=value):\n"
               + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_command(name, **kwargs):
        return sub.add_parser(
            name, parents=[common],
            formatter_class=argparse.RawDescriptionHelpFormatter, **kwargs)

    p = add_command("register", help="register one scan to another")
    p.add_argument("source", help="source scan (.bin)")
    p.add_argument("target", help="target scan (.bin)")
    p.add_argument("--method", choices=("ransac", "fast"), default="ransac")
    p.add_argument("--no-icp", action="store_true",
                   help="skip ICP refinement")
    p.add_argument("--dump-plan", metavar="PATH",
                   help="write the transport plan (fast method only)")
    p.add_argument("--json", action="store_true",
                   help="machine-readable report")
    p.set_defaults(func=cmd_register)

    p = add_command("detect", help="run loop detection over a sequence")
    p.add_argument("scan_dir", help="directory of .bin scans")
    p.add_argument("poses", help="pose file (12 numbers per line)")
    p.add_argument("--out", default="detections.csv",
                   help="detection log path")
    p.add_argument("--vlad-params", metavar="PATH",
                   help="descriptor params from fit-vlad (default: fit on "
                        "the sequence)")
    p.add_argument("--descriptors-out", metavar="PATH",
                   help="also write the descriptor database")
    p.set_defaults(func=cmd_detect)

    p = add_command("eval", help="score a run against groundtruth")
    p.add_argument("poses", help="groundtruth pose file")
    p.add_argument("--protocol", type=int, choices=(1, 2), required=True)
    p.add_argument("--detections", metavar="PATH",
                   help="detection log (protocol 1)")
    p.add_argument("--descriptors", metavar="PATH",
                   help="descriptor database (protocol 2)")
    p.add_argument("--out", default="report.csv", help="report CSV path")
    p.set_defaults(func=cmd_eval)

    p = add_command("synth", help="generate a synthetic trajectory")
    p.add_argument("out_dir", help="output directory")
    p.add_argument("--scans", type=int, default=300)
    p.add_argument("--same-dir", type=int, default=20,
                   help="same-direction revisit count")
    p.add_argument("--reverse", type=int, default=20,
                   help="reverse revisit count")
    p.set_defaults(func=cmd_synth)

    p = add_command("fit-vlad", help="fit descriptor parameters")
    p.add_argument("scan_dir", help="directory of .bin scans")
    p.add_argument("--out", default="vlad_params.bin",
                   help="output params path")
    p.add_argument("--max-scans", type=int, default=20,
                   help="training scans, sampled evenly")
    p.set_defaults(func=cmd_fit_vlad)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
