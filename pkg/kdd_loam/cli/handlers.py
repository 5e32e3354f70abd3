import logging
import os

import numpy as np

from kdd_loam.cloud import crop_by_range, transform_cloud
from kdd_loam.data_types import FeatureSet, PointCloud, Pose
from kdd_loam.errors import (
    ConfigError,
    LengthMismatch,
    NoConsensus,
    NoValidDescriptors,
    TooFewCandidates,
)
from kdd_loam.eval import (
    MatchPair,
    evaluate_sequences,
    fmr_sweep,
    kitti_rpe,
    pair_metrics,
    registration_recall,
    report_lines,
)
from kdd_loam.features import compute_builtin_features, load_external_features
from kdd_loam.io.data_loading import FeatureSource, ScanSource, list_directory
from kdd_loam.io.map_export import write_map
from kdd_loam.io.matches import read_matches
from kdd_loam.io.poses import format_pose_line, read_poses, write_poses
from kdd_loam.io.scan import read_scan_bin
from kdd_loam.matchability import (
    TrainingPair,
    build_correspondences,
    contrastive_loss,
    detection_loss,
    matchability_values,
)
from kdd_loam.matching import MatchMode, match_descriptors, ransac_register
from kdd_loam.odometry.config import FeatureProvider, PipelineConfig
from kdd_loam.odometry.deskew import deskew
from kdd_loam.odometry.pipeline import OdometryState, run_sequence
from kdd_loam.odometry.subsampling import select_keypoints, subsample_stage1

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_PIPELINE_ERROR = 2

POSE_SUFFIX = ".txt"


def handle_run_odometry(
    config: PipelineConfig,
    scan_dir: str,
    out_trajectory: str,
    features_dir: str | None = None,
    out_report: str | None = None,
) -> int:
    scans = ScanSource.from_directory(scan_dir, config.clockwise)
    if not len(scans):
        raise ConfigError(f"No scans found in {scan_dir}")

    features = None
    if features_dir is not None:
        features = FeatureSource.from_directory(features_dir, scans)
    elif config.feature_provider is FeatureProvider.EXTERNAL:
        raise ConfigError("feature_provider = external needs --features-dir")

    trajectory, report = run_sequence(config, scans, features)

    write_poses(out_trajectory, trajectory)
    if out_report is not None:
        report.write(out_report)

    print(f"scans={len(trajectory)} mean_wall_time_s={report.mean_wall_time:.6f}")
    return EXIT_OK


def _pair_features(
    scan: PointCloud,
    features_path: str | None,
    voxel_size: float,
    radius: float,
    bins: int,
) -> tuple[PointCloud, FeatureSet]:
    if features_path is not None:
        fs = load_external_features(features_path, len(scan))
        return scan.with_saliency(fs.saliency), fs

    cloud = subsample_stage1(scan, voxel_size)
    fs = compute_builtin_features(cloud, radius=radius, bins=bins)
    return cloud.with_saliency(fs.saliency), fs


def handle_register_pair(
    scan_a: str,
    scan_b: str,
    features_a: str | None = None,
    features_b: str | None = None,
    voxel_size: float = 0.25,
    descriptor_radius: float = 1.0,
    bins: int = 11,
    max_keypoints: int = 2000,
    mode: MatchMode = MatchMode.MUTUAL,
    max_iterations: int = 50_000,
    inlier_threshold: float = 0.6,
    confidence: float = 0.999,
    seed: int = 0,
) -> int:
    cloud_a, fs_a = _pair_features(
        read_scan_bin(scan_a), features_a, voxel_size, descriptor_radius, bins
    )
    cloud_b, fs_b = _pair_features(
        read_scan_bin(scan_b), features_b, voxel_size, descriptor_radius, bins
    )

    keep_a = select_keypoints(cloud_a, max_keypoints)
    keep_b = select_keypoints(cloud_b, max_keypoints)
    cloud_a, fs_a = cloud_a.select(keep_a), fs_a.select(keep_a)
    cloud_b, fs_b = cloud_b.select(keep_b), fs_b.select(keep_b)

    try:
        candidates = match_descriptors(fs_a, fs_b, mode)
        result = ransac_register(
            candidates,
            cloud_a,
            cloud_b,
            max_iterations=max_iterations,
            inlier_threshold=inlier_threshold,
            confidence=confidence,
            seed=seed,
        )
    except (NoValidDescriptors, TooFewCandidates, NoConsensus) as e:
        logging.error(f"Registration failed: {e}")
        return EXIT_PIPELINE_ERROR

    print(format_pose_line(result.pose))
    print(f"inliers={len(result.inlier_indices)} candidates={len(candidates)}")
    return EXIT_OK


def _sequence_files(gt_path: str, est_path: str) -> dict[str, tuple[str, str]]:
    """Pose files by sequence name; directories are paired by file name."""
    if os.path.isdir(gt_path):
        files = {}
        for path in list_directory(gt_path, POSE_SUFFIX):
            name = os.path.splitext(os.path.basename(path))[0]
            est_file = os.path.join(est_path, os.path.basename(path))
            if os.path.isfile(est_file):
                files[name] = (path, est_file)
            else:
                logging.warning(f"No estimate for sequence {name}, skipping")
        return files

    name = os.path.splitext(os.path.basename(gt_path))[0]
    return {name: (gt_path, est_path)}


def handle_eval_rpe(
    gt_path: str,
    est_path: str,
    exclude: list[str] | None = None,
    step: int = 1,
    out_lines: str | None = None,
) -> int:
    files = _sequence_files(gt_path, est_path)
    if not files:
        raise LengthMismatch(f"No sequence pairs between {gt_path} and {est_path}")

    sequences = {
        name: (read_poses(gt_file), read_poses(est_file))
        for name, (gt_file, est_file) in files.items()
    }

    if len(sequences) == 1 and not exclude:
        name, (gt, est) = next(iter(sequences.items()))
        reports = {name: kitti_rpe(gt, est, step=step)}
        for line in reports[name].lines():
            print(line)
    else:
        reports = evaluate_sequences(sequences, exclude or (), step=step)
        for name, report in reports.items():
            print(
                f"sequence={name} t_err={report.t_err:.6f} r_err={report.r_err:.6f}"
            )

    if out_lines is not None:
        with open(out_lines, "w") as f:
            f.write("\n".join(report_lines(reports)) + "\n")
    return EXIT_OK


def handle_eval_pair(
    gt_file: str, est_file: str, rte_max: float = 200.0, rre_max: float = 5.0
) -> int:
    gt, est = read_poses(gt_file), read_poses(est_file)
    if len(gt) != len(est):
        raise LengthMismatch(f"{len(gt)} ground-truth poses for {len(est)} estimates")

    metrics = [pair_metrics(g, e, rte_max, rre_max) for g, e in zip(gt, est)]
    for index, m in enumerate(metrics):
        print(
            f"pair={index} rte={m.rte:.6f} rre={m.rre:.6f} success={int(m.success)}"
        )
    print(f"rr={registration_recall(metrics):.6f}")
    return EXIT_OK


def handle_fmr_sweep(
    gt_file: str,
    match_files: list[str],
    tau_1_values: list[float],
    tau_2_values: list[float],
) -> int:
    poses = read_poses(gt_file)
    if len(poses) != len(match_files):
        raise LengthMismatch(f"{len(poses)} poses for {len(match_files)} match files")

    pairs = [
        MatchPair.from_arrays(*read_matches(path), pose)
        for path, pose in zip(match_files, poses)
    ]
    recalls = fmr_sweep(pairs, tau_1_values, tau_2_values)
    for (tau_1, tau_2), recall in recalls.items():
        print(f"tau1={tau_1:g} tau2={tau_2:g} fmr={recall:.6f}")
    return EXIT_OK


def handle_losses_check(
    cloud_a: str,
    cloud_b: str,
    features_a: str,
    features_b: str,
    gt_pose_file: str,
    r_p: float,
    r_n: float,
    m_p: float,
    m_n: float,
    lambda_p: float,
) -> int:
    poses = read_poses(gt_pose_file)
    if len(poses) != 1:
        raise LengthMismatch(f"{gt_pose_file}: expected one pose, got {len(poses)}")

    scan_a, scan_b = read_scan_bin(cloud_a), read_scan_bin(cloud_b)
    fs_a = load_external_features(features_a, len(scan_a))
    fs_b = load_external_features(features_b, len(scan_b))

    moved_a = transform_cloud(scan_a, poses[0])
    pair = TrainingPair(moved_a, scan_b, fs_a, fs_b, r_p, r_n)
    cs = build_correspondences(pair)

    contrastive = contrastive_loss(cs, fs_a, fs_b, lambda_p, m_p, m_n)
    m_values = matchability_values(cs, fs_a, fs_b, m_p, m_n)
    sigma = np.array([[fs_a.saliency[i], fs_b.saliency[j]] for i, j in cs.pairs])
    detection = detection_loss(m_values, sigma)

    print(
        f"contrastive={contrastive:.9g} detection={detection:.9g} "
        f"mean_matchability={float(np.mean(m_values)):.9g}"
    )
    return EXIT_OK


def handle_map_export(
    config: PipelineConfig, scan_dir: str, trajectory_file: str, out_map: str
) -> int:
    """Rebuild the map from scans placed at known poses and write it out."""
    scans = ScanSource.from_directory(scan_dir, config.clockwise)
    poses = read_poses(trajectory_file)
    if len(poses) != len(scans):
        raise LengthMismatch(f"{len(poses)} poses for {len(scans)} scans")

    voxel_map = OdometryState.initial(config).map
    previous = Pose.identity()
    for index, pose in enumerate(poses):
        scan = crop_by_range(scans.read(index), config.min_range, config.max_range)
        relative = previous.inverse().compose(pose) if index else Pose.identity()
        scan = deskew(scan, relative)
        scan = subsample_stage1(scan, config.alpha * config.voxel_size)
        voxel_map.insert_points(
            pose.apply(scan.positions), sensor_origin=pose.translation
        )
        voxel_map.prune_beyond(pose.translation, config.max_range)
        previous = pose

    write_map(out_map, voxel_map)
    print(
        f"voxels={len(voxel_map)} surfels={len(voxel_map.surfels())} "
        f"memory_bytes={voxel_map.memory_usage()}"
    )
    return EXIT_OK
