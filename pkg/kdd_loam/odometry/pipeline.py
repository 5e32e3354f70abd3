from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from kdd_loam import parallel
from kdd_loam.cloud import crop_by_range
from kdd_loam.data_types import FeatureSet, PointCloud, Pose
from kdd_loam.errors import (
    CountMismatch,
    EmptyResult,
    KddLoamError,
    NoConsensus,
    NoCorrespondences,
    NoValidDescriptors,
    PipelineFailure,
    SingularSystem,
    TooFewCandidates,
)
from kdd_loam.features import compute_builtin_features
from kdd_loam.icp import (
    IcpParams,
    ThresholdState,
    register_scan_to_map,
    update_threshold,
)
from kdd_loam.io.data_loading import FeatureSource, ScanSource, iter_scans
from kdd_loam.matching import match_descriptors, ransac_register
from kdd_loam.odometry.config import PipelineConfig
from kdd_loam.odometry.deskew import deskew
from kdd_loam.odometry.subsampling import (
    select_keypoints,
    subsample_stage1,
    subsample_stage2,
)
from kdd_loam.voxelmap import VoxelHashMap


@dataclass(frozen=True)
class StepReport:
    index: int
    wall_time: float
    memory_bytes: int
    points: int
    keypoints: int
    icp_iterations: int
    ransac_inliers: int
    fallback: bool


@dataclass
class OdometryState:
    map: VoxelHashMap
    threshold_state: ThresholdState
    trajectory: list[Pose] = field(default_factory=list)
    last_relative: Pose = field(default_factory=Pose.identity)
    previous_keypoints: PointCloud | None = None
    previous_features: FeatureSet | None = None
    last_step: StepReport | None = None

    @classmethod
    def initial(cls, config: PipelineConfig) -> OdometryState:
        voxel_map = VoxelHashMap(
            voxel_size=config.voxel_size,
            n_max=config.n_max,
            min_point_spacing=config.min_point_spacing,
            plane_rms_max=config.plane_rms_max,
            planarity_min=config.planarity_min,
            fit_surfels=config.fit_surfels,
        )
        return cls(voxel_map, ThresholdState.initial(config.tau_default))


@dataclass
class RunReport:
    steps: list[StepReport] = field(default_factory=list)

    @property
    def mean_wall_time(self) -> float:
        return float(np.mean([s.wall_time for s in self.steps])) if self.steps else 0.0

    @property
    def mean_memory(self) -> float:
        if not self.steps:
            return 0.0
        return float(np.mean([s.memory_bytes for s in self.steps]))

    @property
    def fallbacks(self) -> int:
        return sum(s.fallback for s in self.steps)

    def lines(self) -> list[str]:
        lines = [
            "scan,wall_time_s,memory_bytes,points,keypoints,icp_iterations,"
            "ransac_inliers,fallback"
        ]
        lines += [
            f"{s.index},{s.wall_time:.6f},{s.memory_bytes},{s.points},{s.keypoints},"
            f"{s.icp_iterations},{s.ransac_inliers},{int(s.fallback)}"
            for s in self.steps
        ]
        lines += [
            f"mean_wall_time_s={self.mean_wall_time:.6f}",
            f"mean_memory_bytes={self.mean_memory:.1f}",
            f"fallbacks={self.fallbacks}",
        ]
        return lines

    def write(self, path: str) -> None:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w") as f:
            f.write("\n".join(self.lines()) + "\n")


def _prepare(
    raw_scan: PointCloud,
    features: FeatureSet | None,
    state: OdometryState,
    config: PipelineConfig,
) -> tuple[PointCloud, FeatureSet]:
    """Crop, deskew and voxelize the scan; attach saliency from the provider."""
    cloud = raw_scan
    if features is not None:
        if len(features) != len(raw_scan):
            raise CountMismatch(
                f"{len(features)} feature records for {len(raw_scan)} scan points"
            )
        cloud = raw_scan.with_descriptor_ref(np.arange(len(raw_scan)))

    cloud = crop_by_range(cloud, config.min_range, config.max_range)
    if not len(cloud):
        raise EmptyResult("No scan point inside the range window")

    cloud = deskew(cloud, state.last_relative)
    cloud = subsample_stage1(cloud, config.alpha * config.voxel_size)

    if features is None:
        fs = compute_builtin_features(
            cloud, radius=config.descriptor_radius, bins=config.descriptor_bins
        )
    else:
        fs = features.select(np.asarray(cloud.descriptor_ref))

    cloud = cloud.with_saliency(fs.saliency).with_descriptor_ref(np.arange(len(cloud)))
    return cloud, fs


def _scan_to_scan(
    keypoints: PointCloud,
    keypoint_features: FeatureSet,
    state: OdometryState,
    config: PipelineConfig,
    index: int,
) -> tuple[Pose, int, bool]:
    """Relative motion to the previous scan, or the constant-velocity guess."""
    if state.previous_keypoints is None or state.previous_features is None:
        return state.last_relative, 0, True

    try:
        candidates = match_descriptors(
            keypoint_features, state.previous_features, config.match_mode
        )
        result = ransac_register(
            candidates,
            keypoints,
            state.previous_keypoints,
            max_iterations=config.ransac_max_iterations,
            inlier_threshold=config.ransac_inlier_threshold,
            confidence=config.ransac_confidence,
            seed=config.seed + index,
        )
    except (NoValidDescriptors, TooFewCandidates, NoConsensus) as e:
        logging.warning(f"Scan {index}: scan-to-scan failed ({e}), using motion prior")
        return state.last_relative, 0, True

    return result.pose, len(result.inlier_indices), False


def process_scan(
    state: OdometryState,
    raw_scan: PointCloud,
    features: FeatureSet | None,
    config: PipelineConfig,
    index: int | None = None,
) -> tuple[OdometryState, Pose]:
    if not len(raw_scan):
        raise EmptyResult("Cannot process an empty scan")

    started = time.perf_counter()
    index = len(state.trajectory) if index is None else index

    cloud, fs = _prepare(raw_scan, features, state, config)

    keypoints = subsample_stage2(
        cloud,
        config.beta * config.voxel_size,
        config.saliency_keep_fraction,
        config.k_salient,
    )
    selected = select_keypoints(keypoints, config.ransac_max_keypoints)
    match_cloud = keypoints.select(selected)
    match_features = fs.select(np.asarray(match_cloud.descriptor_ref))

    icp_iterations, inliers, fallback = 0, 0, False
    if not state.trajectory:
        pose = Pose.identity()
    else:
        relative, inliers, fallback = _scan_to_scan(
            match_cloud, match_features, state, config, index
        )
        initial = state.trajectory[-1].compose(relative)

        params = IcpParams(
            config.icp_max_iterations, config.icp_convergence, config.icp_max_halvings
        )
        try:
            pose, icp_report = register_scan_to_map(
                keypoints, state.map, initial, state.threshold_state, params
            )
            icp_iterations = icp_report.n_iterations
        except (NoCorrespondences, SingularSystem) as e:
            logging.warning(f"Scan {index}: scan-to-map failed ({e}), keeping guess")
            pose = initial
            fallback = True

        state.threshold_state = update_threshold(
            state.threshold_state,
            initial.inverse().compose(pose),
            config.max_range,
            delta_min=config.delta_min,
            tau_floor=config.tau_floor,
        )
        state.last_relative = state.trajectory[-1].inverse().compose(pose)

    state.map.insert_points(pose.apply(cloud.positions), sensor_origin=pose.translation)
    state.map.prune_beyond(pose.translation, config.max_range)

    state.trajectory.append(pose)
    state.previous_keypoints = match_cloud
    state.previous_features = match_features
    state.last_step = StepReport(
        index=index,
        wall_time=time.perf_counter() - started,
        memory_bytes=state.map.memory_usage(),
        points=len(cloud),
        keypoints=len(keypoints),
        icp_iterations=icp_iterations,
        ransac_inliers=inliers,
        fallback=fallback,
    )
    logging.info(
        f"Scan {index}: {len(cloud)} points, {len(keypoints)} keypoints, "
        f"tau {state.threshold_state.tau_t:.3f} m, map {len(state.map)} voxels"
    )
    return state, pose


def run_sequence(
    config: PipelineConfig,
    scans: ScanSource,
    features: FeatureSource | None = None,
) -> tuple[list[Pose], RunReport]:
    if not len(scans):
        raise EmptyResult("Scan source is empty")

    parallel.set_max_workers(config.threads)
    state = OdometryState.initial(config)
    report = RunReport()

    for index, (scan, fs) in enumerate(iter_scans(scans, features)):
        try:
            state, _ = process_scan(state, scan, fs, config, index)
        except KddLoamError as e:
            raise PipelineFailure(index, e) from e
        assert state.last_step is not None
        report.steps.append(state.last_step)

    logging.info(
        f"Processed {len(state.trajectory)} scans, mean "
        f"{report.mean_wall_time * 1000:.1f} ms per scan, "
        f"{report.mean_memory / 1e6:.2f} MB map"
    )
    return state.trajectory, report
