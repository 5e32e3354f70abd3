from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.typing import ArrayLike, NDArray

from kdd_loam import parallel
from kdd_loam.data_types import FeatureSet, PointCloud, Pose
from kdd_loam.errors import (
    DegenerateConfiguration,
    NoConsensus,
    NoValidDescriptors,
    TooFewCandidates,
)

MIN_SAMPLE = 3
MIN_TRIANGLE_AREA = 1e-6
COLLINEAR_TOLERANCE = 1e-9
HYPOTHESIS_BATCH = 256


class MatchMode(Enum):
    MUTUAL = "mutual"
    ONE_WAY = "one-way"


@dataclass(frozen=True)
class MatchCandidate:
    src_index: int
    dst_index: int
    desc_distance: float


@dataclass(frozen=True, eq=False)
class RansacResult:
    pose: Pose
    inlier_indices: list[int]
    iterations_run: int


def _nearest_rows(
    queries: NDArray[np.float64], targets: NDArray[np.float64]
) -> NDArray[np.int64]:
    """Exhaustive nearest target row for every query row, lowest index on ties."""
    target_sq = np.einsum("ij,ij->i", targets, targets)

    def scan(start: int, stop: int) -> NDArray[np.int64]:
        block = queries[start:stop]
        sq = target_sq[None, :] - 2.0 * block @ targets.T
        return np.argmin(sq, axis=1)

    blocks = parallel.map_blocks(scan, len(queries), block_size=1024)
    return np.concatenate(blocks) if blocks else np.zeros(0, np.int64)


def match_descriptors(
    fs_src: FeatureSet, fs_dst: FeatureSet, mode: MatchMode = MatchMode.MUTUAL
) -> list[MatchCandidate]:
    src_ids = np.flatnonzero(fs_src.valid)
    dst_ids = np.flatnonzero(fs_dst.valid)
    if not len(src_ids) or not len(dst_ids):
        raise NoValidDescriptors("Both feature sets need matchable descriptors")

    src = np.asarray(fs_src.descriptors)[src_ids]
    dst = np.asarray(fs_dst.descriptors)[dst_ids]

    forward = _nearest_rows(src, dst)
    rows = np.arange(len(src))
    if mode is MatchMode.MUTUAL:
        backward = _nearest_rows(dst, src)
        rows = rows[backward[forward] == rows]

    distances = np.linalg.norm(src[rows] - dst[forward[rows]], axis=1)
    return [
        MatchCandidate(int(src_ids[r]), int(dst_ids[forward[r]]), float(d))
        for r, d in zip(rows, distances)
    ]


def _kabsch_batch(
    src: NDArray[np.float64], dst: NDArray[np.float64]
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Rotations (B, 3, 3) and translations (B, 3) for stacked (B, K, 3) pairs."""
    src_mean = src.mean(axis=1, keepdims=True)
    dst_mean = dst.mean(axis=1, keepdims=True)
    h = np.swapaxes(src - src_mean, 1, 2) @ (dst - dst_mean)
    u, _, vt = np.linalg.svd(h)

    d = np.sign(np.linalg.det(np.swapaxes(vt, 1, 2) @ np.swapaxes(u, 1, 2)))
    d[d == 0] = 1.0
    correction = np.tile(np.eye(3), (len(src), 1, 1))
    correction[:, 2, 2] = d

    rotations = np.swapaxes(vt, 1, 2) @ correction @ np.swapaxes(u, 1, 2)
    translations = dst_mean[:, 0] - np.einsum("bij,bj->bi", rotations, src_mean[:, 0])
    return rotations, translations


def kabsch_svd(src_points: ArrayLike, dst_points: ArrayLike) -> Pose:
    src = np.reshape(np.asarray(src_points, dtype=np.float64), (-1, 3))
    dst = np.reshape(np.asarray(dst_points, dtype=np.float64), (-1, 3))
    if src.shape != dst.shape:
        raise ValueError("Source and destination must be paired")
    if len(src) < MIN_SAMPLE:
        raise DegenerateConfiguration(f"Need at least 3 pairs, got {len(src)}")

    spread = np.linalg.svd(src - src.mean(axis=0), compute_uv=False)
    if spread[1] <= COLLINEAR_TOLERANCE * max(spread[0], 1.0):
        raise DegenerateConfiguration("Source points are collinear")

    rotations, translations = _kabsch_batch(src[None], dst[None])
    return Pose(rotations[0], translations[0])


def _positions(cloud: PointCloud | ArrayLike) -> NDArray[np.float64]:
    if isinstance(cloud, PointCloud):
        return np.asarray(cloud.positions)
    return np.reshape(np.asarray(cloud, dtype=np.float64), (-1, 3))


def _residuals(
    pose: Pose, src: NDArray[np.float64], dst: NDArray[np.float64]
) -> NDArray[np.float64]:
    return np.linalg.norm(pose.apply(src) - dst, axis=1)


def _rms(
    pose: Pose,
    src: NDArray[np.float64],
    dst: NDArray[np.float64],
    subset: NDArray[np.int64],
) -> float:
    return float(np.sqrt(np.mean(_residuals(pose, src[subset], dst[subset]) ** 2)))


def required_iterations(inlier_ratio: float, confidence: float) -> float:
    if inlier_ratio <= 0:
        return math.inf
    if inlier_ratio >= 1:
        return 1
    return math.log(1.0 - confidence) / math.log(1.0 - inlier_ratio**MIN_SAMPLE)


def ransac_register(
    candidates: list[MatchCandidate],
    src_cloud: PointCloud | ArrayLike,
    dst_cloud: PointCloud | ArrayLike,
    max_iterations: int = 50_000,
    inlier_threshold: float = 0.6,
    confidence: float = 0.999,
    seed: int = 0,
) -> RansacResult:
    if len(candidates) < MIN_SAMPLE:
        raise TooFewCandidates(f"Need at least 3 candidates, got {len(candidates)}")
    if not 0 < confidence < 1:
        raise ValueError("Confidence must lie in (0, 1)")

    src = _positions(src_cloud)[[c.src_index for c in candidates]]
    dst = _positions(dst_cloud)[[c.dst_index for c in candidates]]
    n = len(candidates)
    rng = np.random.default_rng(seed)

    best_count, best_rotation, best_translation = 0, None, None
    iterations = 0

    while iterations < max_iterations:
        batch = min(HYPOTHESIS_BATCH, max_iterations - iterations)
        samples = np.array(
            [rng.choice(n, MIN_SAMPLE, replace=False) for _ in range(batch)]
        )
        iterations += batch

        a, b, c = src[samples[:, 0]], src[samples[:, 1]], src[samples[:, 2]]
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        usable = area > MIN_TRIANGLE_AREA
        if np.any(usable):
            rotations, translations = _kabsch_batch(
                src[samples[usable]], dst[samples[usable]]
            )
            moved = np.einsum("bij,nj->bni", rotations, src) + translations[:, None, :]
            counts = np.sum(
                np.linalg.norm(moved - dst[None], axis=2) <= inlier_threshold, axis=1
            )

            winner = int(np.argmax(counts))
            if counts[winner] > best_count:
                best_count = int(counts[winner])
                best_rotation = rotations[winner]
                best_translation = translations[winner]

        if iterations >= required_iterations(best_count / n, confidence):
            break

    if best_count < MIN_SAMPLE or best_rotation is None:
        raise NoConsensus(f"Best hypothesis has {best_count} inliers")

    raw = Pose(best_rotation, best_translation)
    raw_inliers = np.flatnonzero(_residuals(raw, src, dst) <= inlier_threshold)

    try:
        refined = kabsch_svd(src[raw_inliers], dst[raw_inliers])
    except DegenerateConfiguration:
        refined = raw

    inliers = np.flatnonzero(_residuals(refined, src, dst) <= inlier_threshold)
    if len(inliers) < MIN_SAMPLE or _rms(refined, src, dst, inliers) > _rms(
        raw, src, dst, inliers
    ):
        refined, inliers = raw, raw_inliers

    logging.debug(f"RANSAC: {len(inliers)}/{n} inliers after {iterations} hypotheses")
    return RansacResult(refined, inliers.tolist(), iterations)
