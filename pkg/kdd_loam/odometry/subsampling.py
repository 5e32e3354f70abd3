import math

import numpy as np
from numpy.typing import NDArray

from kdd_loam.data_types import PointCloud
from kdd_loam.errors import MissingSaliency
from kdd_loam.voxelmap import voxel_center, voxel_keys


def _group_rank(keys: NDArray[np.int64], order: NDArray[np.int64]) -> NDArray[np.int64]:
    """Position of every sorted entry within its run of equal voxel keys."""
    sorted_keys = keys[order]
    starts = np.ones(len(order), dtype=bool)
    starts[1:] = np.any(sorted_keys[1:] != sorted_keys[:-1], axis=1)
    start_positions = np.maximum.accumulate(np.where(starts, np.arange(len(order)), 0))
    return np.arange(len(order)) - start_positions


def _center_distance(
    positions: NDArray[np.float64], keys: NDArray[np.int64], voxel_size: float
) -> NDArray[np.float64]:
    return np.linalg.norm(positions - voxel_center(keys, voxel_size), axis=1)


def subsample_stage1(cloud: PointCloud, alpha_v: float) -> PointCloud:
    """Keep the original point nearest each voxel center, lowest index on ties."""
    if alpha_v <= 0:
        raise ValueError("Voxel size must be positive")
    if not len(cloud):
        return cloud

    positions = np.asarray(cloud.positions)
    keys = voxel_keys(positions, alpha_v)
    distances = _center_distance(positions, keys, alpha_v)

    order = np.lexsort(
        (np.arange(len(positions)), distances, keys[:, 2], keys[:, 1], keys[:, 0])
    )
    chosen = order[_group_rank(keys, order) == 0]
    return cloud.select(np.sort(chosen))


def salient_order(cloud: PointCloud) -> NDArray[np.int64]:
    """Indices by ascending saliency uncertainty, lower index first on ties."""
    if cloud.saliency is None:
        raise MissingSaliency("Cloud carries no saliency channel")
    return np.lexsort((np.arange(len(cloud)), np.asarray(cloud.saliency)))


def subsample_stage2(
    cloud: PointCloud, beta_v: float, keep_fraction: float, k_salient: int
) -> PointCloud:
    if cloud.saliency is None:
        raise MissingSaliency("Stage-2 subsampling needs per-point saliency")
    if beta_v <= 0:
        raise ValueError("Voxel size must be positive")
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    if k_salient < 1:
        raise ValueError("k_salient must be at least 1")
    if not len(cloud):
        return cloud

    survivors = salient_order(cloud)[: math.ceil(keep_fraction * len(cloud))]

    positions = np.asarray(cloud.positions)[survivors]
    saliency = np.asarray(cloud.saliency)[survivors]
    keys = voxel_keys(positions, beta_v)
    distances = _center_distance(positions, keys, beta_v)

    order = np.lexsort(
        (survivors, distances, saliency, keys[:, 2], keys[:, 1], keys[:, 0])
    )
    kept = order[_group_rank(keys, order) < k_salient]
    return cloud.select(np.sort(survivors[kept]))


def select_keypoints(cloud: PointCloud, max_keypoints: int) -> NDArray[np.int64]:
    """Indices of at most max_keypoints most salient points, in cloud order."""
    if len(cloud) <= max_keypoints:
        return np.arange(len(cloud))
    return np.sort(salient_order(cloud)[:max_keypoints])
