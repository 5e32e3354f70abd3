import numpy as np

from kdd_loam.data_types import PointCloud, Pose


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    return cloud.with_positions(pose.apply(cloud.positions))


def ranges(cloud: PointCloud) -> np.ndarray:
    return np.linalg.norm(cloud.positions, axis=1)


def crop_by_range(cloud: PointCloud, min_r: float, max_r: float) -> PointCloud:
    if not 0.0 <= min_r < max_r:
        raise ValueError(f"Invalid range window [{min_r}, {max_r}]")

    r = ranges(cloud)
    return cloud.select(np.flatnonzero((r >= min_r) & (r <= max_r)))
