import numpy as np
from scipy.spatial.transform import Rotation

from kdd_loam.data_types import PointCloud, Pose


def deskew(scan: PointCloud, relative_motion: Pose) -> PointCloud:
    """Correct every point to the scan-end frame under constant velocity.

    A point stamped s is moved by relative_motion scaled to (s - 1); points
    stamped exactly 1 are returned untouched.
    """
    if not len(scan):
        return scan

    positions = np.asarray(scan.positions)
    fraction = np.asarray(scan.timestamps) - 1.0

    rotvec = Rotation.from_matrix(relative_motion.rotation).as_rotvec()
    rotations = Rotation.from_rotvec(fraction[:, None] * rotvec[None, :])
    moved = rotations.apply(positions) + fraction[:, None] * relative_motion.translation

    at_end = (fraction == 0.0)[:, None]
    return scan.with_positions(np.where(at_end, positions, moved))
