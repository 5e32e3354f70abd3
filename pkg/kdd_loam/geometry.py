import numpy as np
from numpy.typing import ArrayLike, NDArray

from kdd_loam.data_types import Pose, Twist

SMALL_ANGLE = 1e-8


def hat(v: ArrayLike) -> NDArray[np.float64]:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array(
        [
            [0.0, -z, y],
            [z, 0.0, -x],
            [-y, x, 0.0],
        ]
    )


def hat_batch(vectors: ArrayLike) -> NDArray[np.float64]:
    """Stack of skew matrices for an (N, 3) array."""
    v = np.asarray(vectors, dtype=np.float64)
    m = np.zeros((len(v), 3, 3))
    m[:, 0, 1], m[:, 0, 2] = -v[:, 2], v[:, 1]
    m[:, 1, 0], m[:, 1, 2] = v[:, 2], -v[:, 0]
    m[:, 2, 0], m[:, 2, 1] = -v[:, 1], v[:, 0]
    return m


def so3_exp(phi: ArrayLike) -> NDArray[np.float64]:
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    k = hat(phi)

    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)

    return (
        np.eye(3)
        + (np.sin(theta) / theta) * k
        + ((1.0 - np.cos(theta)) / theta**2) * (k @ k)
    )


def se3_exp(xi: Twist) -> Pose:
    """Rotation exponential with the translational part applied additively.

    Left-multiplying a pose by the result gives R <- exp(hat(phi)) R and
    t <- exp(hat(phi)) t + rho.
    """
    return Pose(so3_exp(xi.phi), xi.rho)


def apply_update(pose: Pose, xi: Twist) -> Pose:
    return se3_exp(xi).compose(pose)


def rotation_angle(rotation: ArrayLike) -> float:
    cos_angle = (np.trace(np.asarray(rotation)) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos_angle, -1.0, 1.0)))


def deviation_bound(delta: Pose, r: float) -> float:
    """Upper bound of the displacement of any point within range r under delta."""
    if r <= 0:
        raise ValueError("Range r must be positive")

    theta = rotation_angle(delta.rotation)
    return float(np.linalg.norm(delta.translation) + 2.0 * r * np.sin(0.5 * theta))


def pose_error(reference: Pose, estimate: Pose) -> tuple[float, float]:
    """Translation (m) and rotation (rad) of reference^-1 * estimate."""
    delta = reference.inverse().compose(estimate)
    return float(np.linalg.norm(delta.translation)), delta.angle()
