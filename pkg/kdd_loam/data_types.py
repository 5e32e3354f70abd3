from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

Vector = NDArray[np.float64]
VoxelKey = tuple[int, int, int]

# Largest entry of |R^T R - I| a pose rotation may carry.
ROTATION_TOLERANCE = 1e-9


def frozen_array(
    values: ArrayLike, dtype: type = np.float64, shape: tuple[int, ...] | None = None
) -> NDArray:
    array = np.array(values, dtype=dtype)
    if shape is not None and array.shape != shape:
        raise ValueError(f"Expected shape {shape}, got {array.shape}")
    array.setflags(write=False)
    return array


def rotation_defect(rotation: ArrayLike) -> float:
    """Largest entry of |R^T R - I|, or inf when R is not a proper rotation."""
    r = np.asarray(rotation, dtype=np.float64)
    if not np.linalg.det(r) > 0.0:
        return float("inf")
    return float(np.max(np.abs(r.T @ r - np.eye(3))))


def nearest_rotation(matrix: ArrayLike) -> NDArray[np.float64]:
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    correction = np.diag([1.0, 1.0, 1.0 if np.linalg.det(u @ vt) >= 0 else -1.0])
    return u @ correction @ vt


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: Vector
    translation: Vector

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", frozen_array(self.rotation, shape=(3, 3)))
        object.__setattr__(
            self, "translation", frozen_array(self.translation, shape=(3,))
        )
        if not rotation_defect(self.rotation) <= ROTATION_TOLERANCE:
            raise ValueError("Pose rotation must be orthonormal with determinant +1")

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> Pose:
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape not in ((3, 4), (4, 4)):
            raise ValueError(f"Pose matrix must be 3x4 or 4x4, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, translation: ArrayLike) -> Pose:
        return cls(np.eye(3), translation)

    @classmethod
    def from_quaternion(cls, quaternion: ArrayLike, translation: ArrayLike) -> Pose:
        """Quaternion in scalar-last (x, y, z, w) order."""
        return cls(Rotation.from_quat(quaternion).as_matrix(), translation)

    def as_matrix(self) -> NDArray[np.float64]:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def as_quaternion(self) -> NDArray[np.float64]:
        return Rotation.from_matrix(self.rotation).as_quat()

    def compose(self, other: Pose) -> Pose:
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def angle(self) -> float:
        cos_angle = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(cos_angle, -1.0, 1.0)))

    def interpolate(self, fraction: float) -> Pose:
        """Scale the motion: rotation by angle-scaled axis, translation linearly."""
        rotvec = Rotation.from_matrix(self.rotation).as_rotvec()
        return Pose(
            Rotation.from_rotvec(fraction * rotvec).as_matrix(),
            fraction * self.translation,
        )


@dataclass(frozen=True, eq=False)
class Twist:
    rho: Vector
    phi: Vector

    def __post_init__(self) -> None:
        object.__setattr__(self, "rho", frozen_array(self.rho, shape=(3,)))
        object.__setattr__(self, "phi", frozen_array(self.phi, shape=(3,)))

    @classmethod
    def zero(cls) -> Twist:
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, xi: ArrayLike) -> Twist:
        v = np.asarray(xi, dtype=np.float64)
        if v.shape != (6,):
            raise ValueError(f"Twist vector must have 6 entries, got {v.shape}")
        return cls(v[:3], v[3:])

    def as_vector(self) -> NDArray[np.float64]:
        return np.concatenate([self.rho, self.phi])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_vector()))


@dataclass(frozen=True)
class Point:
    position: Vector
    timestamp: float = 1.0
    intensity: float | None = None


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: NDArray[np.float64]
    timestamps: NDArray[np.float64] | None = None
    intensity: NDArray[np.float64] | None = None
    saliency: NDArray[np.float64] | None = None
    descriptor_ref: NDArray[np.int64] | None = None

    def __post_init__(self) -> None:
        positions = frozen_array(np.reshape(self.positions, (-1, 3)))
        n = len(positions)
        object.__setattr__(self, "positions", positions)

        timestamps = np.ones(n) if self.timestamps is None else self.timestamps
        timestamps = frozen_array(timestamps, shape=(n,))
        if n and (timestamps.min() < 0.0 or timestamps.max() > 1.0):
            raise ValueError("Point timestamps must lie in [0, 1]")
        object.__setattr__(self, "timestamps", timestamps)

        if self.intensity is not None:
            object.__setattr__(
                self, "intensity", frozen_array(self.intensity, shape=(n,))
            )
        if self.saliency is not None:
            saliency = frozen_array(self.saliency, shape=(n,))
            if n and saliency.min() <= 0.0:
                raise ValueError("Saliency entries must be positive")
            object.__setattr__(self, "saliency", saliency)
        if self.descriptor_ref is not None:
            object.__setattr__(
                self,
                "descriptor_ref",
                frozen_array(self.descriptor_ref, dtype=np.int64, shape=(n,)),
            )

    @classmethod
    def from_points(cls, points: Iterable[Point]) -> PointCloud:
        points = list(points)
        intensity = None
        if points and all(p.intensity is not None for p in points):
            intensity = [p.intensity for p in points]
        return cls(
            positions=[p.position for p in points],
            timestamps=[p.timestamp for p in points],
            intensity=intensity,
        )

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, index: int) -> Point:
        intensity = None if self.intensity is None else float(self.intensity[index])
        return Point(self.positions[index], float(self.timestamps[index]), intensity)

    def select(self, indices: ArrayLike) -> PointCloud:
        idx = np.asarray(indices)

        def pick(channel: NDArray | None) -> NDArray | None:
            return None if channel is None else channel[idx]

        return PointCloud(
            positions=self.positions[idx],
            timestamps=self.timestamps[idx],
            intensity=pick(self.intensity),
            saliency=pick(self.saliency),
            descriptor_ref=pick(self.descriptor_ref),
        )

    def with_positions(self, positions: ArrayLike) -> PointCloud:
        return replace(self, positions=positions)

    def with_saliency(self, saliency: ArrayLike) -> PointCloud:
        return replace(self, saliency=saliency)

    def with_descriptor_ref(self, descriptor_ref: ArrayLike) -> PointCloud:
        return replace(self, descriptor_ref=descriptor_ref)


@dataclass(frozen=True, eq=False)
class FeatureSet:
    descriptors: NDArray[np.float64]
    saliency: NDArray[np.float64]
    valid: NDArray[np.bool_] | None = None

    def __post_init__(self) -> None:
        descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if descriptors.ndim != 2:
            raise ValueError("Descriptors must be an N x D matrix")
        n = len(descriptors)
        object.__setattr__(self, "descriptors", frozen_array(descriptors))

        saliency = frozen_array(self.saliency, shape=(n,))
        if n and saliency.min() <= 0.0:
            raise ValueError("Saliency entries must be positive")
        object.__setattr__(self, "saliency", saliency)

        norms = np.linalg.norm(descriptors, axis=1)
        valid = norms > 0.0 if self.valid is None else self.valid
        valid = frozen_array(valid, dtype=np.bool_, shape=(n,))
        if np.any(np.abs(norms[valid] - 1.0) > 1e-6):
            raise ValueError("Valid descriptor rows must have unit norm")
        object.__setattr__(self, "valid", valid)

    def __len__(self) -> int:
        return len(self.descriptors)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def select(self, indices: ArrayLike) -> FeatureSet:
        idx = np.asarray(indices)
        return FeatureSet(self.descriptors[idx], self.saliency[idx], self.valid[idx])


@dataclass(frozen=True, eq=False)
class Surfel:
    anchor: Vector
    normal: Vector
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "anchor", frozen_array(self.anchor, shape=(3,)))
        object.__setattr__(self, "normal", frozen_array(self.normal, shape=(3,)))


@dataclass
class PointList:
    points: list[Vector] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)

    def as_array(self) -> NDArray[np.float64]:
        return np.reshape(np.array(self.points, dtype=np.float64), (-1, 3))


MapData = dict[VoxelKey, PointList | Surfel]
