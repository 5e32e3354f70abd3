from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from kdd_loam import parallel
from kdd_loam.data_types import MapData, PointList, Surfel, VoxelKey
from kdd_loam.errors import NoSuchVoxel, NotFull

# Memory accounting, float32 payload: xyz per point; anchor, normal and radius
# per surfel; one int32 voxel coordinate triple of overhead per voxel.
POINT_BYTES = 3 * 4
SURFEL_BYTES = 7 * 4
VOXEL_OVERHEAD_BYTES = 3 * 4


def voxel_keys(points: ArrayLike, voxel_size: float) -> NDArray[np.int64]:
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def voxel_key(point: ArrayLike, voxel_size: float) -> VoxelKey:
    x, y, z = voxel_keys(np.reshape(point, (1, 3)), voxel_size)[0].tolist()
    return x, y, z


def voxel_center(key: VoxelKey | ArrayLike, voxel_size: float) -> NDArray[np.float64]:
    return (np.asarray(key, dtype=np.float64) + 0.5) * voxel_size


def ring_keys(center: VoxelKey, rings: int) -> Iterator[VoxelKey]:
    cx, cy, cz = center
    for dx, dy, dz in itertools.product(range(-rings, rings + 1), repeat=3):
        yield cx + dx, cy + dy, cz + dz


@dataclass
class InsertionReport:
    added: int = 0
    rejected_full: int = 0
    rejected_surfel: int = 0
    rejected_duplicate: int = 0
    surfels_fitted: int = 0


@dataclass(frozen=True)
class SurfelFit:
    fitted: bool
    residual: float
    planarity: float
    surfel: Surfel | None = None


@dataclass(frozen=True)
class _Snapshot:
    points: NDArray[np.float64]
    point_tree: cKDTree | None
    anchors: NDArray[np.float64]
    normals: NDArray[np.float64]
    surfel_tree: cKDTree | None


class VoxelHashMap:
    def __init__(
        self,
        voxel_size: float = 1.0,
        n_max: int = 20,
        min_point_spacing: float | None = None,
        plane_rms_max: float = 0.05,
        planarity_min: float = 0.75,
        fit_surfels: bool = True,
    ) -> None:
        if voxel_size <= 0 or n_max < 1:
            raise ValueError("Voxel size must be positive and n_max at least 1")

        self.voxel_size = voxel_size
        self.n_max = n_max
        self.min_point_spacing = (
            voxel_size / 10.0 if min_point_spacing is None else min_point_spacing
        )
        self.plane_rms_max = plane_rms_max
        self.planarity_min = planarity_min
        self.fit_surfels = fit_surfels

        self.data: MapData = {}
        self._snapshot: _Snapshot | None = None

    def __len__(self) -> int:
        return len(self.data)

    def __contains__(self, key: VoxelKey) -> bool:
        return key in self.data

    def items(self) -> Iterator[tuple[VoxelKey, PointList | Surfel]]:
        return iter(self.data.items())

    def insert_points(
        self, points: ArrayLike, sensor_origin: ArrayLike | None = None
    ) -> InsertionReport:
        pts = np.reshape(np.asarray(points, dtype=np.float64), (-1, 3))
        if not np.all(np.isfinite(pts)):
            raise ValueError("Cannot insert non-finite points")

        report = InsertionReport()
        keys = voxel_keys(pts, self.voxel_size).tolist()

        for point, (x, y, z) in zip(pts, keys):
            key = (x, y, z)
            voxel = self.data.get(key)

            if isinstance(voxel, Surfel):
                report.rejected_surfel += 1
                continue

            if voxel is None:
                voxel = self.data[key] = PointList()

            if len(voxel) >= self.n_max:
                report.rejected_full += 1
                continue

            if voxel.points and self.min_point_spacing > 0:
                spacing = np.linalg.norm(np.asarray(voxel.points) - point, axis=1)
                if spacing.min() < self.min_point_spacing:
                    report.rejected_duplicate += 1
                    continue

            voxel.points.append(point.copy())
            report.added += 1

            if self.fit_surfels and len(voxel) == self.n_max:
                if self.try_fit_surfel(key, sensor_origin).fitted:
                    report.surfels_fitted += 1

        self._snapshot = None
        return report

    def try_fit_surfel(
        self, key: VoxelKey, sensor_origin: ArrayLike | None = None
    ) -> SurfelFit:
        voxel = self.data.get(key)
        if voxel is None:
            raise NoSuchVoxel(f"No voxel at {key}")
        if isinstance(voxel, Surfel) or len(voxel) != self.n_max:
            raise NotFull(f"Voxel {key} does not hold exactly {self.n_max} points")

        pts = voxel.as_array()
        centered = pts - pts.mean(axis=0)
        eigenvalues, eigenvectors = np.linalg.eigh(centered.T @ centered / len(pts))
        l3, l2, l1 = np.clip(eigenvalues, 0.0, None)

        residual = float(np.sqrt(l3))
        planarity = float((l2 - l3) / l1) if l1 > 0 else 0.0

        if residual > self.plane_rms_max or planarity < self.planarity_min:
            return SurfelFit(False, residual, planarity)

        center = voxel_center(key, self.voxel_size)
        anchor = pts[np.argmin(np.linalg.norm(pts - center, axis=1))]

        normal = eigenvectors[:, 0] / np.linalg.norm(eigenvectors[:, 0])
        origin = np.zeros(3) if sensor_origin is None else np.asarray(sensor_origin)
        if normal @ (origin - anchor) < 0:
            normal = -normal

        surfel = Surfel(anchor, normal, self.voxel_size)
        self.data[key] = surfel
        self._snapshot = None

        return SurfelFit(True, residual, planarity, surfel)

    def _neighbour_voxels(
        self, query: NDArray[np.float64], max_dist: float
    ) -> Iterator[PointList | Surfel]:
        rings = math.ceil(max_dist / self.voxel_size)
        center = voxel_key(query, self.voxel_size)

        if (2 * rings + 1) ** 3 <= len(self.data):
            for key in ring_keys(center, rings):
                voxel = self.data.get(key)
                if voxel is not None:
                    yield voxel
        else:
            for key, voxel in self.data.items():
                if max(abs(a - b) for a, b in zip(key, center)) <= rings:
                    yield voxel

    def nearest_point(
        self, query: ArrayLike, max_dist: float
    ) -> tuple[NDArray[np.float64], float] | None:
        if max_dist <= 0:
            raise ValueError("max_dist must be positive")

        q = np.asarray(query, dtype=np.float64)
        blocks = [
            voxel.as_array()
            for voxel in self._neighbour_voxels(q, max_dist)
            if isinstance(voxel, PointList)
        ]
        if not blocks:
            return None

        candidates = np.concatenate(blocks)
        distances = np.linalg.norm(candidates - q, axis=1)
        best = int(np.argmin(distances))
        if distances[best] > max_dist:
            return None

        return candidates[best], float(distances[best])

    def nearest_surfel(
        self, query: ArrayLike, max_dist: float
    ) -> tuple[Surfel, float] | None:
        if max_dist <= 0:
            raise ValueError("max_dist must be positive")

        q = np.asarray(query, dtype=np.float64)
        surfels = [
            voxel
            for voxel in self._neighbour_voxels(q, max_dist)
            if isinstance(voxel, Surfel)
        ]
        if not surfels:
            return None

        distances = np.linalg.norm(np.array([s.anchor for s in surfels]) - q, axis=1)
        best = int(np.argmin(distances))
        if distances[best] > max_dist:
            return None

        return surfels[best], float(distances[best])

    def snapshot(self) -> _Snapshot:
        if self._snapshot is None:
            points = self.points()
            surfels = self.surfels()
            anchors = np.reshape(np.array([s.anchor for s in surfels]), (-1, 3))
            normals = np.reshape(np.array([s.normal for s in surfels]), (-1, 3))
            self._snapshot = _Snapshot(
                points=points,
                point_tree=cKDTree(points) if len(points) else None,
                anchors=anchors,
                normals=normals,
                surfel_tree=cKDTree(anchors) if len(anchors) else None,
            )
        return self._snapshot

    @staticmethod
    def _query_tree(
        tree: cKDTree | None, queries: NDArray[np.float64], max_dist: float
    ) -> tuple[NDArray[np.int64], NDArray[np.float64], NDArray[np.bool_]]:
        n = len(queries)
        if tree is None or n == 0:
            return np.zeros(n, dtype=np.int64), np.full(n, np.inf), np.zeros(n, bool)

        distances, indices = tree.query(
            queries,
            k=1,
            distance_upper_bound=np.nextafter(max_dist, np.inf),
            workers=parallel.max_workers(),
        )
        found = distances <= max_dist
        return np.where(found, indices, 0), distances, found

    def nearest_points(
        self, queries: ArrayLike, max_dist: float
    ) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.bool_]]:
        """Batched nearest_point: (points, distances, found mask)."""
        q = np.reshape(np.asarray(queries, dtype=np.float64), (-1, 3))
        snap = self.snapshot()
        indices, distances, found = self._query_tree(snap.point_tree, q, max_dist)
        targets = snap.points[indices] if len(snap.points) else np.zeros_like(q)
        return targets, distances, found

    def nearest_surfels(
        self, queries: ArrayLike, max_dist: float
    ) -> tuple[
        NDArray[np.float64], NDArray[np.float64], NDArray[np.float64], NDArray[np.bool_]
    ]:
        """Batched nearest_surfel: (anchors, normals, anchor distances, found mask)."""
        q = np.reshape(np.asarray(queries, dtype=np.float64), (-1, 3))
        snap = self.snapshot()
        indices, distances, found = self._query_tree(snap.surfel_tree, q, max_dist)
        if not len(snap.anchors):
            return np.zeros_like(q), np.zeros_like(q), distances, found
        return snap.anchors[indices], snap.normals[indices], distances, found

    def prune_beyond(self, center: ArrayLike, max_range: float) -> int:
        if max_range <= 0:
            raise ValueError("max_range must be positive")
        if not self.data:
            return 0

        keys = list(self.data)
        centers = voxel_center(keys, self.voxel_size)
        origin = np.asarray(center, dtype=np.float64)
        distances = np.linalg.norm(centers - origin, axis=1)

        removed = 0
        for key, distance in zip(keys, distances):
            if distance > max_range:
                del self.data[key]
                removed += 1

        if removed:
            self._snapshot = None
            logging.debug(f"Pruned {removed} voxels beyond {max_range} m")

        return removed

    def memory_usage(self, include_overhead: bool = True) -> int:
        total = 0
        for voxel in self.data.values():
            if isinstance(voxel, Surfel):
                total += SURFEL_BYTES
            else:
                total += POINT_BYTES * len(voxel)
            if include_overhead:
                total += VOXEL_OVERHEAD_BYTES
        return total

    def points(self) -> NDArray[np.float64]:
        blocks = [v.as_array() for v in self.data.values() if isinstance(v, PointList)]
        return np.concatenate(blocks) if blocks else np.zeros((0, 3))

    def surfels(self) -> list[Surfel]:
        return [v for v in self.data.values() if isinstance(v, Surfel)]


class PointGrid:
    """Read-only grid index over a fixed point array for radius neighbourhoods."""

    def __init__(self, positions: ArrayLike, resolution: float) -> None:
        if resolution <= 0:
            raise ValueError("Grid resolution must be positive")

        self.positions = np.reshape(np.asarray(positions, dtype=np.float64), (-1, 3))
        self.resolution = resolution
        self.buckets: dict[VoxelKey, NDArray[np.int64]] = {}

        if not len(self.positions):
            return

        keys = voxel_keys(self.positions, resolution)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        unique_keys, starts = np.unique(keys[order], axis=0, return_index=True)
        for key, members in zip(unique_keys.tolist(), np.split(order, starts[1:])):
            self.buckets[tuple(key)] = np.sort(members)

    def _candidates(self, key: VoxelKey, rings: int) -> NDArray[np.int64]:
        blocks = [
            self.buckets[k] for k in ring_keys(key, rings) if k in self.buckets
        ]
        return np.sort(np.concatenate(blocks)) if blocks else np.zeros(0, np.int64)

    def query_radius(self, center: ArrayLike, radius: float) -> NDArray[np.int64]:
        c = np.asarray(center, dtype=np.float64)
        rings = math.ceil(radius / self.resolution)
        candidates = self._candidates(voxel_key(c, self.resolution), rings)
        distances = np.linalg.norm(self.positions[candidates] - c, axis=1)
        return candidates[distances <= radius]

    def neighborhoods(self, radius: float) -> list[NDArray[np.int64]]:
        """Sorted neighbour indices (self included) of every point."""
        result: list[NDArray[np.int64]] = [np.zeros(0, np.int64)] * len(self.positions)
        rings = math.ceil(radius / self.resolution)

        for key, members in self.buckets.items():
            candidates = self._candidates(key, rings)
            offsets = (
                self.positions[members][:, None, :]
                - self.positions[candidates][None, :, :]
            )
            within = np.linalg.norm(offsets, axis=2) <= radius
            for row, member in enumerate(members):
                result[member] = candidates[within[row]]

        return result


def radius_neighbors(positions: ArrayLike, radius: float) -> list[NDArray[np.int64]]:
    return PointGrid(positions, radius / 2.0).neighborhoods(radius)
