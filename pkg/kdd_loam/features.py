"""Per-point descriptors and saliency uncertainty.

The built-in provider is hand-crafted and rotation-invariant by construction:
three histograms over a radius neighbourhood (neighbour-normal angle to the
point normal, neighbour distance, angle between sampled neighbour-normal
pairs), concatenated and L2-normalised. The saliency proxy follows the local
surface variation, so planes score the maximum uncertainty and corners the
minimum. The external provider reads precomputed features from a sidecar.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from kdd_loam import parallel
from kdd_loam.data_types import FeatureSet, PointCloud
from kdd_loam.errors import CountMismatch, InsufficientNeighbors, SidecarError
from kdd_loam.io.sidecar import FeatureSidecarParser
from kdd_loam.voxelmap import PointGrid, radius_neighbors

MIN_NEIGHBORS = 5
MAX_NORMAL_PAIRS = 64
SIGMA_MIN = 0.05
SIGMA_MAX = 1.0
VARIATION_DEADBAND = 1e-6
DEFAULT_BINS = 11


@dataclass(frozen=True, eq=False)
class LocalFrameStats:
    centroid: NDArray[np.float64]
    eigenvalues: NDArray[np.float64]
    normal: NDArray[np.float64]


def _positions(cloud: PointCloud | ArrayLike) -> NDArray[np.float64]:
    if isinstance(cloud, PointCloud):
        return np.asarray(cloud.positions)
    return np.reshape(np.asarray(cloud, dtype=np.float64), (-1, 3))


def local_stats(
    cloud: PointCloud | ArrayLike,
    center_index: int,
    radius: float,
    sensor_origin: ArrayLike | None = None,
) -> LocalFrameStats:
    if radius <= 0:
        raise ValueError("Radius must be positive")

    positions = _positions(cloud)
    center = positions[center_index]
    neighbours = PointGrid(positions, radius / 2.0).query_radius(center, radius)
    if len(neighbours) < MIN_NEIGHBORS:
        raise InsufficientNeighbors(
            f"{len(neighbours)} points within {radius} m of point {center_index}"
        )

    pts = positions[neighbours]
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    eigenvalues, eigenvectors = np.linalg.eigh(centered.T @ centered / len(pts))

    normal = eigenvectors[:, 0]
    origin = np.zeros(3) if sensor_origin is None else np.asarray(sensor_origin)
    if normal @ (origin - center) < 0:
        normal = -normal

    return LocalFrameStats(centroid, np.clip(eigenvalues[::-1], 0.0, None), normal)


def saliency_from_eigenvalues(
    eigenvalues: ArrayLike, sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX
) -> NDArray[np.float64]:
    """Map descending eigenvalue triples to saliency uncertainty."""
    lam = np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None)
    lam = np.reshape(lam, (-1, 3))
    total = lam.sum(axis=1)
    variation = np.divide(
        3.0 * lam[:, 2], total, out=np.zeros(len(lam)), where=total > 0
    )
    variation = np.clip(variation, 0.0, 1.0)
    variation[variation < VARIATION_DEADBAND] = 0.0
    return sigma_min + (sigma_max - sigma_min) * (1.0 - variation)


def _histogram(values: NDArray[np.float64], bins: int) -> NDArray[np.float64]:
    counts, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    total = counts.sum()
    return counts / total if total else counts.astype(np.float64)


def compute_builtin_features(
    cloud: PointCloud | ArrayLike,
    radius: float = 1.0,
    bins: int = DEFAULT_BINS,
    sensor_origin: ArrayLike | None = None,
) -> FeatureSet:
    if radius <= 0:
        raise ValueError("Radius must be positive")
    if bins < 2:
        raise ValueError("At least two histogram bins are required")

    positions = _positions(cloud)
    n = len(positions)
    dim = 3 * bins - 1
    neighbourhoods = radius_neighbors(positions, radius)

    valid = np.array([len(nb) >= MIN_NEIGHBORS for nb in neighbourhoods], dtype=bool)
    covariances = np.zeros((n, 3, 3))
    for i in np.flatnonzero(valid):
        pts = positions[neighbourhoods[i]]
        centered = pts - pts.mean(axis=0)
        covariances[i] = centered.T @ centered / len(pts)

    eigenvalues, eigenvectors = np.linalg.eigh(covariances)
    normals = eigenvectors[:, :, 0]
    origin = np.zeros(3) if sensor_origin is None else np.asarray(sensor_origin)
    flip = np.einsum("ij,ij->i", normals, origin - positions) < 0
    normals[flip] *= -1.0

    saliency = saliency_from_eigenvalues(eigenvalues[:, ::-1])
    saliency[~valid] = SIGMA_MAX

    def describe(start: int, stop: int) -> NDArray[np.float64]:
        block = np.zeros((stop - start, dim))
        for row, i in enumerate(range(start, stop)):
            if not valid[i]:
                continue

            neighbours = neighbourhoods[i]
            others = neighbours[neighbours != i]
            distances = np.linalg.norm(positions[others] - positions[i], axis=1)
            order = np.argsort(distances, kind="stable")
            others, distances = others[order], distances[order]
            with_normal = others[valid[others]]

            normal_angle = np.abs(normals[with_normal] @ normals[i])
            sampled = with_normal[: MAX_NORMAL_PAIRS + 1]
            pair_angle = np.abs(
                np.einsum("ij,ij->i", normals[sampled[:-1]], normals[sampled[1:]])
            )

            descriptor = np.concatenate(
                [
                    _histogram(normal_angle, bins),
                    _histogram(distances / radius, bins),
                    _histogram(pair_angle, bins - 1),
                ]
            )
            norm = np.linalg.norm(descriptor)
            if norm > 0:
                block[row] = descriptor / norm

        return block

    blocks = parallel.map_blocks(describe, n, block_size=512)
    descriptors = np.concatenate(blocks) if blocks else np.zeros((0, dim))
    valid &= np.linalg.norm(descriptors, axis=1) > 0

    logging.debug(f"Built-in features: {valid.sum()}/{n} points described")
    return FeatureSet(descriptors, saliency, valid)


def load_external_features(path: str, expected_count: int | None = None) -> FeatureSet:
    descriptors, saliency = FeatureSidecarParser.load_from_file(path)

    if expected_count is not None and len(descriptors) != expected_count:
        raise CountMismatch(
            f"{path}: {len(descriptors)} feature records for {expected_count} points"
        )
    if len(saliency) and saliency.min() <= 0:
        raise SidecarError(f"{path}: saliency values must be positive")

    descriptors = descriptors.astype(np.float64)
    norms = np.linalg.norm(descriptors, axis=1)
    deviation = np.abs(norms - 1.0)
    nonzero = norms > 0

    drifted = nonzero & (deviation > 1e-6)
    if np.any(nonzero & (deviation > 1e-3)):
        logging.warning(
            f"{path}: re-normalizing {int(np.sum(nonzero & (deviation > 1e-3)))} "
            "descriptors that deviate from unit norm"
        )
    descriptors[drifted] /= norms[drifted, None]

    return FeatureSet(descriptors, saliency.astype(np.float64), nonzero)
