"""Descriptor losses: hardest quadruplet contrastive loss, matchability index,
exponential likelihood and the probabilistic detection loss.

All functions are plain numerical evaluations over given descriptor arrays.
D is the Euclidean distance. A hinge over an empty negative set is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from kdd_loam import parallel
from kdd_loam.data_types import FeatureSet, PointCloud
from kdd_loam.errors import (
    EmptyCorrespondences,
    EmptyNegatives,
    EmptyResult,
    LengthMismatch,
    NonPositiveSigma,
)

DEFAULT_POSITIVE_MARGIN = 0.1
DEFAULT_NEGATIVE_MARGIN = 1.4
DEFAULT_LAMBDA_P = 1.0

# Anchors per block of the hardest-negative search.
NEGATIVE_BLOCK = 64


@dataclass(frozen=True, eq=False)
class TrainingPair:
    cloud_p: PointCloud
    cloud_q: PointCloud
    desc_p: FeatureSet
    desc_q: FeatureSet
    r_p: float
    r_n: float

    def __post_init__(self) -> None:
        if not self.r_n >= self.r_p > 0:
            raise ValueError("Radii must satisfy R_n >= R_p > 0")
        if len(self.desc_p) != len(self.cloud_p) or len(self.desc_q) != len(
            self.cloud_q
        ):
            raise LengthMismatch("Feature sets must match their clouds")


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Mutual pairs and, per pair, the negative sets of both anchors.

    Negative sets are stored by their complement: a point of the other cloud
    is a negative of an anchor when it is eligible and absent from the
    anchor's near indices (the points closer than R_n).
    """

    pairs: list[tuple[int, int]]
    near_p: list[NDArray[np.int64]] = field(default_factory=list)
    near_q: list[NDArray[np.int64]] = field(default_factory=list)
    eligible_p: NDArray[np.bool_] = field(default_factory=lambda: np.zeros(0, bool))
    eligible_q: NDArray[np.bool_] = field(default_factory=lambda: np.zeros(0, bool))

    @classmethod
    def from_negatives(
        cls,
        pairs: list[tuple[int, int]],
        negatives_p: list[ArrayLike],
        negatives_q: list[ArrayLike],
        n_p: int,
        n_q: int,
    ) -> CorrespondenceSet:
        """Set built from explicit negative lists over clouds of n_p and n_q."""
        return cls(
            pairs,
            [np.setdiff1d(np.arange(n_q), neg).astype(np.int64) for neg in negatives_p],
            [np.setdiff1d(np.arange(n_p), neg).astype(np.int64) for neg in negatives_q],
            np.ones(n_p, dtype=bool),
            np.ones(n_q, dtype=bool),
        )

    def __len__(self) -> int:
        return len(self.pairs)

    def negatives_p(self, row: int) -> NDArray[np.int64]:
        """Indices into Q of the negatives of pair row's P anchor."""
        mask = np.array(self.eligible_q, dtype=bool)
        mask[self.near_p[row]] = False
        return np.flatnonzero(mask)

    def negatives_q(self, row: int) -> NDArray[np.int64]:
        mask = np.array(self.eligible_p, dtype=bool)
        mask[self.near_q[row]] = False
        return np.flatnonzero(mask)


def _descriptors(desc: FeatureSet | ArrayLike) -> NDArray[np.float64]:
    if isinstance(desc, FeatureSet):
        return np.asarray(desc.descriptors)
    return np.asarray(desc, dtype=np.float64)


def mutual_nearest(
    p: NDArray[np.float64], q: NDArray[np.float64], max_distance: float
) -> list[tuple[int, int]]:
    distance_pq, nn_pq = cKDTree(q).query(p, k=1)
    _, nn_qp = cKDTree(p).query(q, k=1)

    return [
        (i, int(j))
        for i, j in enumerate(nn_pq)
        if nn_qp[j] == i and distance_pq[i] <= max_distance
    ]


def _near_indices(
    tree: cKDTree,
    cloud: NDArray[np.float64],
    anchors: NDArray[np.float64],
    r_n: float,
) -> list[NDArray[np.int64]]:
    """Per anchor, the cloud indices strictly closer than r_n."""
    near = []
    for anchor, found in zip(anchors, tree.query_ball_point(anchors, r_n)):
        found = np.asarray(found, dtype=np.int64)
        near.append(found[np.linalg.norm(cloud[found] - anchor, axis=1) < r_n])
    return near


def build_correspondences(pair: TrainingPair) -> CorrespondenceSet:
    p = np.asarray(pair.cloud_p.positions)
    q = np.asarray(pair.cloud_q.positions)
    if not len(p) or not len(q):
        raise ValueError("Both clouds must be non-empty")

    valid_p, valid_q = pair.desc_p.valid, pair.desc_q.valid
    pairs = [
        (i, j) for i, j in mutual_nearest(p, q, pair.r_p) if valid_p[i] and valid_q[j]
    ]
    if not pairs:
        raise EmptyResult(f"No mutually nearest pair within {pair.r_p} m")

    anchors_p = p[[i for i, _ in pairs]]
    anchors_q = q[[j for _, j in pairs]]
    return CorrespondenceSet(
        pairs,
        _near_indices(cKDTree(q), q, anchors_p, pair.r_n),
        _near_indices(cKDTree(p), p, anchors_q, pair.r_n),
        np.array(valid_p, dtype=bool),
        np.array(valid_q, dtype=bool),
    )


def hardest_negatives(
    anchors: NDArray[np.float64],
    candidates: NDArray[np.float64],
    eligible: NDArray[np.bool_],
    near: list[NDArray[np.int64]],
) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Per anchor descriptor, the closest eligible candidate outside its near set.

    Anchors without any negative get index -1 and distance inf. Ties go to
    the lower candidate index.
    """
    if not len(anchors):
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    if not len(candidates):
        return np.full(len(anchors), -1), np.full(len(anchors), np.inf)

    excluded = ~np.asarray(eligible, dtype=bool)

    def block(start: int, stop: int) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
        distances = cdist(anchors[start:stop], candidates)
        distances[:, excluded] = np.inf
        for row in range(start, stop):
            distances[row - start, near[row]] = np.inf
        k = np.argmin(distances, axis=1)
        best = distances[np.arange(stop - start), k]
        return np.where(np.isinf(best), -1, k), best

    blocks = parallel.map_blocks(block, len(anchors), block_size=NEGATIVE_BLOCK)
    return (
        np.concatenate([k for k, _ in blocks]),
        np.concatenate([d for _, d in blocks]),
    )


def _pair_hardest(
    cs: CorrespondenceSet, dp: NDArray[np.float64], dq: NDArray[np.float64]
) -> tuple[NDArray[np.int64], NDArray[np.float64], NDArray[np.int64], NDArray]:
    rows_p = np.array([i for i, _ in cs.pairs], dtype=np.int64)
    rows_q = np.array([j for _, j in cs.pairs], dtype=np.int64)
    k_p, hardest_p = hardest_negatives(dp[rows_p], dq, cs.eligible_q, cs.near_p)
    k_q, hardest_q = hardest_negatives(dq[rows_q], dp, cs.eligible_p, cs.near_q)
    return k_p, hardest_p, k_q, hardest_q


def _hardest(
    anchor: NDArray[np.float64], negatives: NDArray[np.float64]
) -> tuple[int, float]:
    if not len(negatives):
        return -1, np.inf
    distances = np.linalg.norm(negatives - anchor, axis=1)
    k = int(np.argmin(distances))
    return k, float(distances[k])


def matchability_index(
    d_i: ArrayLike,
    d_j: ArrayLike,
    negatives: ArrayLike,
    m_p: float = DEFAULT_POSITIVE_MARGIN,
    m_n: float = DEFAULT_NEGATIVE_MARGIN,
) -> float:
    if not 0 <= m_p < m_n:
        raise ValueError("Margins must satisfy 0 <= m_p < m_n")

    negatives = np.reshape(np.asarray(negatives, dtype=np.float64), (-1, np.size(d_i)))
    if not len(negatives):
        raise EmptyNegatives("Matchability needs at least one negative")

    d_i = np.asarray(d_i, dtype=np.float64)
    positive = float(np.linalg.norm(d_i - np.asarray(d_j, dtype=np.float64)))
    _, hardest = _hardest(d_i, negatives)

    return max(positive - m_p, 0.0) + max(m_n - hardest, 0.0)


def matchability_values(
    cs: CorrespondenceSet,
    desc_p: FeatureSet | ArrayLike,
    desc_q: FeatureSet | ArrayLike,
    m_p: float = DEFAULT_POSITIVE_MARGIN,
    m_n: float = DEFAULT_NEGATIVE_MARGIN,
) -> NDArray[np.float64]:
    """(|C|, 2) matchability indices of both anchors of every pair."""
    if not len(cs):
        return np.zeros((0, 2))

    dp, dq = _descriptors(desc_p), _descriptors(desc_q)
    _, hardest_p, _, hardest_q = _pair_hardest(cs, dp, dq)
    positive = np.maximum(_positive_distances(cs, dp, dq) - m_p, 0.0)

    return np.stack(
        [
            positive + np.maximum(m_n - hardest_p, 0.0),
            positive + np.maximum(m_n - hardest_q, 0.0),
        ],
        axis=1,
    )


def _positive_distances(
    cs: CorrespondenceSet, dp: NDArray[np.float64], dq: NDArray[np.float64]
) -> NDArray[np.float64]:
    rows_p = [i for i, _ in cs.pairs]
    rows_q = [j for _, j in cs.pairs]
    return np.linalg.norm(dp[rows_p] - dq[rows_q], axis=1)


def contrastive_loss(
    cs: CorrespondenceSet,
    desc_p: FeatureSet | ArrayLike,
    desc_q: FeatureSet | ArrayLike,
    lambda_p: float = DEFAULT_LAMBDA_P,
    m_p: float = DEFAULT_POSITIVE_MARGIN,
    m_n: float = DEFAULT_NEGATIVE_MARGIN,
) -> float:
    if not len(cs):
        raise EmptyCorrespondences("Contrastive loss needs at least one pair")

    dp, dq = _descriptors(desc_p), _descriptors(desc_q)
    _, hardest_p, _, hardest_q = _pair_hardest(cs, dp, dq)
    positive = _positive_distances(cs, dp, dq)

    terms = (
        lambda_p * np.maximum(positive - m_p, 0.0)
        + np.maximum(m_n - hardest_p, 0.0)
        + np.maximum(m_n - hardest_q, 0.0)
    )
    return float(np.mean(terms))


def contrastive_loss_gradient(
    cs: CorrespondenceSet,
    desc_p: FeatureSet | ArrayLike,
    desc_q: FeatureSet | ArrayLike,
    lambda_p: float = DEFAULT_LAMBDA_P,
    m_p: float = DEFAULT_POSITIVE_MARGIN,
    m_n: float = DEFAULT_NEGATIVE_MARGIN,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Subgradient w.r.t. every descriptor entry; inactive hinges contribute 0."""
    if not len(cs):
        raise EmptyCorrespondences("Contrastive loss needs at least one pair")

    dp, dq = _descriptors(desc_p), _descriptors(desc_q)
    grad_p, grad_q = np.zeros_like(dp), np.zeros_like(dq)
    scale = 1.0 / len(cs)
    k_p, hardest_p, k_q, hardest_q = _pair_hardest(cs, dp, dq)

    def unit(a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
        diff = a - b
        norm = np.linalg.norm(diff)
        return diff / norm if norm > 0 else np.zeros_like(diff)

    for row, (i, j) in enumerate(cs.pairs):
        if np.linalg.norm(dp[i] - dq[j]) > m_p:
            g = lambda_p * scale * unit(dp[i], dq[j])
            grad_p[i] += g
            grad_q[j] -= g

        if hardest_p[row] < m_n:
            g = scale * unit(dp[i], dq[k_p[row]])
            grad_p[i] -= g
            grad_q[k_p[row]] += g

        if hardest_q[row] < m_n:
            g = scale * unit(dq[j], dp[k_q[row]])
            grad_q[j] -= g
            grad_p[k_q[row]] += g

    return grad_p, grad_q


def exp_likelihood(m: float, sigma: float) -> float:
    if sigma <= 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    if m < 0:
        raise ValueError("Matchability index must be non-negative")
    return float(np.exp(-m / sigma) / sigma)


def _check_detection_inputs(
    m_values: ArrayLike, sigma_values: ArrayLike
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    m = np.reshape(np.asarray(m_values, dtype=np.float64), (-1, 2))
    sigma = np.reshape(np.asarray(sigma_values, dtype=np.float64), (-1, 2))
    if m.shape != sigma.shape:
        raise LengthMismatch(f"{len(m)} index pairs for {len(sigma)} saliency pairs")
    if not len(m):
        raise EmptyCorrespondences("Detection loss needs at least one pair")
    if np.any(sigma <= 0):
        raise NonPositiveSigma("All saliency uncertainties must be positive")
    return m, sigma


def detection_loss(m_values: ArrayLike, sigma_values: ArrayLike) -> float:
    m, sigma = _check_detection_inputs(m_values, sigma_values)
    return float(np.sum(np.log(sigma) + m / sigma) / len(m))


def detection_loss_gradient(
    m_values: ArrayLike, sigma_values: ArrayLike
) -> NDArray[np.float64]:
    """d loss / d sigma, zero exactly where sigma equals m."""
    m, sigma = _check_detection_inputs(m_values, sigma_values)
    return (1.0 / sigma - m / sigma**2) / len(m)
