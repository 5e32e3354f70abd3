from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator

import numpy as np
from numpy.typing import ArrayLike, NDArray

from kdd_loam.data_types import PointCloud, Pose, Twist
from kdd_loam.errors import NoCorrespondences, NonUnitNormal, SingularSystem
from kdd_loam.geometry import apply_update, deviation_bound, hat, hat_batch
from kdd_loam.voxelmap import VoxelHashMap

DEFAULT_TAU = 2.0
DEFAULT_TAU_FLOOR = 0.3
DEFAULT_DELTA_MIN = 0.1
SURFEL_ANCHOR_GATE = 3.0
UNIT_TOLERANCE = 1e-6
CONDITION_LIMIT = 1e12
LEVENBERG_MU = 1e-6
# Eigenvalue ratio below which the normal matrix counts as rank deficient.
RANK_TOLERANCE = 1e-14


class ResidualKind(Enum):
    POINT_TO_POINT = "point-to-point"
    POINT_TO_PLANE = "point-to-plane"


@dataclass(frozen=True)
class ThresholdState:
    deviations: tuple[float, ...]
    sigma_t: float
    tau_t: float

    @classmethod
    def initial(cls, tau_default: float = DEFAULT_TAU) -> ThresholdState:
        if tau_default <= 0:
            raise ValueError("Initial threshold must be positive")
        return cls((), tau_default / 3.0, tau_default)


def update_threshold(
    state: ThresholdState,
    delta_pose: Pose,
    r: float,
    delta_min: float = DEFAULT_DELTA_MIN,
    tau_floor: float = DEFAULT_TAU_FLOOR,
) -> ThresholdState:
    delta = deviation_bound(delta_pose, r)
    if delta < delta_min:
        return state

    deviations = state.deviations + (delta,)
    sigma = float(np.sqrt(np.mean(np.square(deviations))))
    tau = max(3.0 * sigma, tau_floor)
    return ThresholdState(deviations, tau / 3.0, tau)


@dataclass(frozen=True, eq=False)
class Correspondence:
    scan_point: NDArray[np.float64]
    world_point: NDArray[np.float64]
    target: NDArray[np.float64]
    residual_kind: ResidualKind
    distance: float
    normal: NDArray[np.float64] | None = None


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Column-wise correspondence set, ordered by scan index."""

    scan_points: NDArray[np.float64]
    world_points: NDArray[np.float64]
    targets: NDArray[np.float64]
    normals: NDArray[np.float64]
    is_plane: NDArray[np.bool_]
    distances: NDArray[np.float64]

    @classmethod
    def empty(cls) -> Correspondences:
        z = np.zeros((0, 3))
        return cls(z, z, z, z, np.zeros(0, dtype=bool), np.zeros(0))

    @classmethod
    def from_list(cls, items: list[Correspondence]) -> Correspondences:
        if not items:
            return cls.empty()
        return cls(
            scan_points=np.array([c.scan_point for c in items], dtype=np.float64),
            world_points=np.array([c.world_point for c in items], dtype=np.float64),
            targets=np.array([c.target for c in items], dtype=np.float64),
            normals=np.array(
                [np.zeros(3) if c.normal is None else c.normal for c in items],
                dtype=np.float64,
            ),
            is_plane=np.array(
                [c.residual_kind is ResidualKind.POINT_TO_PLANE for c in items]
            ),
            distances=np.array([c.distance for c in items], dtype=np.float64),
        )

    def __len__(self) -> int:
        return len(self.distances)

    def __iter__(self) -> Iterator[Correspondence]:
        for i in range(len(self)):
            plane = bool(self.is_plane[i])
            kind = ResidualKind.POINT_TO_PLANE if plane else ResidualKind.POINT_TO_POINT
            yield Correspondence(
                scan_point=self.scan_points[i],
                world_point=self.world_points[i],
                target=self.targets[i],
                residual_kind=kind,
                distance=float(self.distances[i]),
                normal=self.normals[i] if plane else None,
            )

    @property
    def point_to_plane_count(self) -> int:
        return int(np.sum(self.is_plane))

    def with_pose(self, pose: Pose) -> Correspondences:
        """Same association, scan points re-projected through pose."""
        return replace(self, world_points=pose.apply(self.scan_points))


def associate(
    scan_points: PointCloud | ArrayLike,
    pose: Pose,
    voxel_map: VoxelHashMap,
    tau_t: float,
) -> Correspondences:
    if tau_t <= 0:
        raise ValueError("Association threshold must be positive")

    if isinstance(scan_points, PointCloud):
        scan = np.asarray(scan_points.positions)
    else:
        scan = np.reshape(np.asarray(scan_points, dtype=np.float64), (-1, 3))
    world = pose.apply(scan)

    points, point_dist, point_found = voxel_map.nearest_points(world, tau_t)
    anchors, normals, _, surfel_found = voxel_map.nearest_surfels(
        world, SURFEL_ANCHOR_GATE * tau_t
    )

    plane_dist = np.abs(np.einsum("ij,ij->i", normals, world - anchors))
    plane_dist = np.where(surfel_found, plane_dist, np.inf)
    point_dist = np.where(point_found, point_dist, np.inf)

    is_plane = plane_dist < point_dist
    distances = np.where(is_plane, plane_dist, point_dist)
    keep = distances <= tau_t

    return Correspondences(
        scan_points=scan[keep],
        world_points=world[keep],
        targets=np.where(is_plane[:, None], anchors, points)[keep],
        normals=np.where(is_plane[:, None], normals, 0.0)[keep],
        is_plane=is_plane[keep],
        distances=distances[keep],
    )


def gm_rho(e: ArrayLike, sigma_t: float) -> NDArray[np.float64]:
    """Geman-McClure cost of residual norms."""
    e2 = np.square(np.asarray(e, dtype=np.float64))
    return 0.5 * e2 / (sigma_t / 3.0 + e2)


def gm_weight(e: ArrayLike, sigma_t: float) -> NDArray[np.float64] | float:
    if sigma_t <= 0:
        raise ValueError("sigma_t must be positive")
    e2 = np.square(np.asarray(e, dtype=np.float64))
    weight = 1.0 / (sigma_t / 3.0 + e2) ** 2
    return float(weight) if np.ndim(weight) == 0 else weight


def jacobian_p2p(p: ArrayLike, pose: Pose) -> NDArray[np.float64]:
    world = pose.apply(np.asarray(p, dtype=np.float64))
    return np.hstack([np.eye(3), -hat(world)])


def _check_unit(n: NDArray[np.float64]) -> None:
    if abs(np.linalg.norm(n) - 1.0) > UNIT_TOLERANCE:
        raise NonUnitNormal(f"Normal {n} is not unit length")


def jacobian_p2l(p: ArrayLike, n: ArrayLike, pose: Pose) -> NDArray[np.float64]:
    n = np.asarray(n, dtype=np.float64)
    _check_unit(n)
    return np.outer(n, n) @ jacobian_p2p(p, pose)


def _projectors(corr: Correspondences) -> NDArray[np.float64]:
    """I for point-to-point rows, n n^T for point-to-plane rows."""
    outer = np.einsum("ni,nj->nij", corr.normals, corr.normals)
    return np.where(corr.is_plane[:, None, None], outer, np.eye(3))


def residual_vectors(corr: Correspondences) -> NDArray[np.float64]:
    diff = corr.world_points - corr.targets
    return np.einsum("nij,nj->ni", _projectors(corr), diff)


def robust_objective(corr: Correspondences, sigma_t: float) -> float:
    e = np.linalg.norm(residual_vectors(corr), axis=1)
    return float(np.sum(gm_rho(e, sigma_t)))


def gauss_newton_step(corr: Correspondences, sigma_t: float) -> Twist:
    if not len(corr):
        raise NoCorrespondences("Gauss-Newton step needs at least one correspondence")
    if np.any(corr.is_plane):
        norms = np.linalg.norm(corr.normals[corr.is_plane], axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
            raise NonUnitNormal("Point-to-plane correspondence with non-unit normal")

    projectors = _projectors(corr)
    jacobians = np.concatenate(
        [projectors, -projectors @ hat_batch(corr.world_points)], axis=2
    )
    residuals = np.einsum("nij,nj->ni", projectors, corr.world_points - corr.targets)
    weights = gm_weight(np.linalg.norm(residuals, axis=1), sigma_t)

    hessian = np.einsum("n,nki,nkj->ij", weights, jacobians, jacobians)
    gradient = np.einsum("n,nki,nk->i", weights, jacobians, residuals)

    # Rank is judged on the undamped matrix; damping only treats ill-conditioning.
    eigenvalues = np.linalg.eigvalsh(hessian)
    if eigenvalues[-1] <= 0 or eigenvalues[0] <= RANK_TOLERANCE * eigenvalues[-1]:
        raise SingularSystem("Normal equations are rank deficient")
    if eigenvalues[-1] > CONDITION_LIMIT * eigenvalues[0]:
        hessian = hessian + LEVENBERG_MU * np.diag(np.diag(hessian))

    return Twist.from_vector(np.linalg.solve(hessian, -gradient))


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 100
    convergence: float = 1e-4
    max_halvings: int = 5


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    correspondences: int
    point_to_plane: int
    rms: float
    objective: float
    step_norm: float
    halvings: int


@dataclass
class IcpReport:
    iterations: list[IterationStats] = field(default_factory=list)
    converged: bool = False

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)

    @property
    def final_rms(self) -> float:
        return self.iterations[-1].rms if self.iterations else float("nan")


def register_scan_to_map(
    scan: PointCloud | ArrayLike,
    voxel_map: VoxelHashMap,
    initial_guess: Pose,
    state: ThresholdState,
    params: IcpParams = IcpParams(),
) -> tuple[Pose, IcpReport]:
    if isinstance(scan, PointCloud):
        points = np.asarray(scan.positions)
    else:
        points = np.reshape(np.asarray(scan, dtype=np.float64), (-1, 3))
    if not len(points):
        raise ValueError("Cannot register an empty scan")

    pose = initial_guess
    report = IcpReport()

    for iteration in range(params.max_iterations):
        corr = associate(points, pose, voxel_map, state.tau_t)
        if not len(corr):
            if iteration == 0:
                raise NoCorrespondences(
                    f"No map point within {state.tau_t:.3f} m of the scan"
                )
            break

        step = gauss_newton_step(corr, state.sigma_t).as_vector()
        objective = robust_objective(corr, state.sigma_t)

        # Step halving over the fixed association.
        accepted = None
        for halvings in range(params.max_halvings + 1):
            candidate = apply_update(pose, Twist.from_vector(step))
            if robust_objective(corr.with_pose(candidate), state.sigma_t) <= objective:
                accepted = candidate
                break
            step = 0.5 * step

        stats = IterationStats(
            iteration=iteration,
            correspondences=len(corr),
            point_to_plane=corr.point_to_plane_count,
            rms=float(np.sqrt(np.mean(np.sum(residual_vectors(corr) ** 2, axis=1)))),
            objective=objective,
            step_norm=float(np.linalg.norm(step)) if accepted is not None else 0.0,
            halvings=halvings,
        )
        report.iterations.append(stats)
        logging.debug(
            f"ICP iteration {iteration}: {stats.correspondences} correspondences "
            f"({stats.point_to_plane} planar), rms {stats.rms:.4f}, "
            f"step {stats.step_norm:.2e}"
        )

        if accepted is None:
            report.converged = True
            break

        pose = accepted
        if stats.step_norm < params.convergence:
            report.converged = True
            break

    return pose, report
