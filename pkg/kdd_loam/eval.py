"""Odometry and registration metrics.

Segment RPE follows the KITTI benchmark: every start frame, every length in
100 m steps up to 800 m, segment end at the first frame whose accumulated
ground-truth path length reaches the length, no interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from kdd_loam.data_types import Pose
from kdd_loam.errors import EmptyPairList, LengthMismatch, TooShort

SEGMENT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
DEFAULT_RTE_MAX_CM = 200.0
DEFAULT_RRE_MAX_DEG = 5.0
DEFAULT_TAU_1 = 0.1
DEFAULT_TAU_2 = 0.05
OVERALL = "all"


@dataclass(frozen=True)
class LengthStats:
    t_err: float
    r_err: float
    segments: int


@dataclass(frozen=True)
class RpeReport:
    t_err: float
    r_err: float
    by_length: dict[int, LengthStats] = field(default_factory=dict)

    @property
    def segments(self) -> int:
        return sum(s.segments for s in self.by_length.values())

    def lines(self) -> list[str]:
        lines = [f"t_err={self.t_err:.6f} r_err={self.r_err:.6f}"]
        lines += [
            f"length={length} t_err={s.t_err:.6f} r_err={s.r_err:.6f} "
            f"segments={s.segments}"
            for length, s in sorted(self.by_length.items())
        ]
        return lines


def _stack(poses: list[Pose]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    rotations = np.array([p.rotation for p in poses])
    translations = np.array([p.translation for p in poses])
    return rotations, translations


def _relative(
    rotations: NDArray[np.float64],
    translations: NDArray[np.float64],
    first: NDArray[np.int64],
    last: NDArray[np.int64],
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    r_first_t = np.swapaxes(rotations[first], 1, 2)
    delta_r = r_first_t @ rotations[last]
    offsets = translations[last] - translations[first]
    delta_t = np.einsum("nij,nj->ni", r_first_t, offsets)
    return delta_r, delta_t


def _angles(rotations: NDArray[np.float64]) -> NDArray[np.float64]:
    cos_angle = (np.trace(rotations, axis1=1, axis2=2) - 1.0) / 2.0
    return np.arccos(np.clip(cos_angle, -1.0, 1.0))


def path_lengths(poses: list[Pose]) -> NDArray[np.float64]:
    _, translations = _stack(poses)
    steps = np.linalg.norm(np.diff(translations, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def kitti_rpe(
    gt: list[Pose],
    est: list[Pose],
    lengths: Iterable[int] = SEGMENT_LENGTHS,
    step: int = 1,
) -> RpeReport:
    if len(gt) != len(est):
        raise LengthMismatch(f"{len(gt)} ground-truth poses for {len(est)} estimates")
    if len(gt) < 2:
        raise TooShort("Need at least two poses")
    if step < 1:
        raise ValueError("Frame step must be at least 1")

    distances = path_lengths(gt)
    gt_r, gt_t = _stack(gt)
    est_r, est_t = _stack(est)
    starts = np.arange(0, len(gt), step)

    by_length: dict[int, LengthStats] = {}
    t_ratios, r_ratios = [], []

    for length in lengths:
        ends = np.searchsorted(distances, distances[starts] + length, side="left")
        usable = ends < len(gt)
        if not np.any(usable):
            continue

        first, last = starts[usable], ends[usable]
        dg_r, dg_t = _relative(gt_r, gt_t, first, last)
        de_r, de_t = _relative(est_r, est_t, first, last)

        # error = inv(delta_est) * delta_gt
        de_r_t = np.swapaxes(de_r, 1, 2)
        err_r = de_r_t @ dg_r
        err_t = np.einsum("nij,nj->ni", de_r_t, dg_t - de_t)

        t_ratio = np.linalg.norm(err_t, axis=1) / length
        r_ratio = np.degrees(_angles(err_r)) / length
        t_ratios.append(t_ratio)
        r_ratios.append(r_ratio)
        by_length[length] = LengthStats(
            float(np.mean(t_ratio) * 100.0), float(np.mean(r_ratio) * 100.0), len(first)
        )

    if not by_length:
        raise TooShort(f"Trajectory covers only {distances[-1]:.1f} m of path")

    return RpeReport(
        float(np.mean(np.concatenate(t_ratios)) * 100.0),
        float(np.mean(np.concatenate(r_ratios)) * 100.0),
        by_length,
    )


def combine_reports(reports: Iterable[RpeReport]) -> RpeReport:
    """Segment-weighted mean over several sequences."""
    reports = [r for r in reports if r.segments]
    if not reports:
        raise TooShort("No sequence contributed a segment")

    total = sum(r.segments for r in reports)
    by_length: dict[int, LengthStats] = {}
    for length in sorted({k for r in reports for k in r.by_length}):
        stats = [r.by_length[length] for r in reports if length in r.by_length]
        count = sum(s.segments for s in stats)
        by_length[length] = LengthStats(
            sum(s.t_err * s.segments for s in stats) / count,
            sum(s.r_err * s.segments for s in stats) / count,
            count,
        )

    return RpeReport(
        sum(s.t_err * s.segments for s in by_length.values()) / total,
        sum(s.r_err * s.segments for s in by_length.values()) / total,
        by_length,
    )


def evaluate_sequences(
    sequences: dict[str, tuple[list[Pose], list[Pose]]],
    exclude: Iterable[str] = (),
    step: int = 1,
) -> dict[str, RpeReport]:
    """Per-sequence reports plus the pooled one under OVERALL."""
    excluded = set(exclude)
    reports = {
        name: kitti_rpe(gt, est, step=step)
        for name, (gt, est) in sorted(sequences.items())
        if name not in excluded
    }
    reports[OVERALL] = combine_reports(reports.values())
    return reports


def report_lines(reports: dict[str, RpeReport]) -> list[str]:
    """Machine-readable `metric,sequence,value` lines."""
    lines = []
    for name, report in reports.items():
        lines.append(f"t_err,{name},{report.t_err:.6f}")
        lines.append(f"r_err,{name},{report.r_err:.6f}")
        for length, stats in sorted(report.by_length.items()):
            lines.append(f"t_err_{length},{name},{stats.t_err:.6f}")
            lines.append(f"r_err_{length},{name},{stats.r_err:.6f}")
    return lines


@dataclass(frozen=True)
class PairMetrics:
    rte: float
    rre: float
    success: bool


def pair_metrics(
    gt_pose: Pose,
    est_pose: Pose,
    rte_max: float = DEFAULT_RTE_MAX_CM,
    rre_max: float = DEFAULT_RRE_MAX_DEG,
) -> PairMetrics:
    rte = float(np.linalg.norm(est_pose.translation - gt_pose.translation) * 100.0)
    cos_angle = (np.trace(gt_pose.rotation.T @ est_pose.rotation) - 1.0) / 2.0
    rre = float(np.degrees(np.arccos(np.clip(cos_angle, -1.0, 1.0))))
    return PairMetrics(rte, rre, rte <= rte_max and rre <= rre_max)


def registration_recall(metrics: list[PairMetrics]) -> float:
    if not metrics:
        raise EmptyPairList("Registration recall needs at least one pair")
    return sum(m.success for m in metrics) / len(metrics)


@dataclass(frozen=True, eq=False)
class MatchPair:
    """Putative matches src[k] -> dst[k] of one cloud pair and its true pose."""

    src_points: NDArray[np.float64]
    dst_points: NDArray[np.float64]
    gt_pose: Pose

    @classmethod
    def from_arrays(cls, src: ArrayLike, dst: ArrayLike, gt_pose: Pose) -> MatchPair:
        src = np.reshape(np.asarray(src, dtype=np.float64), (-1, 3))
        dst = np.reshape(np.asarray(dst, dtype=np.float64), (-1, 3))
        if src.shape != dst.shape:
            raise LengthMismatch(f"{len(src)} sources for {len(dst)} destinations")
        return cls(src, dst, gt_pose)

    def inlier_ratio(self, tau_1: float) -> float:
        if not len(self.src_points):
            return 0.0
        moved = self.gt_pose.apply(self.src_points)
        errors = np.linalg.norm(moved - self.dst_points, axis=1)
        return float(np.mean(errors <= tau_1))


def _check_thresholds(tau_1: float, tau_2: float) -> None:
    if tau_1 <= 0:
        raise ValueError("tau_1 must be positive")
    if not 0 < tau_2 < 1:
        raise ValueError("tau_2 must lie in (0, 1)")


def fmr(
    pairs: list[MatchPair], tau_1: float = DEFAULT_TAU_1, tau_2: float = DEFAULT_TAU_2
) -> float:
    _check_thresholds(tau_1, tau_2)
    if not pairs:
        raise EmptyPairList("Feature matching recall needs at least one pair")

    return sum(p.inlier_ratio(tau_1) >= tau_2 for p in pairs) / len(pairs)


def fmr_sweep(
    pairs: list[MatchPair],
    tau_1_values: Iterable[float],
    tau_2_values: Iterable[float],
) -> dict[tuple[float, float], float]:
    """Recall for every (tau_1, tau_2) combination."""
    if not pairs:
        raise EmptyPairList("Feature matching recall needs at least one pair")

    tau_2_values = list(tau_2_values)
    results = {}
    for tau_1 in tau_1_values:
        ratios = np.array([p.inlier_ratio(tau_1) for p in pairs])
        for tau_2 in tau_2_values:
            _check_thresholds(tau_1, tau_2)
            results[(tau_1, tau_2)] = float(np.mean(ratios >= tau_2))
    return results
