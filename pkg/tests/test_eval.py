import numpy as np
import pytest
from scenes import pose_about, random_pose

from kdd_loam.data_types import Pose
from kdd_loam.errors import EmptyPairList, LengthMismatch, TooShort
from kdd_loam.eval import (
    OVERALL,
    MatchPair,
    combine_reports,
    evaluate_sequences,
    fmr,
    fmr_sweep,
    kitti_rpe,
    pair_metrics,
    path_lengths,
    registration_recall,
    report_lines,
)


def straight(n, scale=1.0):
    return [Pose.from_translation([scale * k, 0.0, 0.0]) for k in range(n)]


def test_identical_trajectories_have_zero_error():
    gt = straight(301)
    report = kitti_rpe(gt, gt)
    assert report.t_err == 0.0
    assert report.r_err == 0.0


def test_scaled_straight_line():
    report = kitti_rpe(straight(1001), straight(1001, scale=1.01))
    assert report.t_err == pytest.approx(1.0, abs=1e-6)
    assert report.r_err == 0.0
    assert sorted(report.by_length) == [100, 200, 300, 400, 500, 600, 700, 800]
    assert report.by_length[800].segments == 201


def test_short_trajectory_fills_only_first_bucket():
    report = kitti_rpe(straight(151), straight(151))
    assert list(report.by_length) == [100]
    assert report.by_length[100].segments == 51
    assert report.segments == 51


def test_rotation_drift():
    gt = straight(201)
    est = [
        Pose(pose_about("z", 0.01 * k).rotation, p.translation)
        for k, p in enumerate(gt)
    ]
    report = kitti_rpe(gt, est)
    assert report.r_err == pytest.approx(1.0, rel=1e-6)



def wandering(n, forward, yaw_deg):
    step = pose_about("z", yaw_deg, (forward, 0.0, 0.0))
    poses = [Pose.identity()]
    for _ in range(n - 1):
        poses.append(poses[-1].compose(step))
    return poses


def test_rpe_is_invariant_to_common_rigid_motion(rng):
    gt = wandering(400, 0.93, 0.2)
    est = wandering(400, 0.93 * 1.01, 0.21)
    offset = random_pose(rng, max_translation=100.0)
    moved_gt = [offset.compose(p) for p in gt]
    moved_est = [offset.compose(p) for p in est]

    before = kitti_rpe(gt, est)
    after = kitti_rpe(moved_gt, moved_est)
    assert before.t_err > 0.5
    assert after.t_err == pytest.approx(before.t_err, rel=1e-9)
    assert after.r_err == pytest.approx(before.r_err, rel=1e-9)
    assert {k: s.segments for k, s in after.by_length.items()} == {
        k: s.segments for k, s in before.by_length.items()
    }

def test_frame_step_reduces_segments():
    gt = straight(201)
    assert kitti_rpe(gt, gt, step=10).segments < kitti_rpe(gt, gt).segments
    with pytest.raises(ValueError):
        kitti_rpe(gt, gt, step=0)


def test_rpe_errors():
    with pytest.raises(TooShort):
        kitti_rpe(straight(51), straight(51))
    with pytest.raises(TooShort):
        kitti_rpe(straight(1), straight(1))
    with pytest.raises(LengthMismatch):
        kitti_rpe(straight(200), straight(199))


def test_path_lengths():
    lengths = path_lengths(straight(4, scale=2.0))
    assert lengths.tolist() == [0.0, 2.0, 4.0, 6.0]


def test_report_lines():
    report = kitti_rpe(straight(151), straight(151, scale=1.01))
    lines = report.lines()
    assert lines[0] == "t_err=1.000000 r_err=0.000000"
    assert lines[1] == "length=100 t_err=1.000000 r_err=0.000000 segments=51"


def test_evaluate_sequences_excludes_and_pools():
    sequences = {
        "00": (straight(151), straight(151, scale=1.01)),
        "01": (straight(251), straight(251)),
        "02": (straight(151), straight(151, scale=1.5)),
    }
    reports = evaluate_sequences(sequences, exclude=["02"])
    assert list(reports) == ["00", "01", OVERALL]

    pooled = reports[OVERALL]
    assert pooled.by_length[100].segments == 51 + 151
    assert pooled.by_length[200].segments == 51
    expected = (51 * 1.0) / (51 + 151 + 51)
    assert pooled.t_err == pytest.approx(expected, abs=1e-6)

    lines = report_lines(reports)
    assert "t_err,00,1.000000" in lines
    assert "t_err_200,01,0.000000" in lines


def test_combine_single_report_is_identity():
    report = kitti_rpe(straight(301), straight(301, scale=1.02))
    combined = combine_reports([report])
    assert combined.t_err == pytest.approx(report.t_err)
    for length, stats in report.by_length.items():
        assert combined.by_length[length].segments == stats.segments
        assert combined.by_length[length].t_err == pytest.approx(stats.t_err)


def test_combine_requires_segments():
    with pytest.raises(TooShort):
        combine_reports([])


def test_pair_metrics():
    gt = pose_about("y", 20.0, (1.0, 2.0, 3.0))
    near = Pose(gt.rotation, gt.translation + [0.05, 0.0, 0.0])
    metrics = pair_metrics(gt, near)
    assert metrics.rte == pytest.approx(5.0)
    assert metrics.rre == pytest.approx(0.0, abs=1e-4)
    assert metrics.success

    turned = Pose(pose_about("y", 30.0).rotation, gt.translation)
    metrics = pair_metrics(gt, turned)
    assert metrics.rre == pytest.approx(10.0)
    assert not metrics.success

    far = Pose(gt.rotation, gt.translation + [0.0, 3.0, 0.0])
    assert not pair_metrics(gt, far).success
    assert pair_metrics(gt, far, rte_max=400.0).success


def test_registration_recall():
    gt = Pose.identity()
    metrics = [
        pair_metrics(gt, Pose.from_translation([0.25 * k, 0.0, 0.0]))
        for k in range(16)
    ]
    assert registration_recall(metrics) == pytest.approx(9 / 16)
    with pytest.raises(EmptyPairList):
        registration_recall([])


def planted_pair(rng, n, inliers, gt):
    src = rng.uniform(-10, 10, size=(n, 3))
    dst = gt.apply(src)
    dst[inliers:] += [1.0, 0.0, 0.0]
    return MatchPair.from_arrays(src, dst, gt)


def test_fmr_counts_pairs_above_ratio(rng):
    gt = random_pose(rng)
    pairs = [planted_pair(rng, 10, k, gt) for k in (1, 3, 9)]
    assert fmr(pairs, tau_1=0.1, tau_2=0.2) == pytest.approx(2 / 3)
    assert fmr(pairs, tau_1=0.1, tau_2=0.95) == 0.0
    assert fmr(pairs, tau_1=2.0, tau_2=0.95) == 1.0


def test_fmr_ratio_equal_to_threshold_counts(rng):
    pair = planted_pair(rng, 10, 2, Pose.identity())
    assert pair.inlier_ratio(0.1) == pytest.approx(0.2)
    assert fmr([pair], tau_1=0.1, tau_2=0.2) == 1.0


def test_fmr_errors(rng):
    with pytest.raises(EmptyPairList):
        fmr([])
    pair = planted_pair(rng, 5, 5, Pose.identity())
    with pytest.raises(ValueError):
        fmr([pair], tau_2=1.0)
    with pytest.raises(ValueError):
        fmr([pair], tau_1=0.0)
    with pytest.raises(LengthMismatch):
        MatchPair.from_arrays(np.zeros((3, 3)), np.zeros((2, 3)), Pose.identity())


def test_empty_pair_has_zero_ratio():
    pair = MatchPair.from_arrays(np.zeros((0, 3)), np.zeros((0, 3)), Pose.identity())
    assert fmr([pair], tau_2=0.01) == 0.0


def test_fmr_sweep_matches_single_calls(rng):
    gt = random_pose(rng)
    pairs = [planted_pair(rng, 20, k, gt) for k in (0, 2, 5, 12, 20)]
    sweep = fmr_sweep(pairs, [0.05, 0.5, 3.0], [0.05, 0.2, 0.5])
    assert len(sweep) == 9
    for (tau_1, tau_2), value in sweep.items():
        assert value == pytest.approx(fmr(pairs, tau_1, tau_2))
    with pytest.raises(EmptyPairList):
        fmr_sweep([], [0.1], [0.05])


def test_fmr_is_monotone_in_both_thresholds(rng):
    pairs = []
    for _ in range(30):
        gt = random_pose(rng)
        src = rng.uniform(-10, 10, size=(50, 3))
        noise = rng.normal(size=(50, 3)) * rng.exponential(0.5, size=(50, 1))
        pairs.append(MatchPair.from_arrays(src, gt.apply(src) + noise, gt))

    tau_1 = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6]
    tau_2 = [0.05, 0.1, 0.2, 0.4, 0.6, 0.8]
    sweep = fmr_sweep(pairs, tau_1, tau_2)
    table = np.array([[sweep[(a, b)] for b in tau_2] for a in tau_1])

    assert np.all(np.diff(table, axis=0) >= 0)
    assert np.all(np.diff(table, axis=1) <= 0)
    assert table[-1, 0] > table[0, -1]
