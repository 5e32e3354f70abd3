import numpy as np
import pytest

from kdd_loam import parallel
from kdd_loam.data_types import PointList, Surfel
from kdd_loam.errors import NoSuchVoxel, NotFull
from kdd_loam.voxelmap import (
    POINT_BYTES,
    SURFEL_BYTES,
    VOXEL_OVERHEAD_BYTES,
    PointGrid,
    VoxelHashMap,
    radius_neighbors,
    voxel_center,
    voxel_key,
)


def spaced_points(n, corner=(0.0, 0.0, 0.0), step=0.15):
    """n points spread over a lattice inside one unit voxel, pairwise >= step apart."""
    lattice = np.array(
        [[i, j, k] for i in range(6) for j in range(6) for k in range(6)], dtype=float
    )
    spread = (7 * np.arange(n)) % len(lattice)
    return np.asarray(corner) + 0.05 + step * lattice[spread]


def planar_points(n, z=0.5):
    g = 0.1 + 0.2 * np.array([[i, j] for i in range(5) for j in range(5)])[:n]
    return np.column_stack([g, np.full(n, z)])


def test_voxel_key_floor_division():
    assert voxel_key([0.5, -0.5, 1.0], 1.0) == (0, -1, 1)
    assert voxel_key([2.9, 3.0, -0.1], 1.5) == (1, 2, -1)
    assert np.allclose(voxel_center((0, -1, 2), 2.0), [1.0, -1.0, 5.0])


def test_insert_caps_voxel_at_n_max():
    voxel_map = VoxelHashMap(voxel_size=1.0, n_max=20, fit_surfels=False)
    report = voxel_map.insert_points(spaced_points(25))
    assert report.added == 20
    assert report.rejected_full == 5
    assert len(voxel_map.data[(0, 0, 0)]) == 20


def test_insert_rejects_duplicates():
    voxel_map = VoxelHashMap(voxel_size=1.0, n_max=20)
    report = voxel_map.insert_points([[0.5, 0.5, 0.5], [0.52, 0.5, 0.5]])
    assert report.added == 1
    assert report.rejected_duplicate == 1


def test_insert_into_surfel_voxel_is_rejected():
    voxel_map = VoxelHashMap(voxel_size=1.0, n_max=20, planarity_min=0.5)
    report = voxel_map.insert_points(planar_points(20))
    assert report.surfels_fitted == 1

    report = voxel_map.insert_points([[0.5, 0.5, 0.9]])
    assert report.rejected_surfel == 1
    assert report.added == 0


def test_insert_rejects_non_finite():
    voxel_map = VoxelHashMap()
    with pytest.raises(ValueError):
        voxel_map.insert_points([[np.nan, 0.0, 0.0]])


def test_bucketing_matches_brute_force(rng):
    points = rng.uniform(0, 100, size=(10_000, 3))
    voxel_map = VoxelHashMap(voxel_size=1.0, n_max=20, min_point_spacing=0.0)
    voxel_map.insert_points(points)

    keys, counts = np.unique(np.floor(points).astype(int), axis=0, return_counts=True)
    expected = {tuple(k): min(c, 20) for k, c in zip(keys.tolist(), counts)}
    actual = {key: len(voxel) for key, voxel in voxel_map.items()}
    assert actual == expected


def test_stored_points_rebucket_to_their_key(rng):
    voxel_map = VoxelHashMap(voxel_size=0.7, n_max=5, fit_surfels=False)
    voxel_map.insert_points(rng.uniform(-10, 10, size=(3000, 3)))
    for key, voxel in voxel_map.items():
        assert isinstance(voxel, PointList)
        assert len(voxel) <= 5
        for point in voxel.points:
            assert voxel_key(point, 0.7) == key


def test_no_voxel_exceeds_cap_under_any_order(rng):
    points = rng.uniform(0, 3, size=(2000, 3))
    for seed in range(3):
        order = np.random.default_rng(seed).permutation(len(points))
        voxel_map = VoxelHashMap(voxel_size=1.0, n_max=7, fit_surfels=False)
        for chunk in np.array_split(points[order], 10):
            voxel_map.insert_points(chunk)
        assert max(len(v) for _, v in voxel_map.items()) <= 7


def test_fit_surfel_on_plane():
    voxel_map = VoxelHashMap(
        voxel_size=1.0, n_max=20, planarity_min=0.5, fit_surfels=False
    )
    voxel_map.insert_points(planar_points(20))
    fit = voxel_map.try_fit_surfel((0, 0, 0), sensor_origin=[0.0, 0.0, 10.0])

    assert fit.fitted
    surfel = voxel_map.data[(0, 0, 0)]
    assert isinstance(surfel, Surfel)
    assert np.allclose(surfel.normal, [0, 0, 1], atol=1e-6)
    assert np.linalg.norm(surfel.normal) == pytest.approx(1.0, abs=1e-9)
    assert surfel.radius == 1.0
    assert np.all(np.floor(surfel.anchor) == 0)
    assert np.allclose(surfel.anchor, [0.5, 0.5, 0.5])


def test_fit_surfel_normal_faces_sensor():
    voxel_map = VoxelHashMap(voxel_size=1.0, n_max=20, planarity_min=0.5)
    voxel_map.insert_points(planar_points(20), sensor_origin=[0.0, 0.0, -10.0])
    assert voxel_map.data[(0, 0, 0)].normal[2] == pytest.approx(-1.0)


def test_fit_surfel_rejects_volume(rng):
    voxel_map = VoxelHashMap(voxel_size=1.0, n_max=20, fit_surfels=False)
    voxel_map.insert_points(spaced_points(20))
    fit = voxel_map.try_fit_surfel((0, 0, 0))

    assert not fit.fitted
    assert fit.residual > voxel_map.plane_rms_max
    assert isinstance(voxel_map.data[(0, 0, 0)], PointList)


def test_fit_surfel_errors():
    voxel_map = VoxelHashMap(voxel_size=1.0, n_max=20, fit_surfels=False)
    voxel_map.insert_points(spaced_points(19))
    with pytest.raises(NotFull):
        voxel_map.try_fit_surfel((0, 0, 0))
    with pytest.raises(NoSuchVoxel):
        voxel_map.try_fit_surfel((5, 5, 5))


def test_nearest_point_single():
    voxel_map = VoxelHashMap()
    voxel_map.insert_points([[1.0, 1.0, 1.0]])
    point, distance = voxel_map.nearest_point([0.0, 0.0, 0.0], 3.0)
    assert np.allclose(point, [1, 1, 1])
    assert distance == pytest.approx(np.sqrt(3))
    assert voxel_map.nearest_point([0.0, 0.0, 0.0], 1.0) is None


def test_nearest_on_empty_map():
    voxel_map = VoxelHashMap()
    assert voxel_map.nearest_point([0, 0, 0], 5.0) is None
    assert voxel_map.nearest_surfel([0, 0, 0], 5.0) is None
    _, _, found = voxel_map.nearest_points(np.zeros((3, 3)), 5.0)
    assert not found.any()


def test_nearest_point_rejects_bad_radius():
    with pytest.raises(ValueError):
        VoxelHashMap().nearest_point([0, 0, 0], 0.0)


def test_nearest_point_matches_linear_scan(rng):
    voxel_map = VoxelHashMap(voxel_size=1.0, n_max=50, min_point_spacing=0.0)
    voxel_map.insert_points(rng.uniform(0, 20, size=(5000, 3)))
    stored = voxel_map.points()
    queries = rng.uniform(-2, 22, size=(200, 3))

    for max_dist in (0.5, 1.7, 30.0):
        targets, distances, found = voxel_map.nearest_points(queries, max_dist)
        for q, target, distance, hit in zip(queries, targets, distances, found):
            d = np.linalg.norm(stored - q, axis=1)
            best = int(np.argmin(d))
            single = voxel_map.nearest_point(q, max_dist)
            if d[best] <= max_dist:
                assert hit and distance == pytest.approx(d[best])
                assert np.allclose(target, stored[best])
                assert single is not None and single[1] == pytest.approx(d[best])
            else:
                assert not hit and single is None


def test_nearest_surfel_single():
    voxel_map = VoxelHashMap(voxel_size=1.0)
    voxel_map.data[(0, 0, 0)] = Surfel([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 1.0)
    surfel, distance = voxel_map.nearest_surfel([0.0, 0.0, 2.0], 5.0)
    assert np.allclose(surfel.anchor, 0.0)
    assert distance == pytest.approx(2.0)


def test_nearest_surfel_ignores_points():
    voxel_map = VoxelHashMap()
    voxel_map.insert_points([[0.5, 0.5, 0.5]])
    assert voxel_map.nearest_surfel([0, 0, 0], 5.0) is None


def test_nearest_surfel_matches_linear_scan(rng):
    voxel_map = VoxelHashMap(voxel_size=1.0, n_max=20, planarity_min=0.5)
    for corner in rng.integers(0, 10, size=(40, 3)):
        voxel_map.insert_points(planar_points(20) + corner - [0, 0, 0.2])
    voxel_map.insert_points(rng.uniform(0, 10, size=(300, 3)))

    anchors = np.array([s.anchor for s in voxel_map.surfels()])
    assert len(anchors)
    for q in rng.uniform(0, 10, size=(100, 3)):
        d = np.linalg.norm(anchors - q, axis=1)
        result = voxel_map.nearest_surfel(q, 4.0)
        if d.min() <= 4.0:
            assert result is not None
            assert result[1] == pytest.approx(d.min())
        else:
            assert result is None


def test_prune_beyond():
    voxel_map = VoxelHashMap(voxel_size=1.0)
    voxel_map.insert_points([[0.5, 0.5, 0.5], [3.5, 0.5, 0.5]])
    assert voxel_map.prune_beyond([0, 0, 0], 10.0) == 0
    assert voxel_map.prune_beyond([0, 0, 0], 2.0) == 1
    assert list(dict(voxel_map.items())) == [(0, 0, 0)]


def test_prune_matches_brute_force(rng):
    voxel_map = VoxelHashMap(voxel_size=2.0)
    voxel_map.insert_points(rng.uniform(-50, 50, size=(2000, 3)))
    keys = list(dict(voxel_map.items()))
    center = np.array([5.0, -3.0, 1.0])

    voxel_map.prune_beyond(center, 30.0)
    expected = {
        k for k in keys if np.linalg.norm(voxel_center(k, 2.0) - center) <= 30.0
    }
    assert set(dict(voxel_map.items())) == expected


def test_prune_invalidates_queries():
    voxel_map = VoxelHashMap()
    voxel_map.insert_points([[50.5, 0.5, 0.5]])
    assert voxel_map.nearest_point([50, 0, 0], 2.0) is not None
    voxel_map.nearest_points([[50, 0, 0]], 2.0)
    voxel_map.prune_beyond([0, 0, 0], 10.0)
    _, _, found = voxel_map.nearest_points([[50, 0, 0]], 2.0)
    assert not found.any()


def test_memory_usage_accounting():
    voxel_map = VoxelHashMap(voxel_size=1.0, n_max=20, planarity_min=0.5)
    assert voxel_map.memory_usage() == 0

    voxel_map.fit_surfels = False
    voxel_map.insert_points(planar_points(20))
    assert voxel_map.memory_usage(include_overhead=False) == 240
    before = voxel_map.memory_usage()

    assert voxel_map.try_fit_surfel((0, 0, 0)).fitted
    assert voxel_map.memory_usage(include_overhead=False) == 28
    assert voxel_map.memory_usage() < before


def test_memory_usage_sums_voxels(rng):
    voxel_map = VoxelHashMap(voxel_size=1.0, n_max=20, planarity_min=0.5)
    voxel_map.insert_points(planar_points(20) + [3, 0, 0])
    voxel_map.insert_points(rng.uniform(0, 5, size=(500, 3)))

    expected = 0
    for _, voxel in voxel_map.items():
        if isinstance(voxel, Surfel):
            expected += SURFEL_BYTES
        else:
            expected += POINT_BYTES * len(voxel)
        expected += VOXEL_OVERHEAD_BYTES
    assert voxel_map.memory_usage() == expected
    assert voxel_map.surfels()


def scan_line_plane(width, z=0.5):
    """Horizontal plane in scan lines: 4 lines per metre, 0.2 m along a line.

    Every unit voxel of the plane collects exactly 20 points.
    """
    along = 0.1 + 0.2 * np.arange(5 * width)
    across = 0.125 + 0.25 * np.arange(4 * width)
    x, y = np.meshgrid(along, across, indexing="ij")
    return np.column_stack([x.ravel(), y.ravel(), np.full(x.size, z)])


def memory_with_and_without_surfels(points, **kwargs):
    usage = []
    for fit in (True, False):
        voxel_map = VoxelHashMap(fit_surfels=fit, **kwargs)
        voxel_map.insert_points(points)
        usage.append(voxel_map.memory_usage())
    return usage


def test_surfels_shrink_planar_heavy_map(rng):
    plane = scan_line_plane(10)
    clutter = rng.uniform([0, 0, 2], [10, 10, 6], size=(850, 3))
    points = np.concatenate([plane, clutter])
    assert len(plane) / len(points) >= 0.7

    voxel_map = VoxelHashMap()
    voxel_map.insert_points(points)
    assert len(voxel_map.surfels()) == 100

    with_surfels, without = memory_with_and_without_surfels(points)
    assert with_surfels <= 0.85 * without


def test_random_plane_samples_need_lower_planarity(rng):
    plane = np.column_stack([rng.uniform(0, 10, size=(4000, 2)), np.full(4000, 0.5)])
    clutter = rng.uniform([0, 0, 2], [10, 10, 6], size=(1700, 3))
    points = np.concatenate([plane, clutter])

    with_surfels, without = memory_with_and_without_surfels(points, planarity_min=0.3)
    assert with_surfels <= 0.85 * without


def test_point_grid_matches_brute_force(rng):
    points = rng.uniform(0, 4, size=(400, 3))
    grid = PointGrid(points, 0.5)
    center = np.array([2.0, 2.0, 2.0])
    expected = np.flatnonzero(np.linalg.norm(points - center, axis=1) <= 0.8)
    assert np.array_equal(grid.query_radius(center, 0.8), expected)

    neighbourhoods = radius_neighbors(points, 0.8)
    for i in range(0, 400, 37):
        d = np.linalg.norm(points - points[i], axis=1)
        assert np.array_equal(neighbourhoods[i], np.flatnonzero(d <= 0.8))


def test_concurrent_queries(rng):
    voxel_map = VoxelHashMap(voxel_size=1.0, n_max=50, min_point_spacing=0.0)
    voxel_map.insert_points(rng.uniform(0, 20, size=(3000, 3)))
    queries = rng.uniform(0, 20, size=(500, 3))

    serial = voxel_map.nearest_points(queries, 2.0)
    parallel.set_max_workers(4)
    threaded = voxel_map.nearest_points(queries, 2.0)
    for a, b in zip(serial, threaded):
        assert np.array_equal(a, b)
