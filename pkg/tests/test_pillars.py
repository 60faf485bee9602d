import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pifenet.config import preset
from pifenet.pillars import PillarConfig, PointCloud, cell_indices, crop_to_range, decorate, pillarize

KITTI = preset("kitti-ped").pillar_config()
SMALL = PillarConfig(0.0, 1.6, -0.8, 0.8, -2.0, 1.0, 0.2, 0.2, max_pillars=16, max_points=4)


def cloud(*pts):
    return PointCloud(np.array(pts, dtype=np.float64).reshape(-1, 4))


def test_kitti_grid_extents():
    assert (KITTI.grid_x, KITTI.grid_y) == (296, 248)
    assert KITTI.pillar_z == pytest.approx(3.0)


def test_grid_must_be_exact():
    with pytest.raises(ValueError):
        PillarConfig(0, 1.0, 0, 1.0, -1, 1, 0.3, 0.25, 10, 4)


def test_crop_examples():
    assert len(crop_to_range(cloud([50, 0, 0, 0.5]), KITTI)) == 0
    assert len(crop_to_range(cloud([0, 0, 0, 0]), KITTI)) == 1
    assert len(crop_to_range(PointCloud(np.zeros((0, 4))), KITTI)) == 0


def test_crop_preserves_order(rng):
    pts = np.c_[rng.uniform(-10, 60, (200, 3)), rng.random(200)]
    out = crop_to_range(PointCloud(pts), KITTI).points
    inside = [p for p in pts if 0 <= p[0] <= 47.36 and -19.84 <= p[1] <= 19.84 and -2.5 <= p[2] <= 0.5]
    np.testing.assert_array_equal(out, np.array(inside).reshape(-1, 4))


def test_reflectance_clamped_with_counter(caplog):
    with caplog.at_level(logging.WARNING):
        c = cloud([0, 0, 0, 1.5], [0, 0, 0, -0.2], [0, 0, 0, 0.3])
    assert c.clamped == 2
    assert c.points[:, 3].tolist() == [1.0, 0.0, 0.3]
    assert "clamped 2" in caplog.text


def test_non_finite_point_rejected():
    with pytest.raises(ValueError, match="index 1"):
        cloud([0, 0, 0, 0], [np.nan, 0, 0, 0])


def test_kitti_cell_index_example():
    ix, iy = cell_indices(np.array([[0.40, -19.84, 0.0, 0.0]]), KITTI)
    assert (ix[0], iy[0]) == (2, 0)


def test_overfull_pillar_capped(rng):
    N = SMALL.max_points
    pts = np.c_[rng.uniform(0.01, 0.19, N + 5), rng.uniform(-0.79, -0.61, N + 5), np.zeros(N + 5), np.zeros(N + 5)]
    pt = pillarize(PointCloud(pts), SMALL, seed=3)
    assert pt.occupied == 1 and pt.counts[0] == N
    assert np.all(pt.features[0].any(axis=1))


def test_two_points_same_cell():
    pt = pillarize(cloud([0.05, 0.05, 0, 0.1], [0.1, 0.15, 0.5, 0.2]), SMALL)
    assert pt.occupied == 1 and pt.counts[0] == 2
    assert (pt.ix[0], pt.iy[0]) == (0, 4)


def test_upper_edge_excluded():
    pt = pillarize(cloud([1.6, 0.0, 0, 0], [0.0, 0.8, 0, 0]), SMALL)
    assert pt.occupied == 0


def test_decorate_single_point_at_centre():
    dec = decorate(np.array([[0.3, -0.5, 0.2, 0.7]]), (0.3, -0.5))
    assert np.all(dec[0, 4:] == 0)
    assert dec[0, :4].tolist() == [0.3, -0.5, 0.2, 0.7]


def test_decorate_symmetric_pair():
    pts = np.array([[1.0, 2.0, 3.0, 0.1], [3.0, 0.0, 1.0, 0.2]])
    dec = decorate(pts, (2.0, 1.0))
    np.testing.assert_array_equal(dec[0, 4:], -dec[1, 4:])


def test_offset_to_mean_averages_to_zero(rng):
    for _ in range(50):
        n = int(rng.integers(1, 30))
        pts = np.c_[rng.uniform(-1, 1, (n, 3)) * 50, rng.random(n)]
        dec = decorate(pts, (0.0, 0.0))
        mean = np.zeros(3)
        for p in pts:
            mean += p[:3]
        mean /= n
        np.testing.assert_allclose(dec[:, 4:7], pts[:, :3] - mean, atol=1e-9)
        assert np.all(np.abs(dec[:, 4:7].mean(axis=0)) < 1e-6)


point_lists = st.lists(st.tuples(st.floats(0, 1.5999), st.floats(-0.8, 0.7999), st.floats(-2, 1), st.floats(0, 1)),
                       min_size=0, max_size=80)


@given(point_lists, st.integers(0, 1000))
def test_partition_properties(points, seed):
    pts = np.array(points, dtype=np.float64).reshape(-1, 4)
    pt = pillarize(PointCloud(pts), SMALL, seed=seed, dtype=np.float64)
    n = pt.occupied
    assert pt.counts.sum() <= len(pts)
    assert np.all(pt.counts[n:] == 0)
    cells = set(zip(pt.ix.tolist(), pt.iy.tolist()))
    assert len(cells) == n
    assert all(0 <= x < SMALL.grid_x and 0 <= y < SMALL.grid_y for x, y in cells)
    # padding rows are zero
    assert not pt.features[~pt.valid[:, :, 0]].any()
    # every retained point sits in its pillar's cell
    for j in range(n):
        xy = pt.features[j, :pt.counts[j], :2]
        ix, iy = cell_indices(np.c_[xy, np.zeros((len(xy), 2))], SMALL)
        assert np.all(ix == pt.ix[j]) and np.all(iy == pt.iy[j])
    # no cap triggered -> every point retained
    ix_all, iy_all = cell_indices(pts, SMALL)
    _, per_cell = np.unique(iy_all * SMALL.grid_x + ix_all, return_counts=True)
    if len(per_cell) <= SMALL.max_pillars and (per_cell <= SMALL.max_points).all():
        assert pt.counts.sum() == len(pts)


def test_deterministic_under_seed(rng):
    pts = np.c_[rng.uniform(0, 1.6, (400, 1)), rng.uniform(-0.8, 0.8, (400, 1)), rng.uniform(-2, 1, (400, 2))]
    pts[:, 3] = rng.random(400)
    a = pillarize(PointCloud(pts), SMALL, seed=11)
    b = pillarize(PointCloud(pts), SMALL, seed=11)
    c = pillarize(PointCloud(pts), SMALL, seed=12)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.occupied == SMALL.max_pillars and a.counts.max() == SMALL.max_points
    assert a.features.tobytes() != c.features.tobytes()


def test_pillar_cap_subsamples(rng):
    pts = np.c_[rng.uniform(0, 1.6, 2000), rng.uniform(-0.8, 0.8, 2000), np.zeros(2000), np.zeros(2000)]
    pt = pillarize(PointCloud(pts), SMALL, seed=0)
    assert pt.occupied == SMALL.max_pillars
    assert len(pt.ix) == SMALL.max_pillars
