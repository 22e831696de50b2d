"""Voxelization and fixed-radius nearest neighbors against brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldrf.frnn import FrnnIndex
from ldrf.geometry import SceneBounds
from ldrf.voxel import voxelize


BOUNDS = SceneBounds(np.zeros(3), 1.0)


def test_voxelize_small_exact_case():
    # resolution 2 over [-1, 1]^3: cell size 1, origin at (-1, -1, -1)
    pts = np.array(
        [
            [0.5, 0.5, 0.5],   # cell (1, 1, 1)
            [0.7, 0.9, 0.1],   # cell (1, 1, 1)
            [-0.5, 0.5, 0.5],  # cell (0, 1, 1)
            [-2.0, 0.0, 0.0],  # outside, dropped
        ]
    )
    grid = voxelize(pts, 2, BOUNDS)
    assert len(grid) == 2
    np.testing.assert_array_equal(grid.coords, [[0, 1, 1], [1, 1, 1]])
    np.testing.assert_array_equal(grid.counts, [1, 2])
    np.testing.assert_allclose(grid.mean_positions[0], [-0.5, 0.5, 0.5])
    np.testing.assert_allclose(grid.mean_positions[1], [0.6, 0.7, 0.3])
    np.testing.assert_allclose(grid.cell_centers(), [[-0.5, 0.5, 0.5], [0.5, 0.5, 0.5]])


def test_voxelize_empty_and_validation():
    grid = voxelize(np.zeros((0, 3)), 4, BOUNDS)
    assert len(grid) == 0
    with pytest.raises(ValueError):
        voxelize(np.array([[np.inf, 0, 0]]), 4, BOUNDS)
    with pytest.raises(ValueError):
        voxelize(np.zeros((1, 3)), 0, BOUNDS)


def test_voxelize_matches_grouping_oracle(rng):
    pts = rng.uniform(-1.2, 1.2, (3000, 3))
    res = 8
    grid = voxelize(pts, res, BOUNDS)
    cells = {}
    for p in pts:
        c = tuple(np.floor((p - (BOUNDS.center - 1.0)) / (2.0 / res)).astype(int))
        if all(0 <= v < res for v in c):
            cells.setdefault(c, []).append(p)
    assert len(grid) == len(cells)
    for coord, mean, count in zip(grid.coords, grid.mean_positions, grid.counts):
        ref = cells[tuple(coord)]
        assert count == len(ref)
        np.testing.assert_allclose(mean, np.mean(ref, axis=0), atol=1e-9)


def test_voxelize_coords_sorted_canonically(rng):
    pts = rng.uniform(-1, 1, (500, 3))
    grid = voxelize(pts, 8, BOUNDS)
    keys = grid.linear_keys()
    assert (np.diff(keys) > 0).all()
    shuffled = voxelize(pts[rng.permutation(500)], 8, BOUNDS)
    np.testing.assert_array_equal(grid.coords, shuffled.coords)
    np.testing.assert_allclose(grid.mean_positions, shuffled.mean_positions, atol=1e-12)


# ---------------------------------------------------------------------------
# FRNN


def test_frnn_known_line_case():
    pts = np.array(
        [[0.0, 0, 0], [0.1, 0, 0], [0.25, 0, 0], [1.0, 0, 0]]
    )
    index = FrnnIndex(pts, k=6, radius=0.3)
    ids, dists, counts = index.query_batch(np.array([[0.0, 0.0, 0.0]]))
    assert counts[0] == 3  # the point at x=1 sits outside the radius
    np.testing.assert_array_equal(ids[0, :3], [0, 1, 2])
    np.testing.assert_allclose(dists[0, :3], [0.0, 0.1, 0.25], atol=1e-12)
    assert (ids[0, 3:] == -1).all()
    assert np.isinf(dists[0, 3:]).all()


def test_frnn_tie_breaks_by_lower_id():
    pts = np.array([[0.1, 0, 0], [-0.1, 0, 0]])
    index = FrnnIndex(pts, k=1, radius=0.3)
    ids, dists, counts = index.query_batch(np.zeros((1, 3)))
    assert ids[0, 0] == 0 and counts[0] == 1


def test_frnn_includes_radius_boundary():
    pts = np.array([[0.3, 0.0, 0.0]])
    index = FrnnIndex(pts, k=2, radius=0.3)
    ids, dists, counts = index.query_batch(np.zeros((1, 3)))
    assert counts[0] == 1
    assert dists[0, 0] == pytest.approx(0.3, abs=1e-12)


def test_frnn_matches_bruteforce(rng):
    pts = rng.uniform(-2, 2, (400, 3))
    queries = rng.uniform(-2.2, 2.2, (60, 3))
    index = FrnnIndex(pts, k=5, radius=0.35)
    ids, dists, counts = index.query_batch(queries)
    bids, bdists, bcounts = index.query_bruteforce(queries)
    np.testing.assert_array_equal(ids, bids)
    np.testing.assert_array_equal(counts, bcounts)
    np.testing.assert_array_equal(dists[ids >= 0], bdists[bids >= 0])


def test_frnn_single_query_wrapper(rng):
    pts = rng.uniform(-1, 1, (80, 3))
    index = FrnnIndex(pts, k=4, radius=0.5)
    res = index.query(np.zeros(3))
    ids, dists, counts = index.query_batch(np.zeros((1, 3)))
    assert len(res) == counts[0]
    for slot, (pid, d) in enumerate(res):
        assert pid == ids[0, slot]
        assert d == pytest.approx(dists[0, slot])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 8))
def test_frnn_result_invariants_property(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (rng.integers(1, 120), 3))
    index = FrnnIndex(pts, k=k, radius=0.4)
    queries = rng.uniform(-1.1, 1.1, (20, 3))
    ids, dists, counts = index.query_batch(queries)
    assert ids.shape == (20, k) and dists.shape == (20, k)
    for q in range(20):
        c = counts[q]
        assert (ids[q, :c] >= 0).all() and (ids[q, c:] == -1).all()
        row = dists[q, :c]
        assert (np.diff(row) >= 0).all()
        assert (row <= 0.4 + 1e-12).all()
        # distances are true euclidean distances to the named points
        np.testing.assert_allclose(
            row, np.linalg.norm(pts[ids[q, :c]] - queries[q], axis=1), atol=1e-9
        )
