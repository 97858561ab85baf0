import heapq
import math
import time

import numpy as np
import pytest

import distance_field
from conftest import random_grid
from errors import InvalidSourceError, NoPathError
from grid_world import OccupancyGrid


def oracle_distances(grid, sources):
    """Plain heap Dijkstra over the same 8-connected, no-corner-cutting graph."""
    width, height = grid.obstacle.shape
    dist = np.full((width, height), math.inf)
    heap = []
    for s in sources:
        dist[s] = 0.0
        heap.append((0.0, s))
    heapq.heapify(heap)
    while heap:
        d, (x, y) = heapq.heappop(heap)
        if d > dist[x, y]:
            continue
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if not dx and not dy:
                    continue
                nx, ny = x + dx, y + dy
                if not grid.is_free((nx, ny)):
                    continue
                if dx and dy and not (grid.is_free((x + dx, y)) and grid.is_free((x, y + dy))):
                    continue
                nd = d + (math.sqrt(2.0) if dx and dy else 1.0) * grid.cell_size
                if nd < dist[nx, ny] - 1e-12:
                    dist[nx, ny] = nd
                    heapq.heappush(heap, (nd, (nx, ny)))
    return dist


def _free_cells(grid, rng, count):
    free = np.argwhere(grid.free)
    picks = rng.choice(len(free), size=count, replace=False)
    return [tuple(int(v) for v in free[i]) for i in picks]


def test_matches_oracle_on_random_grids(rng):
    for _ in range(30):
        w, h = int(rng.integers(16, 33)), int(rng.integers(16, 33))
        grid = random_grid(rng, w, h)
        sources = _free_cells(grid, rng, int(rng.integers(1, 4)))
        field = distance_field.compute(grid, sources)
        expected = oracle_distances(grid, sources)
        finite = np.isfinite(expected)
        assert np.array_equal(np.isfinite(field.dist), finite)
        assert np.allclose(field.dist[finite], expected[finite], atol=1e-9)


@pytest.mark.slow
def test_matches_oracle_on_many_large_grids():
    rng = np.random.default_rng(7)
    total = 0.0
    for _ in range(200):
        w, h = int(rng.integers(16, 65)), int(rng.integers(16, 65))
        grid = random_grid(rng, w, h)
        sources = _free_cells(grid, rng, 1)
        start = time.perf_counter()
        field = distance_field.compute(grid, sources)
        total += time.perf_counter() - start
        expected = oracle_distances(grid, sources)
        finite = np.isfinite(expected)
        assert np.array_equal(np.isfinite(field.dist), finite)
        assert np.allclose(field.dist[finite], expected[finite], atol=1e-9)
    assert total < 5.0


def test_straight_and_diagonal_costs(open_grid):
    field = distance_field.compute(open_grid, [(1, 1)])
    assert field.at((5, 1)) == pytest.approx(4 * 0.25)
    assert field.at((3, 3)) == pytest.approx(2 * math.sqrt(2) * 0.25)
    assert field.at((1, 1)) == 0.0
    assert field.at((0, 0)) == math.inf
    assert field.at((-1, 3)) == math.inf


def test_diagonals_do_not_cut_corners():
    grid = OccupancyGrid.open(16, 16)
    grid.obstacle[5, 6] = True
    grid.obstacle[6, 5] = True
    field = distance_field.compute(grid, [(5, 5)])
    assert field.at((6, 6)) > math.sqrt(2) * 0.25 + 1e-9


def test_multi_source_is_minimum_of_single_sources(two_room_grid):
    sources = [(3, 3), (20, 20)]
    joint = distance_field.compute(two_room_grid, sources)
    singles = [distance_field.compute(two_room_grid, [s]).dist for s in sources]
    assert np.allclose(joint.dist, np.minimum(*singles))


def test_invalid_sources(open_grid):
    with pytest.raises(InvalidSourceError):
        distance_field.compute(open_grid, [(0, 0)])
    with pytest.raises(InvalidSourceError):
        distance_field.compute(open_grid, [(40, 3)])
    with pytest.raises(InvalidSourceError):
        distance_field.compute(open_grid, [])


def test_disconnected_region_is_unreachable():
    grid = OccupancyGrid.open(16, 16)
    grid.obstacle[8, :] = True
    field = distance_field.compute(grid, [(2, 2)])
    assert field.at((12, 2)) == math.inf
    with pytest.raises(NoPathError):
        distance_field.shortest_path(grid, (2, 2), (12, 2))


def test_shortest_path_is_adjacent_and_geodesic(two_room_grid):
    path = distance_field.shortest_path(two_room_grid, (3, 3), (20, 20))
    assert path[0] == (3, 3) and path[-1] == (20, 20)
    for (x0, y0), (x1, y1) in zip(path, path[1:]):
        assert max(abs(x1 - x0), abs(y1 - y0)) == 1
        assert two_room_grid.is_free((x1, y1))
    expected = distance_field.geodesic_distance(two_room_grid, (3, 3), (20, 20))
    assert distance_field.path_length(path, two_room_grid.cell_size) == pytest.approx(expected)


def test_compute_many_honours_limit(open_grid):
    near, far = distance_field.compute_many(open_grid, [(2, 2), (10, 10)], limit=1.0)
    assert near.at((4, 2)) == pytest.approx(0.5)
    assert near.at((12, 2)) == math.inf
    assert far.at((10, 10)) == 0.0
