"""
Geodesic distances over occupancy grids.

A discrete Dijkstra wavefront on the 8-connected free-cell graph stands in for
the Fast Marching Method. Straight moves cost ``cell_size``; diagonal moves cost
``cell_size * sqrt(2)`` and are only allowed when both orthogonal neighbours are
free, so paths never cut obstacle corners. Distances are in meters.

Any object with a boolean ``obstacle`` array indexed ``[x, y]`` and a
``cell_size`` attribute is accepted as a grid.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import FrozenSet, List, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from errors import InvalidSourceError, NoPathError

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)

# (dx, dy, unit cost)
_MOVES = (
    (1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
    (1, 1, SQRT2), (1, -1, SQRT2), (-1, 1, SQRT2), (-1, -1, SQRT2),
)


@dataclass
class DistanceField:
    source_cells: FrozenSet[Tuple[int, int]]
    dist: np.ndarray
    cell_size: float

    def at(self, cell):
        x, y = cell
        if 0 <= x < self.dist.shape[0] and 0 <= y < self.dist.shape[1]:
            return float(self.dist[x, y])
        return math.inf


@lru_cache(maxsize=64)
def _grid_graph(obstacle_bytes, shape):
    """Adjacency of the free-cell graph in unit cell lengths, cached per obstacle layout."""
    obstacle = np.frombuffer(obstacle_bytes, dtype=bool).reshape(shape)
    free = ~obstacle
    width, height = shape
    index = np.arange(width * height).reshape(shape)
    rows, cols, weights = [], [], []
    for dx, dy, cost in _MOVES:
        xs = slice(max(0, -dx), width - max(0, dx))
        ys = slice(max(0, -dy), height - max(0, dy))
        xt = slice(max(0, dx), width - max(0, -dx))
        yt = slice(max(0, dy), height - max(0, -dy))
        ok = free[xs, ys] & free[xt, yt]
        if dx and dy:
            # both orthogonal neighbours must be free
            ok &= free[xt, ys] & free[xs, yt]
        rows.append(index[xs, ys][ok])
        cols.append(index[xt, yt][ok])
        weights.append(np.full(int(ok.sum()), cost))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    weights = np.concatenate(weights)
    n = width * height
    return csr_matrix((weights, (rows, cols)), shape=(n, n))


def _graph_for(grid):
    obstacle = np.ascontiguousarray(grid.obstacle, dtype=bool)
    return _grid_graph(obstacle.tobytes(), obstacle.shape)


def _check_sources(grid, sources):
    sources = [tuple(int(v) for v in s) for s in sources]
    if not sources:
        raise InvalidSourceError("At least one source cell is required")
    width, height = grid.obstacle.shape
    for x, y in sources:
        if not (0 <= x < width and 0 <= y < height):
            raise InvalidSourceError(f"Source {(x, y)} lies outside the {width}x{height} grid")
        if grid.obstacle[x, y]:
            raise InvalidSourceError(f"Source {(x, y)} lies on an obstacle")
    return sources


def compute(grid, sources) -> DistanceField:
    """Exact multi-source shortest-path distances (meters) over free cells; inf where unreachable."""
    sources = _check_sources(grid, sources)
    height = grid.obstacle.shape[1]
    indices = sorted({x * height + y for x, y in sources})
    dist = dijkstra(_graph_for(grid), directed=True, indices=indices, min_only=True)
    dist = dist.reshape(grid.obstacle.shape) * grid.cell_size
    dist[grid.obstacle] = math.inf
    return DistanceField(frozenset(sources), dist, grid.cell_size)


def compute_many(grid, sources, limit=None):
    """
    One single-source distance field per cell in ``sources``.

    With ``limit`` (meters) the wavefront stops there and farther cells read inf.
    """
    sources = [tuple(int(v) for v in s) for s in sources]
    if not sources:
        return []
    sources = _check_sources(grid, sources)
    height = grid.obstacle.shape[1]
    indices = [x * height + y for x, y in sources]
    unit_limit = np.inf if limit is None else limit / grid.cell_size + 1e-9
    dists = dijkstra(_graph_for(grid), directed=True, indices=indices, limit=unit_limit)
    fields = []
    for cell, row in zip(sources, np.atleast_2d(dists)):
        dist = row.reshape(grid.obstacle.shape) * grid.cell_size
        dist[grid.obstacle] = math.inf
        fields.append(DistanceField(frozenset([cell]), dist, grid.cell_size))
    return fields


def geodesic_distance(grid, a, b) -> float:
    field = compute(grid, [a])
    return field.at(tuple(b))


def shortest_path(grid, a, b) -> List[Tuple[int, int]]:
    """Ordered 8-adjacent free cells from ``a`` to ``b`` along a geodesic."""
    (a,) = _check_sources(grid, [a])
    b = tuple(int(v) for v in b)
    if a == b:
        return [a]
    height = grid.obstacle.shape[1]
    start = a[0] * height + a[1]
    goal = b[0] * height + b[1]
    width = grid.obstacle.shape[0]
    if not (0 <= b[0] < width and 0 <= b[1] < height) or grid.obstacle[b]:
        raise NoPathError(f"No path from {a} to {b}: target is not free")
    dist, predecessors = dijkstra(_graph_for(grid), directed=True, indices=start,
                                  return_predecessors=True)
    if not np.isfinite(dist[goal]):
        raise NoPathError(f"No path from {a} to {b}")
    path = [goal]
    while path[-1] != start:
        path.append(int(predecessors[path[-1]]))
    return [(idx // height, idx % height) for idx in reversed(path)]


def path_length(path, cell_size):
    total = 0.0
    for (x0, y0), (x1, y1) in zip(path, path[1:]):
        total += (SQRT2 if x0 != x1 and y0 != y1 else 1.0)
    return total * cell_size
