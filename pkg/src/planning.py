"""Inputs and outputs shared by every global planner."""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

import distance_field
from grid_world import OccupancyGrid
from topo_mapper import NodeId, TopoGraph, snap_to_free

Cell = Tuple[int, int]

_NEIGHBOUR_SHIFTS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if dx or dy]


def frontier_mask(explored, known_obstacle):
    """Explored free cells with at least one unknown 8-neighbour inside the grid."""
    explored = np.asarray(explored, dtype=bool)
    known_free = explored & ~np.asarray(known_obstacle, dtype=bool)
    unknown = np.pad(~explored, 1, constant_values=False)
    width, height = explored.shape
    touches = np.zeros_like(explored)
    for dx, dy in _NEIGHBOUR_SHIFTS:
        touches |= unknown[1 + dx:1 + dx + width, 1 + dy:1 + dy + height]
    return known_free & touches


@dataclass
class PlanningContext:
    merged: TopoGraph
    agent_cells: List[Cell]
    known_grids: List[OccupancyGrid]
    explored: np.ndarray
    rng: np.random.Generator
    global_step: int = 0
    ghost_radius: float = 3.0

    @property
    def n_agents(self):
        return len(self.agent_cells)

    @property
    def cell_size(self):
        return self.known_grids[0].cell_size

    @property
    def shape(self):
        return self.explored.shape[1:]

    @cached_property
    def agent_fields(self):
        """Per-agent geodesic field over that agent's own optimistic map."""
        fields = []
        for cell, grid in zip(self.agent_cells, self.known_grids):
            start = snap_to_free(grid, cell)
            fields.append(distance_field.compute(grid, [start]))
        return fields

    @cached_property
    def union_explored(self):
        return self.explored.any(axis=0)

    @cached_property
    def union_grid(self):
        obstacle = np.zeros(self.shape, dtype=bool)
        for grid in self.known_grids:
            obstacle |= grid.obstacle
        return OccupancyGrid(obstacle, self.cell_size)

    @cached_property
    def union_agent_fields(self):
        """Per-agent geodesic field over the union of all agents' maps."""
        grid = self.union_grid
        return [distance_field.compute(grid, [snap_to_free(grid, c)]) for c in self.agent_cells]

    @cached_property
    def frontiers(self):
        mask = frontier_mask(self.union_explored, self.union_grid.obstacle)
        return [tuple(int(v) for v in c) for c in np.argwhere(mask)]


@dataclass
class PlannerDecision:
    goals: List[Cell]
    ghost_ids: Optional[List[NodeId]] = None
    record: Dict[str, Any] = field(default_factory=dict)
    training: Optional[Dict[str, Any]] = None

    def to_record(self):
        out = {'goals': [list(g) for g in self.goals]}
        if self.ghost_ids is not None:
            out['ghost_ids'] = [list(g) for g in self.ghost_ids]
        out.update(self.record)
        return out
