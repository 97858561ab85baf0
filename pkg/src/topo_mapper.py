"""
Per-agent topological maps of main and ghost nodes, and their merge.

Main nodes mark places an agent has been; ghost nodes are candidate goals in
unexplored space around a main node. Node ids are ``(agent, serial)`` tuples so
maps from different agents can be merged without renumbering.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

import distance_field
from config_manager import settings_from_dict
from errors import UndefinedSimilarityError
from nn_core import cosine_similarity

logger = logging.getLogger(__name__)

NodeId = Tuple[int, int]
Cell = Tuple[int, int]


@dataclass
class MapperConfig:
    similarity_threshold: float = 0.75
    ghost_radius: float = 3.0
    ghosts_per_main: int = 12
    pass_radius: float = 0.5
    ratio_edge: float = 3.0
    abs_edge: float = 10.0
    dedup_radius: float = 1.0
    merge_radius: float = 3.0
    signature_offset: float = 1.25
    mapper_no_distance: bool = False

    def __post_init__(self):
        if not -1.0 <= self.similarity_threshold <= 1.0:
            raise ValueError("similarity_threshold must lie in [-1, 1]")
        if self.ghosts_per_main < 0 or self.ghost_radius <= 0:
            raise ValueError("ghosts_per_main must be >= 0 and ghost_radius positive")

    @classmethod
    def from_dict(cls, data):
        return settings_from_dict(cls, data, 'mapper')


@dataclass
class MainNode:
    id: NodeId
    cell: Cell
    signature: np.ndarray
    created_step: int

    @property
    def origin(self):
        return self.id[0]


@dataclass
class GhostNode:
    id: NodeId
    parent: NodeId
    cell: Cell
    active: bool = True


def _edge(a, b):
    return (a, b) if a <= b else (b, a)


@dataclass
class TopoGraph:
    cell_size: float = 0.25
    owner: Optional[int] = None
    mains: Dict[NodeId, MainNode] = field(default_factory=dict)
    ghosts: Dict[NodeId, GhostNode] = field(default_factory=dict)
    edges: Set[Tuple[NodeId, NodeId]] = field(default_factory=set)
    last_localized: Dict[int, NodeId] = field(default_factory=dict)
    pending_spawn: List[NodeId] = field(default_factory=list)
    next_serial: int = 0

    def new_id(self):
        node_id = (self.owner, self.next_serial)
        self.next_serial += 1
        return node_id

    def add_edge(self, a, b):
        if a != b:
            self.edges.add(_edge(a, b))

    def active_ghosts(self):
        return [self.ghosts[g] for g in sorted(self.ghosts) if self.ghosts[g].active]

    def ghosts_of(self, main_id):
        return [g for g in self.ghosts.values() if g.parent == main_id]

    def sorted_mains(self):
        return [self.mains[m] for m in sorted(self.mains)]

    def neighbours(self, main_id):
        return sorted(b if a == main_id else a for a, b in self.edges if main_id in (a, b))

    def copy(self):
        return TopoGraph(
            cell_size=self.cell_size,
            owner=self.owner,
            mains={k: MainNode(v.id, v.cell, v.signature, v.created_step) for k, v in self.mains.items()},
            ghosts={k: GhostNode(v.id, v.parent, v.cell, v.active) for k, v in self.ghosts.items()},
            edges=set(self.edges),
            last_localized=dict(self.last_localized),
            pending_spawn=list(self.pending_spawn),
            next_serial=self.next_serial,
        )

    def structure(self):
        """Hashable summary used to compare graphs (signatures excluded)."""
        return (
            tuple((m.id, m.cell) for m in self.sorted_mains()),
            tuple((g.id, g.parent, g.cell, g.active) for g in (self.ghosts[k] for k in sorted(self.ghosts))),
            tuple(sorted(self.edges)),
        )

    def validate(self, max_ghosts_per_main=None):
        problems = []
        for a, b in self.edges:
            if a not in self.mains or b not in self.mains:
                problems.append(f"edge {a}-{b} references a missing main node")
            if a == b:
                problems.append(f"self-loop on {a}")
        for g in self.ghosts.values():
            if g.parent not in self.mains:
                problems.append(f"ghost {g.id} has missing parent {g.parent}")
        if max_ghosts_per_main is not None:
            counts = {}
            for g in self.ghosts.values():
                counts[g.parent] = counts.get(g.parent, 0) + 1
            for main_id, count in counts.items():
                if count > max_ghosts_per_main:
                    problems.append(f"main {main_id} holds {count} ghosts")
        return problems

    def to_record(self):
        return {
            'mains': [{'id': list(m.id), 'cell': list(m.cell), 'created_step': m.created_step}
                      for m in self.sorted_mains()],
            'ghosts': [{'id': list(g.id), 'parent': list(g.parent), 'cell': list(g.cell), 'active': g.active}
                       for g in (self.ghosts[k] for k in sorted(self.ghosts))],
            'edges': [[list(a), list(b)] for a, b in sorted(self.edges)],
        }

    @classmethod
    def from_record(cls, record, cell_size=0.25):
        graph = cls(cell_size=cell_size)
        for m in record.get('mains', []):
            node_id = tuple(m['id'])
            graph.mains[node_id] = MainNode(node_id, tuple(m['cell']), np.zeros(0), m.get('created_step', 0))
        for g in record.get('ghosts', []):
            node_id = tuple(g['id'])
            graph.ghosts[node_id] = GhostNode(node_id, tuple(g['parent']), tuple(g['cell']), g['active'])
        for a, b in record.get('edges', []):
            graph.add_edge(tuple(a), tuple(b))
        return graph


def snap_to_free(grid, cell, max_radius=3):
    """``cell`` if free, else the nearest free cell within ``max_radius`` rings (None if none)."""
    cell = (int(cell[0]), int(cell[1]))
    if grid.is_free(cell):
        return cell
    best, best_d = None, math.inf
    for r in range(1, max_radius + 1):
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                if max(abs(dx), abs(dy)) != r:
                    continue
                c = (cell[0] + dx, cell[1] + dy)
                d = dx * dx + dy * dy
                if d < best_d and grid.is_free(c):
                    best, best_d = c, d
        if best is not None:
            return best
    return None


class TopologicalMapper:
    def __init__(self, config: Optional[MapperConfig] = None):
        self.config = config or MapperConfig()
        self.logger = logging.getLogger(__name__)

    def new_graph(self, agent, cell_size):
        return TopoGraph(cell_size=cell_size, owner=agent)

    def _embed(self, signature):
        return np.asarray(signature, dtype=np.float64) - self.config.signature_offset

    def localize_and_update(self, graph, agent, observation, cell, step):
        """Localize to the most similar main node or create a new one; return (graph, id, created)."""
        embedding = self._embed(observation.depth_signature)
        if not graph.mains:
            node_id = self._create_main(graph, agent, cell, observation.depth_signature, step)
            return graph, node_id, True

        if not np.any(embedding):
            # featureless view: stay with the current node
            current = graph.last_localized.get(agent)
            if current in graph.mains:
                return graph, current, False

        best_id, best_sim = None, -math.inf
        for main in graph.sorted_mains():
            try:
                sim = cosine_similarity(embedding, self._embed(main.signature))
            except UndefinedSimilarityError:
                sim = 0.0
            if sim > best_sim:
                best_id, best_sim = main.id, sim

        if best_sim < self.config.similarity_threshold:
            previous = graph.last_localized.get(agent)
            node_id = self._create_main(graph, agent, cell, observation.depth_signature, step)
            if previous in graph.mains:
                graph.add_edge(previous, node_id)
            self.logger.debug(f"Agent {agent}: new main {node_id} at {cell} (similarity {best_sim:.3f})")
            return graph, node_id, True

        graph.last_localized[agent] = best_id
        return graph, best_id, False

    def _create_main(self, graph, agent, cell, signature, step):
        node_id = graph.new_id()
        graph.mains[node_id] = MainNode(node_id, tuple(cell), np.array(signature, dtype=np.float64), step)
        graph.last_localized[agent] = node_id
        return node_id

    def spawn_ghosts(self, graph, main_id, grid):
        """Place up to m ghosts at bearings 360/m apart and straight-line radius lambda."""
        main = graph.mains[main_id]
        if graph.ghosts_of(main_id):
            return graph
        m = self.config.ghosts_per_main
        radius = self.config.ghost_radius / grid.cell_size
        cx, cy = main.cell[0] + 0.5, main.cell[1] + 0.5
        steps = np.arange(0.5, radius + 1e-9, 0.5)
        if len(steps) == 0 or steps[-1] < radius:
            steps = np.append(steps, radius)
        taken = set()
        for b in range(m):
            theta = 2.0 * math.pi * b / m
            dx, dy = math.cos(theta), math.sin(theta)
            last_free = None
            for t in steps:
                c = (int(math.floor(cx + t * dx)), int(math.floor(cy + t * dy)))
                if c == main.cell:
                    continue
                if not grid.is_free(c):
                    break
                last_free = c
            if last_free is None or last_free in taken:
                continue
            taken.add(last_free)
            ghost_id = graph.new_id()
            graph.ghosts[ghost_id] = GhostNode(ghost_id, main_id, last_free, True)
        return graph

    def prune_ghosts(self, graph, explored_free, known_obstacle=None):
        """Deactivate ghosts standing on explored-free or known-obstacle cells."""
        for ghost in graph.ghosts.values():
            if not ghost.active:
                continue
            x, y = ghost.cell
            if explored_free[x, y] or (known_obstacle is not None and known_obstacle[x, y]):
                ghost.active = False
        return graph

    def promote_ghost(self, graph, agent, pose_estimate, signature, step, grid=None):
        """Turn every active ghost within pass_radius of the agent into a main node."""
        cs = graph.cell_size
        promoted = []
        for ghost_id in sorted(graph.ghosts):
            ghost = graph.ghosts[ghost_id]
            if not ghost.active:
                continue
            gx, gy = (ghost.cell[0] + 0.5) * cs, (ghost.cell[1] + 0.5) * cs
            if math.hypot(gx - pose_estimate.x, gy - pose_estimate.y) > self.config.pass_radius:
                continue
            if grid is not None and not grid.is_free(ghost.cell):
                continue
            del graph.ghosts[ghost_id]
            graph.mains[ghost_id] = MainNode(ghost_id, ghost.cell, np.array(signature, dtype=np.float64), step)
            if ghost.parent in graph.mains:
                graph.add_edge(ghost.parent, ghost_id)
            graph.pending_spawn.append(ghost_id)
            graph.last_localized[agent] = ghost_id
            promoted.append(ghost_id)
        if promoted:
            self.logger.debug(f"Agent {agent}: promoted ghosts {promoted}")
        return graph

    def prune_edges_and_spurious(self, graph, grid):
        """Drop far-geodesic main-main edges and ghosts that duplicate another parent's nodes."""
        if self.config.mapper_no_distance:
            return graph
        cfg = self.config
        cs = graph.cell_size

        endpoints = sorted({n for e in graph.edges for n in e if grid.is_free(graph.mains[n].cell)})
        fields = dict(zip(endpoints, distance_field.compute_many(
            grid, [graph.mains[n].cell for n in endpoints], limit=cfg.abs_edge)))
        for a, b in sorted(graph.edges):
            if a not in fields or b not in fields:
                continue
            ca, cb = graph.mains[a].cell, graph.mains[b].cell
            geodesic = fields[a].at(cb)
            straight = math.hypot(ca[0] - cb[0], ca[1] - cb[1]) * cs
            if geodesic > cfg.ratio_edge * straight or geodesic > cfg.abs_edge:
                graph.edges.discard((a, b))
                self.logger.debug(f"Deleted edge {a}-{b}: geodesic {geodesic:.2f} m vs straight {straight:.2f} m")

        candidates = [g for g in graph.active_ghosts() if grid.is_free(g.cell)]
        ghost_fields = dict(zip(
            [g.id for g in candidates],
            distance_field.compute_many(grid, [g.cell for g in candidates], limit=cfg.dedup_radius),
        ))
        removed = set()
        for ghost in candidates:
            near = ghost_fields[ghost.id]
            spurious = any(
                main.id != ghost.parent and near.at(main.cell) < cfg.dedup_radius
                for main in graph.mains.values()
            ) or any(
                other.id != ghost.id and other.id not in removed and other.parent != ghost.parent
                and near.at(other.cell) < cfg.dedup_radius
                for other in candidates
            )
            if spurious:
                removed.add(ghost.id)
                del graph.ghosts[ghost.id]
        if removed:
            self.logger.debug(f"Deleted {len(removed)} spurious ghosts")
        return graph

    def tick(self, graph, agent, observation, step, known_grid, explored_free):
        """One env-step mapper update for ``agent``; returns the localized main id."""
        for main_id in list(graph.pending_spawn):
            if main_id in graph.mains:
                self.spawn_ghosts(graph, main_id, known_grid)
        graph.pending_spawn.clear()

        pose = observation.pose_estimate
        cell = snap_to_free(known_grid, known_grid.cell_of(pose.x, pose.y))
        if cell is None:
            return graph.last_localized.get(agent)
        graph, localized, created = self.localize_and_update(graph, agent, observation, cell, step)
        if created:
            self.spawn_ghosts(graph, localized, known_grid)
        self.promote_ghost(graph, agent, pose, observation.depth_signature, step, known_grid)
        self.prune_ghosts(graph, explored_free, known_grid.obstacle)
        return graph.last_localized.get(agent, localized)

    def merge(self, graphs, transforms=None, rng=None):
        return merge(graphs, transforms, rng, self.config.merge_radius)


def merge(graphs, transforms=None, rng=None, merge_radius=3.0):
    """
    Express all graphs in the common frame and fuse close mains from different agents.

    ``transforms`` are per-graph integer cell offsets into the common frame.
    Nodes sharing an id are the same node, so merging a graph with itself is a no-op.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    graphs = list(graphs)
    transforms = list(transforms) if transforms is not None else [(0, 0)] * len(graphs)
    cell_size = graphs[0].cell_size if graphs else 0.25
    merged = TopoGraph(cell_size=cell_size)

    for graph, (ox, oy) in zip(graphs, transforms):
        for m in graph.sorted_mains():
            if m.id not in merged.mains:
                merged.mains[m.id] = MainNode(m.id, (m.cell[0] + ox, m.cell[1] + oy), m.signature, m.created_step)
        for gid in sorted(graph.ghosts):
            g = graph.ghosts[gid]
            if gid not in merged.ghosts:
                merged.ghosts[gid] = GhostNode(gid, g.parent, (g.cell[0] + ox, g.cell[1] + oy), g.active)
        merged.edges |= graph.edges
        merged.last_localized.update(graph.last_localized)

    while True:
        ids = sorted(merged.mains)
        if len(ids) < 2:
            break
        cells = np.array([merged.mains[i].cell for i in ids], dtype=np.float64)
        origins = np.array([i[0] for i in ids])
        diff = cells[:, None, :] - cells[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1]) * cell_size
        close = (dist <= merge_radius) & (origins[:, None] != origins[None, :])
        close = np.triu(close, k=1)
        if not close.any():
            break
        pairs = np.argwhere(close)
        i, j = min(pairs, key=lambda p: (dist[p[0], p[1]], p[0], p[1]))
        a, b = ids[i], ids[j]
        removed, survivor = (a, b) if rng.random() < 0.5 else (b, a)
        _redirect(merged, removed, survivor)
        logger.debug(f"Merged main {removed} into {survivor} ({dist[i, j]:.2f} m)")
    return merged


def _redirect(graph, removed, survivor):
    edges = set()
    for a, b in graph.edges:
        a = survivor if a == removed else a
        b = survivor if b == removed else b
        if a != b:
            edges.add(_edge(a, b))
    graph.edges = edges
    for ghost in graph.ghosts.values():
        if ghost.parent == removed:
            ghost.parent = survivor
    for agent, node in list(graph.last_localized.items()):
        if node == removed:
            graph.last_localized[agent] = survivor
    del graph.mains[removed]
