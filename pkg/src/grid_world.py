"""
Deterministic 2D occupancy-grid world for N agents.

Cells are addressed as ``(x, y)`` integer tuples and every per-cell array is
indexed ``[x, y]``. Poses are continuous, in meters, in the same frame.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

import distance_field
from config_manager import settings_from_dict
from errors import EpisodeStepError, MapFormatError, UnsatisfiableSpawnError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

Cell = Tuple[int, int]


class ActionCommand(Enum):
    TURN_LEFT = 'TurnLeft'
    TURN_RIGHT = 'TurnRight'
    FORWARD = 'Forward'


@dataclass
class WorldConfig:
    n_rays: int = 32
    visibility_oversample: int = 4
    sensor_range: float = 2.5
    forward_step: float = 0.25
    turn_degrees: float = 10.0
    sigma_pos: float = 0.02
    sigma_heading_degrees: float = 0.5
    sigma_action: float = 0.05
    noise: bool = True
    spawn_radius: float = 2.0
    spawn_attempts: int = 50
    horizon: int = 300

    def __post_init__(self):
        if self.n_rays < 1 or self.visibility_oversample < 1:
            raise ValueError("n_rays and visibility_oversample must be >= 1")
        if self.sensor_range <= 0 or self.forward_step <= 0:
            raise ValueError("sensor_range and forward_step must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")

    @classmethod
    def from_dict(cls, data):
        return settings_from_dict(cls, data, 'world')

    def zero_noise(self):
        return replace(self, noise=False)


@dataclass
class OccupancyGrid:
    obstacle: np.ndarray
    cell_size: float = 0.25

    def __post_init__(self):
        self.obstacle = np.asarray(self.obstacle, dtype=bool)
        if self.obstacle.ndim != 2:
            raise MapFormatError("Occupancy grid must be two-dimensional")

    @property
    def width(self):
        return self.obstacle.shape[0]

    @property
    def height(self):
        return self.obstacle.shape[1]

    @property
    def free(self):
        return ~self.obstacle

    @property
    def diagonal(self):
        """Map diagonal in meters."""
        return math.hypot(self.width, self.height) * self.cell_size

    def in_bounds(self, cell):
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def is_free(self, cell):
        return self.in_bounds(cell) and not self.obstacle[cell[0], cell[1]]

    def cell_of(self, x, y):
        return int(math.floor(x / self.cell_size)), int(math.floor(y / self.cell_size))

    def center_of(self, cell):
        return (cell[0] + 0.5) * self.cell_size, (cell[1] + 0.5) * self.cell_size

    def validate(self):
        """Check the invariants a playable map must satisfy; return the list of problems."""
        problems = []
        if self.width < 16 or self.height < 16:
            problems.append(f"grid is {self.width}x{self.height}, minimum is 16x16")
        border = np.concatenate([
            self.obstacle[0, :], self.obstacle[-1, :], self.obstacle[:, 0], self.obstacle[:, -1]
        ])
        if not border.all():
            problems.append("boundary cells must be obstacles")
        free = self.free
        n_free = int(free.sum())
        if n_free == 0:
            problems.append("grid has no free cells")
        else:
            labels, n_regions = ndimage.label(free)
            largest = np.bincount(labels.ravel())[1:].max()
            if largest < 0.7 * n_free:
                problems.append("no connected free region holds 70% of the free cells")
        return problems

    @classmethod
    def open(cls, width, height, cell_size=0.25, walls=True):
        obstacle = np.zeros((width, height), dtype=bool)
        if walls:
            obstacle[0, :] = obstacle[-1, :] = True
            obstacle[:, 0] = obstacle[:, -1] = True
        return cls(obstacle, cell_size)

    @classmethod
    def from_text(cls, text):
        lines = text.splitlines()
        if not lines:
            raise MapFormatError("Map file is empty")
        header = lines[0].split()
        if len(header) != 3:
            raise MapFormatError(f"Map header must be 'width height cell_size', got '{lines[0]}'")
        try:
            width, height, cell_size = int(header[0]), int(header[1]), float(header[2])
        except ValueError as e:
            raise MapFormatError(f"Invalid map header '{lines[0]}': {e}") from e
        rows = lines[1:]
        if len(rows) != height:
            raise MapFormatError(f"Expected {height} rows, found {len(rows)}")
        obstacle = np.zeros((width, height), dtype=bool)
        for y, row in enumerate(rows):
            if len(row) != width:
                raise MapFormatError(f"Row {y} has {len(row)} cells, expected {width}")
            bad = set(row) - {'#', '.'}
            if bad:
                raise MapFormatError(f"Row {y} contains unknown symbols {sorted(bad)}")
            obstacle[:, y] = np.frombuffer(row.encode('ascii'), dtype=np.uint8) == ord('#')
        return cls(obstacle, cell_size)

    def to_text(self):
        lines = [f"{self.width} {self.height} {self.cell_size!r}"]
        for y in range(self.height):
            lines.append(''.join('#' if v else '.' for v in self.obstacle[:, y]))
        return '\n'.join(lines) + '\n'

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_text())


@dataclass(frozen=True)
class AgentPose:
    x: float
    y: float
    heading: float


@dataclass
class Observation:
    depth_signature: np.ndarray
    pose_estimate: AgentPose
    local_visible_cells: np.ndarray

    @property
    def visible_set(self):
        return {(int(x), int(y)) for x, y in self.local_visible_cells}


@dataclass
class EpisodeState:
    step: int
    poses: Tuple[AgentPose, ...]
    explored_per_agent: np.ndarray
    rng_seed: int
    rng_state: dict
    explorable: np.ndarray
    observations: Tuple[Observation, ...] = field(default_factory=tuple)

    @property
    def n_agents(self):
        return len(self.poses)


@dataclass
class CoverageStats:
    coverage_ratio: float
    explored_cells: int
    overlap_cells: int
    explorable_cells: int
    cell_area: float
    per_agent_cells: Tuple[int, ...]

    @property
    def explored_area(self):
        return self.explored_cells * self.cell_area

    @property
    def overlap_area(self):
        return self.overlap_cells * self.cell_area

    @property
    def mutual_overlap(self):
        if self.explored_cells == 0:
            return 0.0
        return self.overlap_cells / self.explored_cells


def coverage_from_masks(explored_per_agent, explorable, cell_area):
    """Coverage and overlap counts for per-agent explored masks restricted to explorable cells."""
    masks = np.asarray(explored_per_agent, dtype=bool) & np.asarray(explorable, dtype=bool)[None]
    counts = masks.sum(axis=0)
    explored = int((counts > 0).sum())
    overlap = int((counts >= 2).sum())
    total = int(np.asarray(explorable).sum())
    ratio = explored / total if total else 0.0
    return CoverageStats(
        coverage_ratio=ratio,
        explored_cells=explored,
        overlap_cells=overlap,
        explorable_cells=total,
        cell_area=cell_area,
        per_agent_cells=tuple(int(m.sum()) for m in masks),
    )


class GridWorld:
    def __init__(self, grid: OccupancyGrid, config: Optional[WorldConfig] = None):
        self.grid = grid
        self.config = config or WorldConfig()
        self.logger = logging.getLogger(__name__)

        n_total = self.config.n_rays * self.config.visibility_oversample
        bearings = TWO_PI * np.arange(n_total) / n_total
        self._directions = np.stack([np.cos(bearings), np.sin(bearings)], axis=1)
        self._sample_step = grid.cell_size / 4.0
        n_samples = int(math.ceil(self.config.sensor_range / self._sample_step))
        self._sample_t = self._sample_step * np.arange(1, n_samples + 1)
        self._sample_t[-1] = min(self._sample_t[-1], self.config.sensor_range)

    # Spawning

    def reset(self, n_agents, seed):
        if n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        rng = np.random.default_rng(seed)
        free_cells = np.argwhere(self.grid.free)
        if len(free_cells) < n_agents:
            raise UnsatisfiableSpawnError(f"Only {len(free_cells)} free cells for {n_agents} agents")

        labels, _ = ndimage.label(self.grid.free)
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        region = np.argwhere(labels == sizes.argmax())

        cells = None
        explorable = None
        for attempt in range(self.config.spawn_attempts):
            anchor = tuple(int(v) for v in region[rng.integers(len(region))])
            cells, explorable = self._place_around(anchor, n_agents, rng)
            if cells is not None:
                break
            self.logger.debug(f"Spawn attempt {attempt} around {anchor} failed")
        if cells is None:
            raise UnsatisfiableSpawnError(
                f"No placement of {n_agents} agents within {self.config.spawn_radius} m geodesic distance"
            )

        poses = tuple(
            AgentPose(*self.grid.center_of(cell), float(rng.uniform(0.0, TWO_PI))) for cell in cells
        )
        state = EpisodeState(
            step=0,
            poses=poses,
            explored_per_agent=np.zeros((n_agents,) + self.grid.obstacle.shape, dtype=bool),
            rng_seed=seed,
            rng_state=rng.bit_generator.state,
            explorable=explorable,
        )
        state, _ = self._observe(state, rng)
        self.logger.debug(f"Spawned {n_agents} agents at {cells} (seed {seed})")
        return state

    def _place_around(self, anchor, n_agents, rng):
        radius = self.config.spawn_radius + 1e-9
        anchor_field = distance_field.compute(self.grid, [anchor])
        explorable = np.isfinite(anchor_field.dist)
        placed = [anchor]
        fields = [anchor_field]
        candidates = np.argwhere(anchor_field.dist <= radius)
        order = rng.permutation(len(candidates))
        for idx in order:
            if len(placed) == n_agents:
                break
            cell = tuple(int(v) for v in candidates[idx])
            if cell in placed:
                continue
            if all(f.dist[cell] <= radius for f in fields):
                placed.append(cell)
                fields.append(distance_field.compute(self.grid, [cell]))
        if len(placed) < n_agents:
            return None, None
        return placed, explorable

    # Dynamics

    def step(self, state: EpisodeState, actions):
        if state.step >= self.config.horizon:
            raise EpisodeStepError("Episode horizon reached", seed=state.rng_seed, step=state.step)
        if len(actions) != state.n_agents:
            raise ValueError(f"Expected {state.n_agents} actions, got {len(actions)}")
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
        poses = tuple(self._apply_action(pose, action, rng) for pose, action in zip(state.poses, actions))
        moved = replace(state, step=state.step + 1, poses=poses,
                        explored_per_agent=state.explored_per_agent.copy())
        return self._observe(moved, rng)

    def _apply_action(self, pose, action, rng):
        cfg = self.config
        sigma = cfg.sigma_action if cfg.noise else 0.0
        noise = rng.normal(0.0, sigma)
        action = ActionCommand(action)
        if action is ActionCommand.FORWARD:
            distance = cfg.forward_step * (1.0 + noise)
            return self._move_forward(pose, distance)
        turn = math.radians(cfg.turn_degrees) * (1.0 + noise)
        if action is ActionCommand.TURN_RIGHT:
            turn = -turn
        return AgentPose(pose.x, pose.y, (pose.heading + turn) % TWO_PI)

    def _move_forward(self, pose, distance):
        dx, dy = math.cos(pose.heading), math.sin(pose.heading)
        n_sub = max(1, int(math.ceil(abs(distance) / self._sample_step)))
        x, y = pose.x, pose.y
        for i in range(1, n_sub + 1):
            t = distance * i / n_sub
            nx, ny = pose.x + t * dx, pose.y + t * dy
            if not self.grid.is_free(self.grid.cell_of(nx, ny)):
                break
            x, y = nx, ny
        return AgentPose(x, y, pose.heading)

    # Sensing

    def sense(self, pose, rng=None):
        cfg = self.config
        depths, visible = self._cast(pose.x, pose.y)
        if rng is None:
            rng = np.random.default_rng(0)
        sigma_pos = cfg.sigma_pos if cfg.noise else 0.0
        sigma_heading = math.radians(cfg.sigma_heading_degrees) if cfg.noise else 0.0
        ex, ey = rng.normal(0.0, sigma_pos, size=2)
        eh = rng.normal(0.0, sigma_heading)
        estimate = AgentPose(pose.x + ex, pose.y + ey, (pose.heading + eh) % TWO_PI)
        signature = depths[::cfg.visibility_oversample].copy()
        return Observation(signature, estimate, visible)

    def _cast(self, ox, oy):
        """Cast all rays from (ox, oy); return per-ray depths and the visible cell array."""
        grid = self.grid
        cs = grid.cell_size
        rng_max = self.config.sensor_range
        dirs = self._directions
        t = self._sample_t
        px = ox + dirs[:, 0:1] * t[None, :]
        py = oy + dirs[:, 1:2] * t[None, :]
        cx = np.floor(px / cs).astype(np.int64)
        cy = np.floor(py / cs).astype(np.int64)
        inside = (cx >= 0) & (cx < grid.width) & (cy >= 0) & (cy < grid.height)
        blocked = ~inside
        blocked[inside] = grid.obstacle[cx[inside], cy[inside]]
        has_hit = blocked.any(axis=1)
        first = np.where(has_hit, blocked.argmax(axis=1), blocked.shape[1])

        depths = np.full(len(dirs), rng_max)
        rays = np.nonzero(has_hit)[0]
        if len(rays):
            hx = cx[rays, first[rays]]
            hy = cy[rays, first[rays]]
            enter = np.maximum(
                self._slab_entry(ox, dirs[rays, 0], hx * cs, (hx + 1) * cs),
                self._slab_entry(oy, dirs[rays, 1], hy * cs, (hy + 1) * cs),
            )
            depths[rays] = np.clip(enter, 0.0, rng_max)

        seen = np.arange(blocked.shape[1])[None, :] <= first[:, None]
        seen &= inside
        vis_x = np.concatenate([cx[seen], [int(math.floor(ox / cs))]])
        vis_y = np.concatenate([cy[seen], [int(math.floor(oy / cs))]])
        linear = np.unique(vis_x * grid.height + vis_y)
        visible = np.stack([linear // grid.height, linear % grid.height], axis=1)
        return depths, visible

    @staticmethod
    def _slab_entry(origin, direction, lo, hi):
        with np.errstate(divide='ignore', invalid='ignore'):
            t1 = (lo - origin) / direction
            t2 = (hi - origin) / direction
        entry = np.minimum(t1, t2)
        return np.where(direction == 0.0, -np.inf, entry)

    def _observe(self, state, rng):
        observations = []
        explored = state.explored_per_agent
        for k, pose in enumerate(state.poses):
            obs = self.sense(pose, rng)
            cells = obs.local_visible_cells
            explored[k, cells[:, 0], cells[:, 1]] = True
            observations.append(obs)
        observations = tuple(observations)
        new_state = replace(state, explored_per_agent=explored, rng_state=rng.bit_generator.state,
                            observations=observations)
        return new_state, observations

    # Accounting

    def coverage_stats(self, state):
        return coverage_from_masks(state.explored_per_agent, state.explorable, self.grid.cell_size ** 2)

    def known_grid(self, explored):
        """Optimistic map: only obstacles already seen block; unknown cells count as free."""
        return OccupancyGrid(np.asarray(explored, dtype=bool) & self.grid.obstacle, self.grid.cell_size)

    def explored_free(self, explored):
        return np.asarray(explored, dtype=bool) & self.grid.free
