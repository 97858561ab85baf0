"""Procedural rooms-and-corridors maps."""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from config_manager import settings_from_dict
from errors import ConfigError, MapGenerationError
from grid_world import OccupancyGrid

logger = logging.getLogger(__name__)

# tier -> (side length in cells, default env-step horizon)
TIERS = {
    'small': (32, 300),
    'middle': (48, 300),
    'large': (64, 600),
    'xlarge': (96, 1800),
}


def tier_size(tier):
    if tier not in TIERS:
        raise ConfigError(f"Unknown map tier '{tier}', expected one of {sorted(TIERS)}")
    return TIERS[tier][0]


def tier_horizon(tier):
    if tier not in TIERS:
        raise ConfigError(f"Unknown map tier '{tier}', expected one of {sorted(TIERS)}")
    return TIERS[tier][1]


@dataclass
class MapParams:
    width: int = 48
    height: int = 48
    n_rooms: int = 6
    min_room: int = 5
    max_room: int = 14
    max_corridor_width: int = 2
    cell_size: float = 0.25
    max_retries: int = 20

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("maps must be at least 16x16")
        if self.n_rooms < 1:
            raise ValueError("n_rooms must be >= 1")
        if not 1 <= self.min_room <= self.max_room:
            raise ValueError("room sizes must satisfy 1 <= min_room <= max_room")
        if self.max_corridor_width not in (1, 2):
            raise ValueError("max_corridor_width must be 1 or 2")

    @classmethod
    def for_tier(cls, tier, **overrides):
        size = tier_size(tier)
        defaults = {'width': size, 'height': size, 'n_rooms': max(3, size // 8),
                    'max_room': max(6, size // 4)}
        defaults.update(overrides)
        return settings_from_dict(cls, defaults, 'maps')


def _carve_room(free, rng, params):
    inner_w, inner_h = params.width - 2, params.height - 2
    w = int(rng.integers(min(params.min_room, inner_w), min(params.max_room, inner_w) + 1))
    h = int(rng.integers(min(params.min_room, inner_h), min(params.max_room, inner_h) + 1))
    x0 = int(rng.integers(1, params.width - 1 - w + 1))
    y0 = int(rng.integers(1, params.height - 1 - h + 1))
    free[x0:x0 + w, y0:y0 + h] = True
    return (x0 + w // 2, y0 + h // 2)


def _carve_corridor(free, a, b, width, rng, params):
    """L-shaped corridor between two room centres, ``width`` cells wide."""
    (ax, ay), (bx, by) = a, b
    horizontal_first = bool(rng.integers(2))
    corner = (bx, ay) if horizontal_first else (ax, by)
    for (x0, y0), (x1, y1) in ((a, corner), (corner, b)):
        xs = slice(min(x0, x1), max(x0, x1) + 1)
        ys = slice(min(y0, y1), max(y0, y1) + 1)
        if y0 == y1:
            ys = slice(y0, min(y0 + width, params.height - 1))
        else:
            xs = slice(x0, min(x0 + width, params.width - 1))
        free[xs, ys] = True


def _is_connected(free):
    _, n_regions = ndimage.label(free)
    return n_regions == 1


def generate_map(params: MapParams, seed) -> OccupancyGrid:
    """Rooms joined by 1-2 cell corridors into a single free region, walled at the border."""
    rng = np.random.default_rng(seed)
    for attempt in range(params.max_retries):
        free = np.zeros((params.width, params.height), dtype=bool)
        centres = [_carve_room(free, rng, params) for _ in range(params.n_rooms)]
        centres.sort()
        for a, b in zip(centres, centres[1:]):
            width = int(rng.integers(1, params.max_corridor_width + 1))
            _carve_corridor(free, a, b, width, rng, params)
        free[0, :] = free[-1, :] = False
        free[:, 0] = free[:, -1] = False
        if _is_connected(free):
            grid = OccupancyGrid(~free, params.cell_size)
            logger.debug(f"Generated {params.width}x{params.height} map (seed {seed}, attempt {attempt})")
            return grid
        logger.debug(f"Map attempt {attempt} (seed {seed}) is disconnected, retrying")
    raise MapGenerationError(f"No connected map after {params.max_retries} attempts (seed {seed})")


def generate_map_set(params, count, seed):
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [generate_map(params, int(s)) for s in seeds]


def save_map_set(grids, out_dir, prefix='map'):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, grid in enumerate(grids):
        path = out_dir / f"{prefix}_{i:03d}.txt"
        grid.save(path)
        paths.append(path)
    logger.info(f"Wrote {len(paths)} maps to {out_dir}")
    return paths


def load_map_set(map_dir):
    paths = sorted(Path(map_dir).glob('*.txt'))
    if not paths:
        raise MapGenerationError(f"No map files found in {map_dir}")
    return [OccupancyGrid.load(p) for p in paths]
