"""
Classical global planners and the local execution stack they share with the
learned planner.

Graph planners pick active ghost nodes of the merged topological map; metric
planners pick frontier cells of the union explored map. Every planner exposes
``select(context) -> PlannerDecision`` so the episode runner treats them alike.
"""

import logging
import math

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

import distance_field
from errors import ConfigError, ExplorationComplete, GoalUnreachableError
from grid_world import ActionCommand
from htp_planner import HierarchicalTopologicalPlanner, PlannerConfig
from planning import PlannerDecision
from topo_mapper import snap_to_free

logger = logging.getLogger(__name__)

# Cost used in place of inf for the assignment solver
UNREACHABLE_COST = 1e9

_NEIGHBOURS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if dx or dy]


# Topological frontier

def information_gain(unknown, radius_cells):
    """Number of unknown cells within ``radius_cells`` (Euclidean) of every cell."""
    r = int(math.floor(radius_cells))
    offsets = np.arange(-r, r + 1)
    disk = (offsets[:, None] ** 2 + offsets[None, :] ** 2) <= radius_cells ** 2
    return ndimage.convolve(np.asarray(unknown, dtype=np.int64), disk.astype(np.int64),
                            mode='constant', cval=0)


def normalized_cost(distance, gain):
    if gain <= 0:
        return math.inf
    return distance / gain


def topological_frontier_choice(distances, gains):
    """Index of the lowest distance/gain cost; ties go to the lowest index."""
    costs = np.array([normalized_cost(d, g) for d, g in zip(distances, gains)])
    if not np.isfinite(costs).any():
        return int(np.argmin(distances))
    return int(np.argmin(costs))


def topological_frontier_goal(merged, agent_fields, unknown, ghost_radius_cells):
    ghosts = merged.active_ghosts()
    if not ghosts:
        raise ExplorationComplete("No active ghost node for the topological frontier planner")
    gain_map = information_gain(unknown, ghost_radius_cells)
    gains = [int(gain_map[g.cell]) for g in ghosts]
    chosen = []
    for field in agent_fields:
        distances = [field.at(g.cell) for g in ghosts]
        chosen.append(ghosts[topological_frontier_choice(distances, gains)])
    return chosen, gains


# Ghost references

def nearest_ghost_goal(merged, agent_fields):
    ghosts = merged.active_ghosts()
    if not ghosts:
        raise ExplorationComplete("No active ghost node")
    chosen = []
    for field in agent_fields:
        distances = np.array([field.at(g.cell) for g in ghosts])
        chosen.append(ghosts[int(np.argmin(distances))])
    return chosen


def random_ghost_goal(merged, rng, n_agents):
    ghosts = merged.active_ghosts()
    if not ghosts:
        raise ExplorationComplete("No active ghost node")
    return [ghosts[int(rng.integers(len(ghosts)))] for _ in range(n_agents)]


# Metric planners

def voronoi_partition(agent_fields):
    """Owner agent of every cell by geodesic distance; ties to the lowest id, -1 when unreachable."""
    stacked = np.stack([f.dist for f in agent_fields])
    owner = np.argmin(stacked, axis=0)
    owner[~np.isfinite(stacked).any(axis=0)] = -1
    return owner


def nearest_frontier_goal(frontiers, agent_fields):
    if not frontiers:
        raise ExplorationComplete("No frontier cell left")
    goals = []
    for field in agent_fields:
        distances = np.array([field.at(c) for c in frontiers])
        if not np.isfinite(distances).any():
            raise ExplorationComplete("No reachable frontier cell left")
        goals.append(frontiers[int(np.argmin(distances))])
    return goals


def voronoi_goal(frontiers, agent_fields):
    """Each agent targets the nearest frontier in its own partition, else its nearest frontier overall."""
    if not frontiers:
        raise ExplorationComplete("No frontier cell left")
    owner = voronoi_partition(agent_fields)
    goals, escaped = [], []
    for k, field in enumerate(agent_fields):
        owned = [c for c in frontiers if owner[c] == k]
        candidates = owned or frontiers
        if not owned:
            escaped.append(k)
        distances = np.array([field.at(c) for c in candidates])
        if not np.isfinite(distances).any():
            raise ExplorationComplete("No reachable frontier cell left")
        goals.append(candidates[int(np.argmin(distances))])
    return goals, escaped


def cluster_frontiers(points, k, seed=0, max_iter=50):
    """Lloyd k-means over frontier coordinates; returns (labels, centroids)."""
    points = np.asarray(points, dtype=np.float64)
    model = KMeans(n_clusters=k, n_init=1, max_iter=max_iter, random_state=seed, algorithm='lloyd')
    labels = model.fit_predict(points)
    return labels, model.cluster_centers_


def assign_clusters(costs):
    """One-to-one agent/cluster matching of minimal total cost; returns {agent: cluster}."""
    costs = np.where(np.isfinite(costs), costs, UNREACHABLE_COST)
    rows, cols = linear_sum_assignment(costs)
    return {int(r): int(c) for r, c in zip(rows, cols)}


def greedy_tour(start, cells):
    """Visit ``cells`` by repeatedly moving to the closest remaining one."""
    remaining = list(cells)
    tour = []
    here = np.asarray(start, dtype=np.float64)
    while remaining:
        dists = [math.hypot(c[0] - here[0], c[1] - here[1]) for c in remaining]
        nxt = remaining.pop(int(np.argmin(dists)))
        tour.append(nxt)
        here = np.asarray(nxt, dtype=np.float64)
    return tour


def coscan_goal(frontiers, agent_cells, agent_fields, cell_size, seed=0, max_iter=50):
    """Cluster frontiers, match clusters to agents and order each cluster as a greedy tour."""
    if not frontiers:
        raise ExplorationComplete("No frontier cell left")
    n_agents = len(agent_cells)
    k = min(n_agents, len(frontiers))
    points = np.asarray(frontiers, dtype=np.float64) * cell_size
    labels, centroids = cluster_frontiers(points, k, seed, max_iter)

    members = [[frontiers[i] for i in np.nonzero(labels == c)[0]] for c in range(k)]
    anchors = []
    for c in range(k):
        member_points = np.asarray(members[c], dtype=np.float64) * cell_size
        nearest = np.argmin(np.linalg.norm(member_points - centroids[c], axis=1))
        anchors.append(members[c][int(nearest)])
    costs = np.array([[field.at(a) for a in anchors] for field in agent_fields])
    assignment = assign_clusters(costs)

    tours = {}
    fallback = nearest_frontier_goal(frontiers, agent_fields)
    goals = []
    for agent in range(n_agents):
        if agent in assignment:
            tour = greedy_tour(agent_cells[agent], members[assignment[agent]])
        else:
            tour = [fallback[agent]]
        tours[agent] = tour
        goals.append(tour[0])
    return goals, tours, assignment


# Local execution

def _wrap(angle):
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def _step_ok(grid, cell, dx, dy):
    target = (cell[0] + dx, cell[1] + dy)
    if not grid.is_free(target):
        return False
    if dx and dy:
        return grid.is_free((cell[0] + dx, cell[1])) and grid.is_free((cell[0], cell[1] + dy))
    return True


def next_waypoint(cell, goal_field, grid):
    """Free 8-neighbour of ``cell`` that lies closest to the goal along the field."""
    best, best_cost = None, goal_field.at(cell)
    for dx, dy in _NEIGHBOURS:
        if not _step_ok(grid, cell, dx, dy):
            continue
        neighbour = (cell[0] + dx, cell[1] + dy)
        cost = goal_field.at(neighbour)
        if cost < best_cost - 1e-12:
            best, best_cost = neighbour, cost
    return best


def local_execute(pose, goal_cell, known_grid, heading_tolerance_deg=15.0, goal_field=None):
    """
    Heading controller toward ``goal_cell`` on the agent's known map.

    Returns ``None`` once the agent stands in the goal cell. When the goal is
    not connected to the agent, the agent heads for the reachable cell closest
    to the goal instead.
    """
    goal_cell = tuple(int(v) for v in goal_cell)
    cell = snap_to_free(known_grid, known_grid.cell_of(pose.x, pose.y))
    if cell is None:
        raise GoalUnreachableError(f"Agent at ({pose.x:.2f}, {pose.y:.2f}) has no free cell nearby")
    if cell == goal_cell:
        return None
    if not known_grid.is_free(goal_cell):
        raise GoalUnreachableError(f"Goal {goal_cell} is not free on the known map")

    if goal_field is None:
        goal_field = distance_field.compute(known_grid, [goal_cell])
    if not math.isfinite(goal_field.at(cell)):
        reachable = np.argwhere(np.isfinite(distance_field.compute(known_grid, [cell]).dist))
        gaps = np.hypot(reachable[:, 0] - goal_cell[0], reachable[:, 1] - goal_cell[1])
        proxy = tuple(int(v) for v in reachable[int(np.argmin(gaps))])
        if proxy == cell:
            raise GoalUnreachableError(f"Goal {goal_cell} cannot be approached from {cell}")
        goal_field = distance_field.compute(known_grid, [proxy])

    waypoint = next_waypoint(cell, goal_field, known_grid)
    if waypoint is None:
        raise GoalUnreachableError(f"No downhill neighbour from {cell} toward {goal_cell}")
    wx, wy = known_grid.center_of(waypoint)
    error = _wrap(math.atan2(wy - pose.y, wx - pose.x) - pose.heading)
    if abs(error) > math.radians(heading_tolerance_deg):
        return ActionCommand.TURN_LEFT if error > 0 else ActionCommand.TURN_RIGHT
    return ActionCommand.FORWARD


class LocalFollower:
    """Per-agent wrapper around ``local_execute`` that tightens the heading tolerance when stuck."""

    def __init__(self, heading_tolerance_deg=15.0, stuck_tolerance_deg=5.0, stuck_limit=8):
        self.heading_tolerance_deg = heading_tolerance_deg
        self.stuck_tolerance_deg = stuck_tolerance_deg
        self.stuck_limit = stuck_limit
        self.last_position = None
        self.last_action = None
        self.stuck_steps = 0
        self.logger = logging.getLogger(__name__)

    def reset(self):
        self.last_position = None
        self.last_action = None
        self.stuck_steps = 0

    def act(self, pose, goal_cell, known_grid):
        position = (round(pose.x, 9), round(pose.y, 9))
        if self.last_action is ActionCommand.FORWARD and position == self.last_position:
            self.stuck_steps += 1
        elif self.last_action is ActionCommand.FORWARD:
            self.stuck_steps = 0
        if self.stuck_steps >= self.stuck_limit:
            self.stuck_steps = 0
            raise GoalUnreachableError(f"Agent stuck for {self.stuck_limit} steps toward {goal_cell}")

        tolerance = self.stuck_tolerance_deg if self.stuck_steps else self.heading_tolerance_deg
        action = local_execute(pose, goal_cell, known_grid, tolerance)
        self.last_position = position
        self.last_action = action
        return action


# Planner objects

class NearestGhostPlanner:
    name = 'nearest_ghost'

    def reset(self, seed=None):
        pass

    def select(self, context):
        chosen = nearest_ghost_goal(context.merged, context.agent_fields)
        return PlannerDecision([g.cell for g in chosen], [g.id for g in chosen])


class RandomGhostPlanner:
    name = 'random_ghost'

    def reset(self, seed=None):
        pass

    def select(self, context):
        chosen = random_ghost_goal(context.merged, context.rng, context.n_agents)
        return PlannerDecision([g.cell for g in chosen], [g.id for g in chosen])


class TopologicalFrontierPlanner:
    name = 'topological_frontier'

    def reset(self, seed=None):
        pass

    def select(self, context):
        radius_cells = context.ghost_radius / context.cell_size
        chosen, gains = topological_frontier_goal(
            context.merged, context.agent_fields, ~context.union_explored, radius_cells)
        return PlannerDecision([g.cell for g in chosen], [g.id for g in chosen], {'gains': gains})


class NearestFrontierPlanner:
    name = 'nearest_frontier'

    def reset(self, seed=None):
        pass

    def select(self, context):
        return PlannerDecision(nearest_frontier_goal(context.frontiers, context.union_agent_fields))


class VoronoiPlanner:
    name = 'voronoi'

    def reset(self, seed=None):
        pass

    def select(self, context):
        goals, escaped = voronoi_goal(context.frontiers, context.union_agent_fields)
        return PlannerDecision(goals, record={'escaped': escaped})


class CoScanPlanner:
    name = 'coscan'

    def __init__(self, seed=0, max_iter=50):
        self.seed = seed
        self.max_iter = max_iter

    def reset(self, seed=None):
        if seed is not None:
            self.seed = seed

    def select(self, context):
        goals, tours, assignment = coscan_goal(
            context.frontiers, context.agent_cells, context.union_agent_fields, context.cell_size,
            seed=(self.seed + context.global_step) % (2 ** 31), max_iter=self.max_iter,
        )
        record = {
            'assignment': {str(k): v for k, v in assignment.items()},
            'tours': {str(k): [list(c) for c in tour] for k, tour in tours.items()},
        }
        return PlannerDecision(goals, record=record)


PLANNERS = {
    cls.name: cls for cls in (
        NearestGhostPlanner, RandomGhostPlanner, TopologicalFrontierPlanner,
        NearestFrontierPlanner, VoronoiPlanner, CoScanPlanner,
    )
}


def planner_names():
    return ['htp'] + sorted(PLANNERS)


def build_planner(name, planner_config=None, training=False):
    """Instantiate a planner by name; ``htp:<path>`` loads a checkpoint."""
    if name == 'htp':
        return HierarchicalTopologicalPlanner(planner_config or PlannerConfig(), training=training)
    if name.startswith('htp:'):
        return HierarchicalTopologicalPlanner.from_checkpoint(name[len('htp:'):], training=training)
    if name not in PLANNERS:
        raise ConfigError(f"Unknown planner '{name}', expected one of {planner_names()} or htp:<checkpoint>")
    return PLANNERS[name]()
