"""
Episode orchestration: simulator, per-agent mappers, map merging, global goal
selection every ``global_horizon`` env steps, and local execution in between.

Every episode produces an ``EpisodeLog`` of line-delimited JSON records that
is enough to replay the run through the simulator.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from baselines import LocalFollower, build_planner, nearest_frontier_goal
from config_manager import settings_from_dict
from errors import ConfigError, EpisodeStepError, ExplorationComplete, GoalUnreachableError
from grid_world import ActionCommand, GridWorld, OccupancyGrid, WorldConfig
from htp_planner import PlannerConfig
from map_generator import MapParams, generate_map, load_map_set, tier_horizon
from metrics import EpisodeMetrics, MetricsReport, compute_metrics
from planning import PlannerDecision, PlanningContext
from reward import RewardConfig, reward_terms
from topo_mapper import MapperConfig, TopologicalMapper, merge

logger = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    tier: str = 'middle'
    map_path: Optional[str] = None
    map_dir: Optional[str] = None
    n_agents: int = 2
    horizon: Optional[int] = None
    global_horizon: int = 15
    planner: str = 'nearest_ghost'
    variant: str = 'full'
    seed: int = 0
    episodes: int = 10
    workers: int = 1
    stop_at_target: bool = False
    world: WorldConfig = field(default_factory=WorldConfig)
    mapper: MapperConfig = field(default_factory=MapperConfig)
    network: PlannerConfig = field(default_factory=PlannerConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    maps: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_agents < 1:
            raise ConfigError("n_agents must be >= 1")
        if self.global_horizon < 1:
            raise ConfigError("global_horizon must be >= 1")
        if self.map_path and self.map_dir:
            raise ConfigError("Set at most one of map_path and map_dir")
        for path in (self.map_path, self.map_dir):
            if path and not Path(path).exists():
                raise ConfigError(f"Map source {path} does not exist")

    @property
    def episode_horizon(self):
        return self.horizon if self.horizon is not None else tier_horizon(self.tier)

    @property
    def target_coverage(self):
        return self.reward.target_coverage

    @classmethod
    def from_manager(cls, config_manager, **overrides):
        """Build from the ``experiment``, ``planner``, ``world``, ``mapper``, ``network``, ``reward`` and ``maps`` sections."""
        data = config_manager.section('experiment')
        planner = config_manager.section('planner')
        if 'name' in planner:
            data['planner'] = planner['name']
        if 'variant' in planner:
            data['variant'] = planner['variant']
        data.update({k: v for k, v in overrides.items() if v is not None})
        data['world'] = WorldConfig.from_dict(config_manager.section('world'))
        data['mapper'] = MapperConfig.from_dict(config_manager.section('mapper'))
        data['network'] = PlannerConfig.from_dict(config_manager.section('network'), data.get('variant', 'full'))
        data['reward'] = RewardConfig.from_dict(config_manager.section('reward'))
        data['maps'] = config_manager.section('maps')
        return settings_from_dict(cls, data, 'experiment')

    def map_for(self, seed, index=0):
        """Map for one episode: a fixed file, a pool entry, or a generated layout."""
        if self.map_path:
            return OccupancyGrid.load(self.map_path)
        if self.map_dir:
            grids = load_map_set(self.map_dir)
            return grids[index % len(grids)]
        return generate_map(MapParams.for_tier(self.tier, **self.maps), seed)


def episode_seeds(base_seed, count):
    """Per-episode seeds shared by every planner under comparison."""
    return [int(s) for s in np.random.SeedSequence(base_seed).generate_state(count)] if count else []


class EpisodeLog:
    def __init__(self, records=None):
        self.records = list(records or [])

    def append(self, record):
        self.records.append(record)

    def of_type(self, kind):
        return [r for r in self.records if r['type'] == kind]

    @property
    def meta(self):
        return self.of_type('meta')[0]

    @property
    def steps(self):
        return self.of_type('step')

    @property
    def global_steps(self):
        return self.of_type('global')

    @property
    def metrics(self):
        found = self.of_type('metrics')
        return found[-1] if found else None

    def to_jsonl(self):
        return ''.join(json.dumps(r, sort_keys=True) + '\n' for r in self.records)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())
        return path

    @classmethod
    def load(cls, path):
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        return cls(records)


def _pose_record(pose):
    return [pose.x, pose.y, pose.heading]


def _step_record(step, state, stats, actions=None, events=None):
    record = {
        'type': 'step',
        'step': step,
        'poses': [_pose_record(p) for p in state.poses],
        'actions': [a.value for a in actions] if actions is not None else None,
        'coverage': stats.coverage_ratio,
        'explored_cells': stats.explored_cells,
        'overlap_cells': stats.overlap_cells,
        'per_agent_cells': list(stats.per_agent_cells),
    }
    if events:
        record['events'] = events
    return record


class ExplorationSession:
    """One episode in progress, advanced one global step at a time."""

    def __init__(self, grid: OccupancyGrid, config: ExperimentConfig, seed, planner_name=None):
        self.config = config
        self.seed = seed
        self.grid = grid
        self.horizon = config.episode_horizon
        self.world = GridWorld(grid, replace(config.world, horizon=self.horizon))
        self.mapper = TopologicalMapper(config.mapper)
        self.logger = logging.getLogger(__name__)

        try:
            self.state = self.world.reset(config.n_agents, seed)
        except Exception as e:
            raise EpisodeStepError(f"Spawn failed: {e}", seed=seed, step=0) from e
        self.graphs = [self.mapper.new_graph(k, grid.cell_size) for k in range(config.n_agents)]
        self.followers = [LocalFollower() for _ in range(config.n_agents)]
        self.goals = [None] * config.n_agents
        self.planner_rng = np.random.default_rng([seed, 1])
        self.global_step = 0
        self.done = False
        self.success_step = None
        self.log = EpisodeLog()
        self.log.append({
            'type': 'meta',
            'seed': seed,
            'planner': planner_name,
            'n_agents': config.n_agents,
            'horizon': self.horizon,
            'global_horizon': config.global_horizon,
            'target_coverage': config.target_coverage,
            'world': asdict(self.world.config),
            'map': grid.to_text(),
            'explorable_cells': int(self.state.explorable.sum()),
        })
        self._update_maps()
        self.stats = self.world.coverage_stats(self.state)
        self.log.append(_step_record(0, self.state, self.stats))
        self._check_done()

    # Mapping

    def known_grids(self):
        return [self.world.known_grid(e) for e in self.state.explored_per_agent]

    def _update_maps(self):
        step = self.state.step
        for k, (graph, obs) in enumerate(zip(self.graphs, self.state.observations)):
            explored = self.state.explored_per_agent[k]
            try:
                self.mapper.tick(graph, k, obs, step, self.world.known_grid(explored),
                                 self.world.explored_free(explored))
            except Exception as e:
                raise EpisodeStepError(f"Mapper update failed for agent {k}: {e}", self.seed, step) from e

    def agent_cells(self):
        return [self.grid.cell_of(o.pose_estimate.x, o.pose_estimate.y) for o in self.state.observations]

    def planning_context(self):
        """Prune each agent's graph against its own map, merge the graphs and build the planner input."""
        known = self.known_grids()
        for k, (graph, grid) in enumerate(zip(self.graphs, known)):
            explored = self.state.explored_per_agent[k]
            self.mapper.prune_ghosts(graph, self.world.explored_free(explored), grid.obstacle)
            self.mapper.prune_edges_and_spurious(graph, grid)
        merge_rng = np.random.default_rng([self.seed, 2, self.global_step])
        merged = merge(self.graphs, rng=merge_rng, merge_radius=self.config.mapper.merge_radius)
        return PlanningContext(
            merged=merged,
            agent_cells=self.agent_cells(),
            known_grids=known,
            explored=self.state.explored_per_agent,
            rng=self.planner_rng,
            global_step=self.global_step,
            ghost_radius=self.config.mapper.ghost_radius,
        )

    def decide(self, planner, context):
        """Planner decision, falling back to nearest frontiers; None when nothing is left to explore."""
        try:
            return planner.select(context)
        except ExplorationComplete as e:
            self.logger.debug(f"{getattr(planner, 'name', planner)}: {e}; falling back to nearest frontier")
        try:
            goals = nearest_frontier_goal(context.frontiers, context.union_agent_fields)
        except ExplorationComplete:
            self.logger.info(f"Seed {self.seed}: nothing left to explore at step {self.state.step}")
            self.done = True
            return None
        return PlannerDecision(goals, record={'fallback': 'nearest_frontier'})

    # Execution

    def _reselect(self, agent):
        context = self.planning_context()
        goals = nearest_frontier_goal(context.frontiers, context.union_agent_fields)
        return goals[agent]

    def _actions(self, known):
        actions, events = [], []
        for k, (follower, obs) in enumerate(zip(self.followers, self.state.observations)):
            action = None
            if self.goals[k] is not None:
                try:
                    action = follower.act(obs.pose_estimate, self.goals[k], known[k])
                except GoalUnreachableError as e:
                    events.append({'agent': k, 'event': 'reselect', 'reason': str(e)})
                    try:
                        self.goals[k] = self._reselect(k)
                        follower.reset()
                    except ExplorationComplete:
                        self.goals[k] = None
            if action is None:
                action = ActionCommand.TURN_LEFT
            actions.append(action)
        return actions, events

    def advance(self, decision: PlannerDecision):
        """Follow ``decision`` for one global step; return its reward terms."""
        self.goals = [tuple(g) for g in decision.goals]
        for follower in self.followers:
            follower.reset()
        prev_stats = self.stats
        for _ in range(self.config.global_horizon):
            if self.done:
                break
            actions, events = self._actions(self.known_grids())
            try:
                self.state, _ = self.world.step(self.state, actions)
            except EpisodeStepError:
                raise
            except Exception as e:
                raise EpisodeStepError(f"Simulator step failed: {e}", self.seed, self.state.step) from e
            self._update_maps()
            self.stats = self.world.coverage_stats(self.state)
            self.log.append(_step_record(self.state.step, self.state, self.stats, actions, events))
            self._check_done()
        terms = reward_terms(prev_stats, self.stats, self.config.reward, first_step=self.global_step == 0)
        self.global_step += 1
        return terms

    def _check_done(self):
        target = self.config.target_coverage
        if self.success_step is None and self.stats.coverage_ratio >= target:
            self.success_step = self.state.step
        if self.state.step >= self.horizon or self.stats.explored_cells >= self.stats.explorable_cells:
            self.done = True
        elif self.config.stop_at_target and self.success_step is not None:
            self.done = True

    def record_global(self, step, context, decision, terms):
        self.log.append({
            'type': 'global',
            'step': step,
            'global_step': self.global_step - 1,
            'graph': context.merged.to_record(),
            'decision': decision.to_record(),
            'reward': terms.to_record(),
        })

    def finish(self):
        entry = compute_metrics(self.log, self.config.target_coverage)
        self.log.append({'type': 'metrics', **entry.to_record()})
        return self.log


def run_episode(config: ExperimentConfig, planner, seed, index=0) -> EpisodeLog:
    """Run one full episode; ``planner`` is a planner object or a registry name."""
    if isinstance(planner, str):
        planner = build_planner(planner, config.network)
    name = getattr(planner, 'name', type(planner).__name__)
    planner.reset(seed)
    grid = config.map_for(seed, index)
    session = ExplorationSession(grid, config, seed, planner_name=name)
    logger.info(f"Episode seed {seed}: planner {name}, {config.n_agents} agents, horizon {session.horizon}")
    while not session.done:
        step = session.state.step
        context = session.planning_context()
        decision = session.decide(planner, context)
        if decision is None:
            break
        terms = session.advance(decision)
        session.record_global(step, context, decision, terms)
    log = session.finish()
    logger.info(f"Episode seed {seed} finished at step {session.state.step}: "
                f"coverage {session.stats.coverage_ratio:.3f}")
    return log


@dataclass
class ReplayResult:
    log: EpisodeLog
    pose_mismatches: List[int]

    @property
    def consistent(self):
        return not self.pose_mismatches


def replay(log: EpisodeLog) -> ReplayResult:
    """Re-run the recorded actions through the simulator and rebuild the step records."""
    meta = log.meta
    grid = OccupancyGrid.from_text(meta['map'])
    world = GridWorld(grid, WorldConfig(**meta['world']))
    state = world.reset(meta['n_agents'], meta['seed'])
    rebuilt = EpisodeLog([meta])
    mismatches = []
    for record in log.steps:
        actions = None
        if record['actions'] is not None:
            actions = [ActionCommand(a) for a in record['actions']]
            state, _ = world.step(state, actions)
        if [_pose_record(p) for p in state.poses] != record['poses']:
            mismatches.append(record['step'])
        stats = world.coverage_stats(state)
        rebuilt.append(_step_record(state.step, state, stats, actions, record.get('events')))
    entry = compute_metrics(rebuilt, meta['target_coverage'])
    rebuilt.append({'type': 'metrics', **entry.to_record()})
    if mismatches:
        logger.warning(f"Replay of seed {meta['seed']} diverged at steps {mismatches[:5]}")
    return ReplayResult(rebuilt, mismatches)


def _episode_task(args):
    config, planner, seed, index = args
    return run_episode(config, planner, seed, index)


def run_episodes(config: ExperimentConfig, planner, seeds, workers=1, log_dir=None):
    """
    Episodes for every seed; logs are written per episode.

    Named planners may run in worker processes, planner objects run in-process.
    """
    tasks = [(config, planner, seed, i) for i, seed in enumerate(seeds)]
    if workers > 1 and len(tasks) > 1 and isinstance(planner, str):
        with ProcessPoolExecutor(max_workers=workers) as pool:
            logs = list(pool.map(_episode_task, tasks))
    else:
        logs = [_episode_task(t) for t in tasks]
    if log_dir is not None:
        label = planner if isinstance(planner, str) else planner.name
        safe = label.replace(':', '_').replace('/', '_')
        for i, log in enumerate(logs):
            log.save(Path(log_dir) / f"{safe}_n{config.n_agents}_ep{i:03d}.jsonl")
    return logs


def evaluate(config: ExperimentConfig, planner, episodes, seed, workers=1, log_dir=None):
    """Greedy episodes over the shared seed schedule, collected into a MetricsReport."""
    label = planner if isinstance(planner, str) else planner.name
    report = MetricsReport(label=label)
    if episodes <= 0:
        return report
    for log in run_episodes(config, planner, episode_seeds(seed, episodes), workers, log_dir):
        report.add(EpisodeMetrics.from_record(log.metrics))
    agg = report.aggregate()
    logger.info(f"{label}: steps {agg['steps_mean']:.1f} ({agg['steps_std']:.1f}), "
                f"coverage {agg['coverage_mean']:.3f}, overlap {agg['mutual_overlap_mean']:.3f}")
    return report


def compare(config: ExperimentConfig, planner_names, episodes, seed, agent_counts=None, workers=1,
            log_dir=None):
    """Paired comparison: every planner sees the same seeds, maps and spawns per episode index."""
    if not planner_names:
        raise ConfigError("compare needs at least one planner")
    reports = []
    for n_agents in agent_counts or [config.n_agents]:
        team_config = replace(config, n_agents=n_agents)
        for name in planner_names:
            report = evaluate(team_config, name, episodes, seed, workers, log_dir)
            report.label = name if agent_counts is None else f"{name}@{n_agents}"
            reports.append(report)
    return reports
