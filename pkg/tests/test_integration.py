import json

import numpy as np
import pytest

from baselines import planner_names
from episode_runner import EpisodeLog, ExperimentConfig, ExplorationSession, compare, evaluate, replay, run_episode
from grid_world import OccupancyGrid, WorldConfig
from htp_planner import HierarchicalTopologicalPlanner, PlannerConfig
from main import main
from map_generator import MapParams, generate_map, save_map_set
from reward import RewardConfig
from rl_training import Trainer, TrainerConfig, evaluate as greedy_evaluate
from topo_mapper import MapperConfig

SMALL_NETWORK = {'embed_dim': 4, 'hidden_dim': 6, 'history_length': 3}


@pytest.fixture
def open_map(tmp_path):
    path = tmp_path / 'open.txt'
    OccupancyGrid.open(16, 16).save(path)
    return str(path)


@pytest.fixture
def rooms_map(tmp_path):
    path = tmp_path / 'rooms.txt'
    generate_map(MapParams(width=24, height=24, n_rooms=3, min_room=5, max_room=8), 4).save(path)
    return str(path)


def _config(map_path, **overrides):
    base = dict(map_path=map_path, n_agents=2, horizon=200, global_horizon=10,
                network=PlannerConfig(**SMALL_NETWORK))
    base.update(overrides)
    return ExperimentConfig(**base)


def test_nearest_ghost_covers_small_open_map(open_map):
    log = run_episode(_config(open_map), 'nearest_ghost', seed=1)
    metrics = log.metrics
    assert metrics['reached']
    assert metrics['coverage'] >= 0.9
    assert metrics['steps'] <= 200
    coverages = [r['coverage'] for r in log.steps]
    assert coverages == sorted(coverages)
    assert log.global_steps


def test_zero_horizon_episode_has_no_steps(open_map):
    log = run_episode(_config(open_map, horizon=0), 'nearest_ghost', seed=1)
    assert [r['step'] for r in log.steps] == [0]
    assert log.global_steps == []
    assert log.metrics['horizon'] == 0


def test_same_seed_gives_identical_logs(rooms_map):
    config = _config(rooms_map, horizon=60)
    first = run_episode(config, 'random_ghost', seed=5)
    second = run_episode(config, 'random_ghost', seed=5)
    assert first.to_jsonl() == second.to_jsonl()
    other = run_episode(config, 'random_ghost', seed=6)
    assert other.to_jsonl() != first.to_jsonl()


def test_replay_reproduces_poses_and_metrics(rooms_map, tmp_path):
    log = run_episode(_config(rooms_map, horizon=60), 'nearest_frontier', seed=2)
    path = log.save(tmp_path / 'ep.jsonl')
    result = replay(EpisodeLog.load(path))
    assert result.consistent
    assert result.log.metrics == log.metrics


def test_noise_free_worlds_replay_too(open_map):
    config = _config(open_map, horizon=40, world=WorldConfig(noise=False))
    log = run_episode(config, 'voronoi', seed=3)
    assert replay(log).consistent


@pytest.mark.parametrize('name', planner_names())
def test_every_planner_runs_an_episode(rooms_map, name):
    log = run_episode(_config(rooms_map, horizon=45, n_agents=3), name, seed=7)
    assert log.metrics['n_agents'] == 3
    assert 0.0 < log.metrics['coverage'] <= 1.0
    for record in log.global_steps:
        assert len(record['decision']['goals']) == 3


@pytest.mark.parametrize('variant', ['no_history', 'single', 'concat', 'mean'])
def test_planner_variants_run_an_episode(rooms_map, variant):
    config = _config(rooms_map, horizon=30, variant=variant,
                     network=PlannerConfig.from_dict(SMALL_NETWORK, variant))
    log = run_episode(config, 'htp', seed=8)
    assert log.metrics['coverage'] > 0.0


def test_mapper_without_distance_pruning_runs(rooms_map):
    config = _config(rooms_map, horizon=30, mapper=MapperConfig(mapper_no_distance=True))
    log = run_episode(config, 'nearest_ghost', seed=9)
    assert log.metrics['coverage'] > 0.0


def test_spawn_already_at_target_pays_success_on_first_global_step(tmp_path):
    path = tmp_path / 'wide.txt'
    OccupancyGrid.open(40, 40).save(path)
    config = _config(str(path), horizon=30, reward=RewardConfig(target_coverage=0.01))
    log = run_episode(config, 'nearest_ghost', seed=2)
    assert log.steps[0]['coverage'] >= 0.01
    rewards = [g['reward']['success'] for g in log.global_steps]
    assert rewards[0] == 1.0
    assert all(r == 0.0 for r in rewards[1:])


def test_ghosts_are_pruned_only_by_their_own_agents_map():
    grid = OccupancyGrid.open(40, 40)
    config = ExperimentConfig(n_agents=2, horizon=50, network=PlannerConfig(**SMALL_NETWORK))
    session = ExplorationSession(grid, config, seed=3)
    session.planning_context()

    explored = session.state.explored_per_agent
    ghost = next(g for g in session.graphs[1].active_ghosts()
                 if grid.is_free(g.cell) and not explored[1][g.cell])

    explored[0][ghost.cell] = True
    session.planning_context()
    assert session.graphs[1].ghosts[ghost.id].active

    explored[1][ghost.cell] = True
    session.planning_context()
    assert not session.graphs[1].ghosts[ghost.id].active


def test_compare_gives_identical_rows_for_identical_planners(rooms_map, tmp_path):
    config = _config(rooms_map, horizon=30)
    reports = compare(config, ['nearest_ghost', 'nearest_ghost'], 2, seed=4, log_dir=tmp_path / 'logs')
    assert reports[0].summary_row() == reports[1].summary_row()
    assert sorted(p.name for p in (tmp_path / 'logs').iterdir()) == [
        'nearest_ghost_n2_ep000.jsonl', 'nearest_ghost_n2_ep001.jsonl']


def test_compare_labels_agent_counts(rooms_map):
    reports = compare(_config(rooms_map, horizon=20), ['random_ghost'], 1, seed=0, agent_counts=[1, 2])
    assert [r.label for r in reports] == ['random_ghost@1', 'random_ghost@2']
    assert [r.entries[0].n_agents for r in reports] == [1, 2]


def test_map_pool_is_used_by_episode_index(tmp_path):
    grids = [generate_map(MapParams(width=20, height=20, n_rooms=2), s) for s in (1, 2)]
    save_map_set(grids, tmp_path / 'pool')
    config = ExperimentConfig(map_dir=str(tmp_path / 'pool'), horizon=10,
                              network=PlannerConfig(**SMALL_NETWORK))
    report = evaluate(config, 'nearest_ghost', 2, seed=0)
    assert len(report) == 2


def test_cli_run_is_reproducible_and_replays(config_dir, open_map, tmp_path, capsys):
    outputs = []
    for name in ('a.jsonl', 'b.jsonl'):
        out = tmp_path / name
        main(['--config', config_dir, 'run', '--planner', 'nearest_ghost', '--seed', '3',
              '--map', open_map, '--horizon', '60', '--out', str(out)])
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]
    capsys.readouterr()

    main(['--config', config_dir, 'replay', str(tmp_path / 'a.jsonl')])
    replayed = json.loads(capsys.readouterr().out)
    recorded = EpisodeLog.load(tmp_path / 'a.jsonl').metrics
    assert replayed == recorded


def test_cli_exports_plot_data(config_dir, open_map, tmp_path):
    log_path = tmp_path / 'ep.jsonl'
    main(['--config', config_dir, '--set', 'experiment.n_agents=3', 'run', '--map', open_map,
          '--horizon', '30', '--out', str(log_path)])
    plot_path = tmp_path / 'plot.json'
    main(['--config', config_dir, 'export-plot-data', str(log_path), '--out', str(plot_path)])
    data = json.loads(plot_path.read_text())
    assert data['kind'] == 'episode'
    assert len(data['trajectories']) == 3
    assert 1 < len(data['coverage_curve']) <= 31
    assert data['coverage_curve'][0] == [0, data['coverage_curve'][0][1]]


def test_cli_compare_writes_tables(config_dir, open_map, tmp_path):
    main(['--config', config_dir, '--set', 'experiment.horizon=20', '--set', f'experiment.map_path="{open_map}"',
          'compare', '--planners', 'nearest_ghost,voronoi', '--episodes', '1', '--out', str(tmp_path / 'cmp')])
    assert (tmp_path / 'cmp_summary.csv').exists()
    assert (tmp_path / 'cmp_episodes.csv').exists()
    assert 'voronoi' in (tmp_path / 'cmp_summary.txt').read_text()


def test_cli_unknown_planner_exits_with_error(config_dir, open_map, capsys):
    with pytest.raises(SystemExit) as exc:
        main(['--config', config_dir, 'run', '--planner', 'wander', '--map', open_map, '--horizon', '5'])
    assert exc.value.code == 1
    assert 'Error:' in capsys.readouterr().err


def test_short_training_run_writes_checkpoints(open_map, tmp_path):
    experiment = _config(open_map, horizon=40, planner='htp')
    config = TrainerConfig(rollout_length=2, n_envs=1, epochs=1, minibatch_size=2, iterations=2,
                           checkpoint_every=1, eval_every=2, eval_episodes=1)
    trainer = Trainer(experiment, config, out_dir=tmp_path / 'run')
    records = trainer.train()
    assert [r['iteration'] for r in records] == [1, 2]
    assert 'eval_steps_mean' in records[1]
    for name in ('checkpoint_0001.npz', 'checkpoint_0002.npz', 'final.npz', 'training_log.jsonl'):
        assert (tmp_path / 'run' / name).exists()
    lines = (tmp_path / 'run' / 'training_log.jsonl').read_text().splitlines()
    assert len(lines) == 2

    log = run_episode(experiment, f"htp:{tmp_path / 'run' / 'final.npz'}", seed=1)
    assert log.metrics['planner'] == 'htp'


@pytest.fixture
def middle_maps(tmp_path):
    params = MapParams.for_tier('middle')
    save_map_set([generate_map(params, s) for s in range(10)], tmp_path / 'middle')
    return str(tmp_path / 'middle')


@pytest.mark.slow
def test_graph_baselines_order_on_middle_maps(middle_maps):
    config = ExperimentConfig(map_dir=middle_maps, tier='middle', n_agents=2,
                              network=PlannerConfig(**SMALL_NETWORK))
    names = ['nearest_ghost', 'random_ghost', 'voronoi', 'nearest_frontier']
    reports = {r.label: r.aggregate() for r in compare(config, names, 20, seed=0)}
    assert reports['nearest_ghost']['steps_mean'] < reports['random_ghost']['steps_mean']
    assert reports['voronoi']['mutual_overlap_mean'] <= reports['nearest_frontier']['mutual_overlap_mean']


@pytest.mark.slow
def test_trained_planner_needs_fewer_steps_than_untrained_and_random(middle_maps):
    network = PlannerConfig(embed_dim=16, hidden_dim=32, history_length=10)
    experiment = ExperimentConfig(map_dir=middle_maps, tier='middle', n_agents=2, planner='htp',
                                  network=network)
    config = TrainerConfig(iterations=200, checkpoint_every=0, eval_every=0, seed=0)
    trainer = Trainer(experiment, config)
    trainer.train()

    episodes = 50
    trained = greedy_evaluate(trainer.planner, experiment, episodes, seed=100).aggregate()
    untrained = greedy_evaluate(HierarchicalTopologicalPlanner(network), experiment, episodes, seed=100).aggregate()
    random_ghost = evaluate(experiment, 'random_ghost', episodes, seed=100).aggregate()
    assert trained['steps_mean'] < random_ghost['steps_mean']
    assert trained['steps_mean'] < untrained['steps_mean']


@pytest.mark.slow
def test_longer_training_keeps_losses_finite(open_map, tmp_path):
    experiment = _config(open_map, horizon=100, planner='htp')
    config = TrainerConfig(rollout_length=4, n_envs=2, iterations=10, checkpoint_every=0, eval_every=0)
    records = Trainer(experiment, config).train()
    for record in records:
        if record['transitions']:
            assert np.isfinite(record['policy_loss']) and np.isfinite(record['value_loss'])
