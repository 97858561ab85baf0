#!/usr/bin/env python3
"""
Multi-agent exploration workbench
Command-line entry point for map generation, episodes, training and comparisons
"""

import os
import sys
import json
import logging
import argparse
from pathlib import Path

# Add the current directory to Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config_manager import ConfigManager
from episode_runner import EpisodeLog, ExperimentConfig, compare, evaluate, replay, run_episode
from errors import ExplorationError
from map_generator import MapParams, generate_map_set, save_map_set
from metrics import comparison_table, write_comparison
from rl_training import Trainer, TrainerConfig


class ExplorationWorkbench:
    def __init__(self, config_dir=None, overrides=None):
        if config_dir is None:
            config_dir = Path(__file__).parent.parent / 'config'
        else:
            config_dir = Path(config_dir)

        self.default_config_path = config_dir / 'default_settings.json'
        self.user_config_path = config_dir / 'user_settings.json'

        self.config_manager = ConfigManager(
            str(self.default_config_path),
            str(self.user_config_path),
            overrides,
        )
        self.config = self.config_manager.config

        self._setup_logging()
        self.logger = logging.getLogger(__name__)

    def _setup_logging(self):
        """Setup logging configuration"""
        log_level = self.config.get('logging', {}).get('level', 'INFO')
        log_file = self.config.get('logging', {}).get('file')

        if log_file:
            log_dir = Path(log_file).parent
            log_dir.mkdir(parents=True, exist_ok=True)

        logging.basicConfig(
            level=getattr(logging, log_level),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            handlers=[
                logging.StreamHandler(),
                logging.FileHandler(log_file) if log_file else logging.NullHandler()
            ]
        )

    def experiment(self, **overrides):
        return ExperimentConfig.from_manager(self.config_manager, **overrides)

    def gen_maps(self, tier, count, seed, out_dir):
        params = MapParams.for_tier(tier, **self.config_manager.section('maps'))
        grids = generate_map_set(params, count, seed)
        return save_map_set(grids, out_dir, prefix=tier)

    def run(self, planner, seed, out, **overrides):
        config = self.experiment(planner=planner, **overrides)
        log = run_episode(config, config.planner, seed)
        if out:
            log.save(out)
            self.logger.info(f"Episode log written to {out}")
        return log

    def train(self, iterations, out_dir, **overrides):
        config = self.experiment(**overrides)
        trainer_config = TrainerConfig.from_dict(self.config_manager.section('trainer'))
        trainer = Trainer(config, trainer_config, out_dir=out_dir)
        return trainer.train(iterations)

    def eval(self, planner, episodes, seed, log_dir=None, **overrides):
        config = self.experiment(planner=planner, **overrides)
        episodes = config.episodes if episodes is None else episodes
        return evaluate(config, config.planner, episodes, seed, config.workers, log_dir)

    def compare(self, planners, episodes, seed, out, agent_counts=None, log_dir=None, **overrides):
        config = self.experiment(**overrides)
        episodes = config.episodes if episodes is None else episodes
        reports = compare(config, planners, episodes, seed, agent_counts, config.workers, log_dir)
        if out:
            write_comparison(reports, out)
        return reports

    def replay(self, log_path):
        log = EpisodeLog.load(log_path)
        result = replay(log)
        recorded = log.metrics
        recomputed = result.log.metrics
        if not result.consistent:
            raise ExplorationError(f"Replay diverged from the recorded poses at steps {result.pose_mismatches[:5]}")
        if recorded is not None and recorded != recomputed:
            raise ExplorationError(f"Replayed metrics {recomputed} differ from recorded {recorded}")
        return recomputed

    def export_plot_data(self, log_path, out):
        """Trajectories, coverage curve and graph snapshots of an episode, or curves of a training log."""
        records = [json.loads(line) for line in Path(log_path).read_text().splitlines() if line.strip()]
        if records and 'iteration' in records[0]:
            data = {'kind': 'training', 'iterations': records}
        else:
            log = EpisodeLog(records)
            meta = log.meta
            steps = log.steps
            data = {
                'kind': 'episode',
                'seed': meta['seed'],
                'planner': meta.get('planner'),
                'map': meta['map'],
                'trajectories': [[r['poses'][k] for r in steps] for k in range(meta['n_agents'])],
                'coverage_curve': [[r['step'], r['coverage']] for r in steps],
                'overlap_curve': [[r['step'], r['overlap_cells'] / r['explored_cells'] if r['explored_cells'] else 0.0]
                                  for r in steps],
                'graphs': [{'step': g['step'], 'graph': g['graph'], 'goals': g['decision']['goals']}
                           for g in log.global_steps],
                'metrics': log.metrics,
            }
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(data, sort_keys=True) + '\n')
        self.logger.info(f"Plot data written to {out}")
        return out


def _agent_counts(text):
    return [int(v) for v in text.split(',') if v.strip()]


def build_parser():
    parser = argparse.ArgumentParser(
        description='Multi-agent topological exploration workbench',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s gen-maps --tier middle --count 20 --out maps/
  %(prog)s run --planner nearest_ghost --seed 3 --out logs/ep.jsonl
  %(prog)s train --iterations 200 --out runs/htp
  %(prog)s compare --planners nearest_ghost,random_ghost --episodes 50 --out results/cmp
  %(prog)s replay logs/ep.jsonl
  %(prog)s --set experiment.n_agents=3 eval --planner htp:runs/htp/final.npz
"""
    )
    parser.add_argument('--config', '-c', help='Path to configuration directory')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a setting, e.g. world.noise=false (repeatable)')
    parser.add_argument('--verbose', '-v', action='store_true', help='Enable verbose logging')

    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-maps', help='Generate a procedural map set')
    p.add_argument('--tier', default='middle')
    p.add_argument('--count', type=int, default=10)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)

    p = sub.add_parser('run', help='Run one episode and write its log')
    p.add_argument('--planner', default=None)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--map', dest='map_path', default=None)
    p.add_argument('--agents', dest='n_agents', type=int, default=None)
    p.add_argument('--horizon', type=int, default=None)
    p.add_argument('--out', default=None)

    p = sub.add_parser('train', help='Train the hierarchical planner with PPO')
    p.add_argument('--iterations', type=int, default=None)
    p.add_argument('--out', required=True)

    p = sub.add_parser('eval', help='Evaluate one planner over seeded episodes')
    p.add_argument('--planner', default=None)
    p.add_argument('--episodes', type=int, default=None)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--map-dir', dest='map_dir', default=None)
    p.add_argument('--logs', dest='log_dir', default=None)

    p = sub.add_parser('compare', help='Paired comparison of several planners')
    p.add_argument('--planners', required=True)
    p.add_argument('--episodes', type=int, default=None)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--agents', type=_agent_counts, default=None)
    p.add_argument('--map-dir', dest='map_dir', default=None)
    p.add_argument('--logs', dest='log_dir', default=None)
    p.add_argument('--out', default=None)

    p = sub.add_parser('replay', help='Replay an episode log and check its metrics')
    p.add_argument('log')

    p = sub.add_parser('export-plot-data', help='Export trajectories, curves and graph snapshots')
    p.add_argument('log')
    p.add_argument('--out', required=True)
    return parser


def main(argv=None):
    """Main entry point"""
    args = build_parser().parse_args(argv)

    try:
        app = ExplorationWorkbench(args.config, args.overrides)

        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)

        if args.command == 'gen-maps':
            paths = app.gen_maps(args.tier, args.count, args.seed, args.out)
            print(f"Wrote {len(paths)} maps to {args.out}")
        elif args.command == 'run':
            log = app.run(args.planner, args.seed, args.out, map_path=args.map_path,
                          n_agents=args.n_agents, horizon=args.horizon)
            print(json.dumps(log.metrics, sort_keys=True))
        elif args.command == 'train':
            records = app.train(args.iterations, args.out)
            print(f"Trained {len(records)} iterations; checkpoints in {args.out}")
        elif args.command == 'eval':
            report = app.eval(args.planner, args.episodes, args.seed, args.log_dir, map_dir=args.map_dir)
            print(comparison_table([report]).to_string(index=False))
        elif args.command == 'compare':
            planners = [p.strip() for p in args.planners.split(',') if p.strip()]
            reports = app.compare(planners, args.episodes, args.seed, args.out, args.agents, args.log_dir,
                                  map_dir=args.map_dir)
            print(comparison_table(reports).to_string(index=False))
        elif args.command == 'replay':
            metrics = app.replay(args.log)
            print(json.dumps(metrics, sort_keys=True))
        elif args.command == 'export-plot-data':
            app.export_plot_data(args.log, args.out)

    except Exception as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == '__main__':
    main()
