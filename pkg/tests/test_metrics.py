import math

import pandas as pd
import pytest

from episode_runner import EpisodeLog
from metrics import (EpisodeMetrics, MetricsReport, comparison_table, compute_metrics, mutual_overlap,
                     write_comparison)


def _log(coverages, overlap_cells=None, explored_cells=None, horizon=300):
    records = [{'type': 'meta', 'seed': 1, 'planner': 'nearest_ghost', 'n_agents': 2, 'horizon': horizon}]
    for step, coverage in enumerate(coverages):
        records.append({
            'type': 'step', 'step': step, 'coverage': coverage,
            'overlap_cells': overlap_cells[step] if overlap_cells else 0,
            'explored_cells': explored_cells[step] if explored_cells else 100,
        })
    return EpisodeLog(records)


def _entry(steps, coverage=0.9, overlap=0.1, horizon=300):
    return EpisodeMetrics(0, 'x', 2, horizon, steps, coverage, overlap, 'target' if steps else 'end')


def test_steps_is_first_step_reaching_target():
    coverages = [0.0] * 137 + [0.9, 0.95]
    overlap = [0] * 137 + [25, 40]
    metrics = compute_metrics(_log(coverages, overlap), 0.9)
    assert metrics.steps == 137
    assert metrics.mutual_overlap == pytest.approx(0.25)
    assert metrics.overlap_measured_at == 'target'
    assert metrics.coverage == 0.95


def test_unreached_target_measures_overlap_at_end():
    metrics = compute_metrics(_log([0.1, 0.5], [0, 10], [20, 50]), 0.9)
    assert metrics.steps is None and not metrics.reached
    assert metrics.steps_or_horizon == 300
    assert metrics.mutual_overlap == pytest.approx(0.2)
    assert metrics.overlap_measured_at == 'end'


def test_mutual_overlap_of_cell_sets():
    assert mutual_overlap([{(0, 0), (1, 0), (2, 0)}, {(2, 0), (3, 0)}]) == 0.25
    assert mutual_overlap([{(0, 0), (1, 0)}]) == 0.0
    assert mutual_overlap([set(), set()]) == 0.0


def test_aggregate_counts_unreached_at_horizon():
    report = MetricsReport([_entry(100), _entry(200), _entry(None, coverage=0.5)], 'nearest_ghost')
    agg = report.aggregate()
    assert agg['episodes'] == 3
    assert agg['steps_mean'] == pytest.approx(200.0)
    assert agg['steps_std'] == pytest.approx(math.sqrt(20000 / 3))
    assert agg['reach_rate'] == pytest.approx(2 / 3)


def test_empty_report_aggregates_to_nan():
    agg = MetricsReport(label='none').aggregate()
    assert agg['episodes'] == 0
    assert math.isnan(agg['steps_mean']) and math.isnan(agg['coverage_std'])


def test_record_round_trip():
    entry = _entry(None)
    assert EpisodeMetrics.from_record(entry.to_record()) == entry
    assert entry.to_record()['reached'] is False


def test_comparison_table_formats_mean_and_std():
    table = comparison_table([MetricsReport([_entry(100), _entry(100)], 'a')])
    assert list(table.columns) == ['planner', 'episodes', 'steps', 'coverage', 'mutual_overlap', 'reach_rate']
    assert table.loc[0, 'steps'] == '100.000 (0.000)'
    assert table.loc[0, 'planner'] == 'a'


def test_write_comparison_files(tmp_path):
    reports = [MetricsReport([_entry(100)], 'a'), MetricsReport([_entry(None)], 'b')]
    summary_csv, episodes_csv, summary_txt = write_comparison(reports, tmp_path / 'out' / 'cmp')
    assert pd.read_csv(summary_csv)['planner'].tolist() == ['a', 'b']
    episodes = pd.read_csv(episodes_csv)
    assert episodes['label'].tolist() == ['a', 'b']
    assert episodes['steps_or_horizon'].tolist() == [100, 300]
    assert 'planner' in summary_txt.read_text()
