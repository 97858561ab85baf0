"""Exploration metrics (Steps, Coverage, Mutual Overlap) and their aggregation."""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import pandas as pd

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ('steps', 'coverage', 'mutual_overlap')


@dataclass
class EpisodeMetrics:
    seed: int
    planner: Optional[str]
    n_agents: int
    horizon: int
    steps: Optional[int]
    coverage: float
    mutual_overlap: float
    overlap_measured_at: str

    @property
    def reached(self):
        return self.steps is not None

    @property
    def steps_or_horizon(self):
        """Steps with unreached episodes counted at the horizon."""
        return self.steps if self.steps is not None else self.horizon

    def to_record(self):
        record = asdict(self)
        record['reached'] = self.reached
        return record

    @classmethod
    def from_record(cls, record):
        return cls(**{k: record[k] for k in cls.__dataclass_fields__})


def mutual_overlap(agent_cells):
    """Cells seen by two or more agents over all cells seen, from per-agent cell sets."""
    union = set().union(*agent_cells) if agent_cells else set()
    if not union:
        return 0.0
    counts = {}
    for cells in agent_cells:
        for c in set(cells):
            counts[c] = counts.get(c, 0) + 1
    return sum(1 for n in counts.values() if n >= 2) / len(union)


def compute_metrics(log, target=0.9) -> EpisodeMetrics:
    """
    Metrics of a finished episode log.

    Steps is the first env step whose coverage reaches ``target`` (None if
    never). Mutual Overlap is measured at that step, or at the last step when
    the target is never reached.
    """
    meta = log.meta
    steps = log.steps
    reached = next((r for r in steps if r['coverage'] >= target), None)
    at = reached if reached is not None else steps[-1]
    overlap = at['overlap_cells'] / at['explored_cells'] if at['explored_cells'] else 0.0
    return EpisodeMetrics(
        seed=meta['seed'],
        planner=meta.get('planner'),
        n_agents=meta['n_agents'],
        horizon=meta['horizon'],
        steps=reached['step'] if reached is not None else None,
        coverage=steps[-1]['coverage'],
        mutual_overlap=overlap,
        overlap_measured_at='target' if reached is not None else 'end',
    )


@dataclass
class MetricsReport:
    entries: List[EpisodeMetrics] = field(default_factory=list)
    label: str = ''

    def __len__(self):
        return len(self.entries)

    def add(self, entry):
        self.entries.append(entry)

    def frame(self):
        columns = list(EpisodeMetrics.__dataclass_fields__) + ['reached', 'steps_or_horizon']
        rows = [{**e.to_record(), 'steps_or_horizon': e.steps_or_horizon} for e in self.entries]
        return pd.DataFrame(rows, columns=columns)

    def aggregate(self):
        """Mean and population standard deviation per metric; empty reports yield NaN."""
        df = self.frame()
        values = {
            'steps': df['steps_or_horizon'].astype(float),
            'coverage': df['coverage'].astype(float),
            'mutual_overlap': df['mutual_overlap'].astype(float),
        }
        out = {'episodes': len(df), 'reach_rate': float(df['reached'].mean()) if len(df) else float('nan')}
        for name, series in values.items():
            out[f"{name}_mean"] = float(series.mean()) if len(series) else float('nan')
            out[f"{name}_std"] = float(series.std(ddof=0)) if len(series) else float('nan')
        return out

    def summary_row(self):
        agg = self.aggregate()
        row = {'planner': self.label, 'episodes': agg['episodes']}
        for name in METRIC_COLUMNS:
            row[name] = f"{agg[name + '_mean']:.3f} ({agg[name + '_std']:.3f})"
        row['reach_rate'] = agg['reach_rate']
        return row

    def to_records(self):
        return [e.to_record() for e in self.entries]


def comparison_table(reports):
    """One "mean (std)" row per report."""
    return pd.DataFrame([r.summary_row() for r in reports],
                        columns=['planner', 'episodes', *METRIC_COLUMNS, 'reach_rate'])


def write_comparison(reports, prefix):
    """Write ``<prefix>_summary.csv``, ``<prefix>_episodes.csv`` and ``<prefix>_summary.txt``."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    table = comparison_table(reports)
    summary_csv = prefix.with_name(prefix.name + '_summary.csv')
    episodes_csv = prefix.with_name(prefix.name + '_episodes.csv')
    summary_txt = prefix.with_name(prefix.name + '_summary.txt')
    table.to_csv(summary_csv, index=False)
    frames = [r.frame().assign(label=r.label) for r in reports]
    pd.concat(frames, ignore_index=True).to_csv(episodes_csv, index=False)
    summary_txt.write_text(table.to_string(index=False) + '\n')
    logger.info(f"Comparison written to {summary_csv}")
    return summary_csv, episodes_csv, summary_txt
