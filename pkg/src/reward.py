"""Team reward at the global-step timescale."""

from dataclasses import dataclass

from config_manager import settings_from_dict


@dataclass
class RewardConfig:
    w_cov: float = 0.02
    w_suc: float = 1.0
    w_o: float = 0.01
    w_t: float = 0.002
    target_coverage: float = 0.9

    def __post_init__(self):
        if self.w_cov < 0 or self.w_suc < 0 or self.w_o < 0 or self.w_t < 0:
            raise ValueError("reward weights must be non-negative")
        if not 0.0 < self.target_coverage <= 1.0:
            raise ValueError("target_coverage must lie in (0, 1]")

    @classmethod
    def from_dict(cls, data):
        return settings_from_dict(cls, data, 'reward')


@dataclass
class RewardTerms:
    coverage: float
    success: float
    overlap: float
    time: float

    @property
    def total(self):
        return self.coverage + self.success - self.overlap - self.time

    def to_record(self):
        return {'coverage': self.coverage, 'success': self.success, 'overlap': self.overlap,
                'time': self.time, 'total': self.total}


def reward_terms(prev_stats, new_stats, config: RewardConfig, first_step=False):
    """Weighted reward terms between two consecutive coverage snapshots.

    The success bonus is paid on the step that reaches the coverage target. When the spawn
    view already meets it, the first global step (``first_step``) pays it instead.
    """
    target = config.target_coverage
    delta_area = new_stats.explored_area - prev_stats.explored_area
    delta_overlap = new_stats.overlap_area - prev_stats.overlap_area
    reached = (first_step or prev_stats.coverage_ratio < target) and new_stats.coverage_ratio >= target
    return RewardTerms(
        coverage=config.w_cov * delta_area,
        success=config.w_suc if reached else 0.0,
        overlap=config.w_o * delta_overlap,
        time=config.w_t if new_stats.coverage_ratio < target else 0.0,
    )


def compute_reward(prev_stats, new_stats, config: RewardConfig, first_step=False):
    return reward_terms(prev_stats, new_stats, config, first_step).total
