"""
Multi-agent PPO for the hierarchical planner.

One transition per global step. All agents share the planner's parameters and
the team reward; the critic sees the fused team state through the planner's
value head.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from config_manager import settings_from_dict
from episode_runner import ExperimentConfig, ExplorationSession, evaluate as evaluate_episodes
from errors import TrainingDivergenceError
from htp_planner import HierarchicalTopologicalPlanner, HistoryBuffer, PlannerInputs
from nn_core import Adam, Tensor, clip_grad_norm, minimum

logger = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch_size: int = 8
    lr: float = 3e-4
    entropy_coef: float = 0.01
    entropy_decay: float = 1.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    rollout_length: int = 8
    n_envs: int = 2
    iterations: int = 50
    checkpoint_every: int = 10
    eval_every: int = 10
    eval_episodes: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gamma must lie in (0, 1] and gae_lambda in [0, 1]")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.epochs < 1 or self.minibatch_size < 1 or self.rollout_length < 1 or self.n_envs < 1:
            raise ValueError("epochs, minibatch_size, rollout_length and n_envs must be >= 1")

    @classmethod
    def from_dict(cls, data):
        return settings_from_dict(cls, data, 'trainer')


@dataclass
class Transition:
    inputs: PlannerInputs
    actions: np.ndarray
    log_probs: np.ndarray
    reward: float
    value: float
    done: bool


@dataclass
class Segment:
    """Consecutive transitions from one environment plus the value after the last one."""
    transitions: List[Transition] = field(default_factory=list)
    bootstrap_value: float = 0.0


@dataclass
class RolloutBuffer:
    segments: List[Segment] = field(default_factory=list)
    fallback_steps: int = 0

    def __len__(self):
        return sum(len(s.transitions) for s in self.segments)

    @property
    def transitions(self):
        return [t for s in self.segments for t in s.transitions]

    def advantages(self, gamma, gae_lambda):
        """Advantages and returns for every transition, segment by segment."""
        advantages, returns = [], []
        for segment in self.segments:
            if not segment.transitions:
                continue
            adv, ret = gae_advantages(
                [t.reward for t in segment.transitions],
                [t.value for t in segment.transitions],
                [t.done for t in segment.transitions],
                segment.bootstrap_value, gamma, gae_lambda,
            )
            advantages.append(adv)
            returns.append(ret)
        if not advantages:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(advantages), np.concatenate(returns)


def gae_advantages(rewards, values, dones, bootstrap_value, gamma, gae_lambda):
    """Generalized advantage estimates and value targets (not normalized)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    advantages = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(len(rewards))):
        next_value = bootstrap_value if t == len(rewards) - 1 else values[t + 1]
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * gae_lambda * nonterminal * running
        advantages[t] = running
    return advantages, advantages + values


def normalize_advantages(advantages):
    advantages = np.asarray(advantages, dtype=np.float64)
    if len(advantages) < 2:
        return advantages
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def clipped_objective(ratio, advantage, clip_eps):
    """Pessimistic PPO objective ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage)


def clipped_surrogate(new_log_probs: Tensor, old_log_probs, advantage, clip_eps):
    """Differentiable policy loss averaged over agents."""
    ratio = (new_log_probs - Tensor(old_log_probs)).exp()
    unclipped = ratio * advantage
    clipped = ratio.clip(1.0 - clip_eps, 1.0 + clip_eps) * advantage
    return -minimum(unclipped, clipped).mean()


# Environments

class TrainingEnv:
    """Episode stream for one worker; starts a new episode whenever the last one ends."""

    def __init__(self, config: ExperimentConfig, index, seed):
        self.config = config
        self.index = index
        self.rng = np.random.default_rng([seed, index])
        self.session: Optional[ExplorationSession] = None
        self.history = None
        self.episode_ended = False
        self.fallback_value = None
        self.episodes = 0
        self.logger = logging.getLogger(__name__)

    def reset(self, planner):
        seed = int(self.rng.integers(2 ** 31))
        grid = self.config.map_for(seed, self.episodes)
        self.session = ExplorationSession(grid, self.config, seed, planner_name=planner.name)
        self.history = HistoryBuffer(planner.config.history_length)
        self.episodes += 1
        self.logger.debug(f"Env {self.index}: episode {self.episodes} (seed {seed})")

    def step(self, planner):
        """Run one global step; return its Transition, or None when no learned decision was made.

        A step the runner handled with its fallback planner sets ``fallback_value`` to the critic
        value of the state it started from, so the caller can close the segment there.
        """
        self.episode_ended = False
        self.fallback_value = None
        if self.session is None or self.session.done:
            self.reset(planner)
        planner.history = self.history
        session = self.session
        step = session.state.step
        context = session.planning_context()
        decision = session.decide(planner, context)
        if decision is None:
            session.finish()
            self.episode_ended = True
            return None
        if decision.training is None:
            self.fallback_value = planner.estimate_value(context)
            self.logger.debug(f"Env {self.index}: fallback decision at step {step}; closing the rollout segment")
        terms = session.advance(decision)
        session.record_global(step, context, decision, terms)
        if session.done:
            session.finish()
            self.episode_ended = True
        if decision.training is None:
            return None
        info = decision.training
        return Transition(info['inputs'], np.asarray(info['actions']), np.asarray(info['log_probs']),
                          terms.total, info['value'], session.done)

    def bootstrap_value(self, planner):
        if self.session is None or self.session.done:
            return 0.0
        planner.history = self.history
        return planner.estimate_value(self.session.planning_context())


def collect_rollout(envs, planner, length) -> RolloutBuffer:
    """``length`` global steps from every environment with the planner sampling its goals."""
    buffer = RolloutBuffer()
    for env in envs:
        segment = Segment()
        for _ in range(length):
            transition = env.step(planner)
            if transition is not None:
                segment.transitions.append(transition)
                continue
            if env.fallback_value is not None:
                buffer.fallback_steps += 1
            if env.episode_ended:
                if segment.transitions:
                    segment.transitions[-1].done = True
            elif env.fallback_value is not None and segment.transitions:
                segment.bootstrap_value = env.fallback_value
                buffer.segments.append(segment)
                segment = Segment()
        last_done = not segment.transitions or segment.transitions[-1].done
        segment.bootstrap_value = 0.0 if last_done else env.bootstrap_value(planner)
        buffer.segments.append(segment)
    return buffer


# Updates

def ppo_update(planner, buffer, config: TrainerConfig, optimizer, rng, entropy_coef=None):
    """Clipped-surrogate updates over ``config.epochs`` shuffled passes; returns mean statistics."""
    if len(buffer) == 0:
        raise ValueError("ppo_update needs a non-empty buffer")
    entropy_coef = config.entropy_coef if entropy_coef is None else entropy_coef
    transitions = buffer.transitions
    advantages, returns = buffer.advantages(config.gamma, config.gae_lambda)
    advantages = normalize_advantages(advantages)
    params = planner.network.named_parameters()

    history = {'policy_loss': [], 'value_loss': [], 'entropy': [], 'approx_kl': [],
               'clip_fraction': [], 'grad_norm': []}
    for _ in range(config.epochs):
        order = rng.permutation(len(transitions))
        for start in range(0, len(order), config.minibatch_size):
            batch = order[start:start + config.minibatch_size]
            planner.network.zero_grad()
            total = None
            for j in batch:
                t = transitions[j]
                new_log_probs, entropies, value = planner.evaluate_actions(t.inputs, t.actions)
                policy_loss = clipped_surrogate(new_log_probs, t.log_probs, advantages[j], config.clip_eps)
                value_loss = (value - returns[j]).square()
                entropy = entropies.mean()
                loss = policy_loss + value_loss * config.value_coef - entropy * entropy_coef
                total = loss if total is None else total + loss

                ratio = np.exp(new_log_probs.values - t.log_probs)
                history['policy_loss'].append(policy_loss.item())
                history['value_loss'].append(value_loss.item())
                history['entropy'].append(entropy.item())
                history['approx_kl'].append(float(np.mean(t.log_probs - new_log_probs.values)))
                history['clip_fraction'].append(float(np.mean(np.abs(ratio - 1.0) > config.clip_eps)))
            total = total * (1.0 / len(batch))
            if not np.isfinite(total.item()):
                raise TrainingDivergenceError(f"Non-finite PPO loss {total.item()}")
            total.backward()
            history['grad_norm'].append(clip_grad_norm(list(params.values()), config.max_grad_norm))
            optimizer.step(params)
    return {name: float(np.mean(values)) for name, values in history.items()}


def evaluate(planner, config: ExperimentConfig, episodes, seed):
    """Greedy (argmax) evaluation episodes of ``planner``."""
    was_training, training_history, training_rng = planner.training, planner.history, planner.rng
    planner.training = False
    planner.history = HistoryBuffer(planner.config.history_length)
    try:
        return evaluate_episodes(config, planner, episodes, seed)
    finally:
        planner.training = was_training
        planner.history = training_history
        planner.rng = training_rng


class Trainer:
    def __init__(self, experiment: ExperimentConfig, config: Optional[TrainerConfig] = None,
                 planner: Optional[HierarchicalTopologicalPlanner] = None, out_dir=None):
        self.experiment = experiment
        self.config = config or TrainerConfig()
        self.planner = planner or HierarchicalTopologicalPlanner(experiment.network, training=True)
        self.planner.training = True
        self.optimizer = Adam(lr=self.config.lr)
        self.rng = np.random.default_rng(self.config.seed)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        train_experiment = replace(experiment, stop_at_target=True)
        self.envs = [TrainingEnv(train_experiment, i, self.config.seed) for i in range(self.config.n_envs)]
        self.entropy_coef = self.config.entropy_coef
        self.records = []
        self.logger = logging.getLogger(__name__)

    def iteration(self, index):
        buffer = collect_rollout(self.envs, self.planner, self.config.rollout_length)
        record = {'iteration': index, 'transitions': len(buffer), 'fallback_steps': buffer.fallback_steps,
                  'entropy_coef': self.entropy_coef}
        if len(buffer):
            rewards = [t.reward for t in buffer.transitions]
            record['mean_reward'] = float(np.mean(rewards))
            record.update(ppo_update(self.planner, buffer, self.config, self.optimizer, self.rng,
                                     self.entropy_coef))
        else:
            self.logger.warning(f"Iteration {index}: rollout produced no learned decisions")
        self.entropy_coef *= self.config.entropy_decay
        return record

    def checkpoint(self, name, index):
        if self.out_dir is None:
            return None
        return self.planner.save(self.out_dir / name, {'iteration': index, 'trainer': asdict(self.config)})

    def train(self, iterations=None):
        iterations = self.config.iterations if iterations is None else iterations
        log_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.out_dir / 'training_log.jsonl'
            log_path.write_text('')
        for i in range(1, iterations + 1):
            record = self.iteration(i)
            if self.config.eval_every and i % self.config.eval_every == 0 and self.config.eval_episodes:
                report = evaluate(self.planner, self.experiment, self.config.eval_episodes, self.config.seed)
                record.update({f"eval_{k}": v for k, v in report.aggregate().items()})
            if self.config.checkpoint_every and i % self.config.checkpoint_every == 0:
                self.checkpoint(f"checkpoint_{i:04d}.npz", i)
            self.records.append(record)
            if log_path is not None:
                with open(log_path, 'a') as f:
                    f.write(json.dumps(record, sort_keys=True) + '\n')
            self.logger.info(f"Iteration {i}: {record['transitions']} transitions, "
                             f"policy loss {record.get('policy_loss', float('nan')):.4f}, "
                             f"entropy {record.get('entropy', float('nan')):.4f}")
        self.checkpoint('final.npz', iterations)
        return self.records
