"""
Hierarchical topological planner.

At every global step the merged topological map is turned into three feature
graphs (agents, main nodes, ghost nodes) plus their histories. After memory
fusion, a main-node selector scores agent/main matchings and a ghost-node
selector scores agent/ghost matchings; each ghost's score is multiplied by its
parent main's score and renormalised into a per-agent categorical distribution
over active ghosts.
"""

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

import nn_core
from config_manager import settings_from_dict
from errors import ConfigError, ExplorationComplete
from nn_core import (AttentionBlock, MlpBlock, Module, Tensor, concat, normalize_rows, parameter,
                     softmax_rows)
from planning import PlannerDecision
from topo_mapper import NodeId

logger = logging.getLogger(__name__)

FEATURE_DIM = 4

# (s1, s2) semantic labels
AGENT_LABEL = (0, 0)
AGENT_HISTORY_LABEL = (0, 1)
MAP_LABEL = (1, 0)
MAP_HISTORY_LABEL = (1, 1)

GRAPH_KINDS = ('agent', 'main', 'ghost')
VARIANT_FLAGS = ('no_history', 'single', 'concat', 'mean')


@dataclass
class PlannerConfig:
    embed_dim: int = 32
    hidden_dim: int = 64
    n_heads: int = 1
    history_length: int = 20
    no_history: bool = False
    single: bool = False
    concat: bool = False
    mean: bool = False
    seed: int = 0

    def __post_init__(self):
        enabled = [flag for flag in VARIANT_FLAGS if getattr(self, flag)]
        if len(enabled) > 1:
            raise ConfigError(f"At most one planner variant may be enabled, got {enabled}")
        if self.history_length < 1:
            raise ConfigError("history_length must be >= 1")

    @property
    def variant(self):
        for flag in VARIANT_FLAGS:
            if getattr(self, flag):
                return flag
        return 'full'

    @classmethod
    def from_dict(cls, data, variant='full'):
        data = dict(data or {})
        if variant and variant != 'full':
            if variant not in VARIANT_FLAGS:
                raise ConfigError(f"Unknown planner variant '{variant}', expected one of {VARIANT_FLAGS}")
            data[variant] = True
        return settings_from_dict(cls, data, 'network')

    def to_dict(self):
        return asdict(self)


# Feature graphs

@dataclass
class NodeFeature:
    x: float
    y: float
    s1: int
    s2: int


@dataclass
class FeatureGraph:
    kind: str
    nodes: List[NodeFeature] = field(default_factory=list)
    node_refs: list = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)

    def matrix(self, width, height):
        """Node features with positions scaled to [0, 1] by the map size."""
        if not self.nodes:
            return np.zeros((0, FEATURE_DIM))
        return np.array([[n.x / width, n.y / height, n.s1, n.s2] for n in self.nodes], dtype=np.float64)


def _feature_graph(kind, cells, label, refs=None):
    nodes = [NodeFeature(float(c[0]), float(c[1]), *label) for c in cells]
    return FeatureGraph(kind, nodes, list(refs) if refs is not None else list(cells))


@dataclass
class ScoreMatrix:
    """Matching scores of query nodes (rows) against key nodes (cols)."""
    rows: list
    cols: list
    values: np.ndarray


def _score_matrix(scores, col_refs):
    if scores is None:
        return None
    values = scores.values.copy()
    return ScoreMatrix(list(range(values.shape[0])), list(col_refs), values)


class HistoryBuffer:
    """Per-global-step FIFO of agent positions, selected mains and selected ghosts."""

    def __init__(self, capacity=20):
        self.capacity = capacity
        self.agents = deque(maxlen=capacity)
        self.mains = deque(maxlen=capacity)
        self.ghosts = deque(maxlen=capacity)

    def clear(self):
        self.agents.clear()
        self.mains.clear()
        self.ghosts.clear()

    def record_positions(self, cells):
        self.agents.append([tuple(c) for c in cells])

    def record_selection(self, main_cells, ghost_cells):
        self.mains.append([tuple(c) for c in main_cells])
        self.ghosts.append([tuple(c) for c in ghost_cells])

    @staticmethod
    def _flatten(entries):
        return [c for entry in entries for c in entry]

    def agent_cells(self):
        return self._flatten(self.agents)

    def main_cells(self):
        return self._flatten(self.mains)

    def ghost_cells(self):
        return self._flatten(self.ghosts)


@dataclass
class ExtractedGraphs:
    agents: FeatureGraph
    mains: FeatureGraph
    ghosts: FeatureGraph
    agent_history: FeatureGraph
    main_history: FeatureGraph
    ghost_history: FeatureGraph
    agent_main_dist: np.ndarray
    agent_ghost_dist: np.ndarray
    ghost_parent: np.ndarray
    width: int
    height: int
    diagonal: float

    def inputs(self):
        w, h = self.width, self.height
        return PlannerInputs(
            agents=self.agents.matrix(w, h),
            mains=self.mains.matrix(w, h),
            ghosts=self.ghosts.matrix(w, h),
            agent_history=self.agent_history.matrix(w, h),
            main_history=self.main_history.matrix(w, h),
            ghost_history=self.ghost_history.matrix(w, h),
            agent_main_dist=self.agent_main_dist / self.diagonal,
            agent_ghost_dist=self.agent_ghost_dist / self.diagonal,
            ghost_parent=self.ghost_parent.copy(),
        )


@dataclass
class PlannerInputs:
    """Numeric snapshot of one global step; distances are in map diagonals."""
    agents: np.ndarray
    mains: np.ndarray
    ghosts: np.ndarray
    agent_history: np.ndarray
    main_history: np.ndarray
    ghost_history: np.ndarray
    agent_main_dist: np.ndarray
    agent_ghost_dist: np.ndarray
    ghost_parent: np.ndarray

    def permute_ghosts(self, order):
        order = np.asarray(order)
        return PlannerInputs(
            self.agents, self.mains, self.ghosts[order], self.agent_history, self.main_history,
            self.ghost_history, self.agent_main_dist, self.agent_ghost_dist[:, order],
            self.ghost_parent[order],
        )


def extract_graphs(merged, agent_cells, agent_fields, history, width, height, cell_size):
    """Build current and historical feature graphs plus agent-node geodesic distances."""
    ghosts = merged.active_ghosts()
    if not ghosts:
        raise ExplorationComplete("Merged map holds no active ghost node")
    mains = merged.sorted_mains()
    main_index = {m.id: i for i, m in enumerate(mains)}

    diagonal = math.hypot(width, height) * cell_size
    sentinel = 2.0 * diagonal
    d_am = np.array([[f.at(m.cell) for m in mains] for f in agent_fields], dtype=np.float64)
    d_ag = np.array([[f.at(g.cell) for g in ghosts] for f in agent_fields], dtype=np.float64)
    d_am[~np.isfinite(d_am)] = sentinel
    d_ag[~np.isfinite(d_ag)] = sentinel

    return ExtractedGraphs(
        agents=_feature_graph('agent', agent_cells, AGENT_LABEL, refs=range(len(agent_cells))),
        mains=_feature_graph('main', [m.cell for m in mains], MAP_LABEL, refs=[m.id for m in mains]),
        ghosts=_feature_graph('ghost', [g.cell for g in ghosts], MAP_LABEL, refs=[g.id for g in ghosts]),
        agent_history=_feature_graph('agent', history.agent_cells(), AGENT_HISTORY_LABEL),
        main_history=_feature_graph('main', history.main_cells(), MAP_HISTORY_LABEL),
        ghost_history=_feature_graph('ghost', history.ghost_cells(), MAP_HISTORY_LABEL),
        agent_main_dist=d_am,
        agent_ghost_dist=d_ag,
        ghost_parent=np.array([main_index[g.parent] for g in ghosts], dtype=np.int64),
        width=width,
        height=height,
        diagonal=diagonal,
    )


# Network

class IndividualEncoder(Module):
    """Attention among nodes of one graph followed by a residual MLP update."""

    def __init__(self, dim, hidden_dim, rng, mean_update=False):
        scale = 1.0 / math.sqrt(dim)
        self.mean_update = mean_update
        if not mean_update:
            self.w_q = parameter(rng.uniform(-scale, scale, (dim, dim)))
            self.w_k = parameter(rng.uniform(-scale, scale, (dim, dim)))
        self.w_v = parameter(rng.uniform(-scale, scale, (dim, dim)))
        self.f_in = MlpBlock([2 * dim, hidden_dim, dim], rng)
        self.dim = dim

    def __call__(self, x):
        n = x.shape[0]
        if self.mean_update:
            scores = Tensor(np.full((n, n), 1.0 / n))
        else:
            q = x @ self.w_q
            k = x @ self.w_k
            scores = softmax_rows((q @ k.T) * (1.0 / math.sqrt(self.dim)))
        aggregated = scores @ (x @ self.w_v)
        return x + self.f_in(concat([x, aggregated], axis=1)), scores


class RelationEncoder(Module):
    """Distance-aware matching from Y nodes to Z nodes followed by a residual MLP update."""

    def __init__(self, y_dim, z_dim, key_dim, hidden_dim, rng, mean_update=False):
        self.w_q = parameter(rng.uniform(-1, 1, (y_dim, key_dim)) / math.sqrt(y_dim))
        self.w_k = parameter(rng.uniform(-1, 1, (z_dim, key_dim)) / math.sqrt(z_dim))
        self.w_v = parameter(rng.uniform(-1, 1, (z_dim, y_dim)) / math.sqrt(z_dim))
        self.f_dis = MlpBlock([2 * key_dim + 1, hidden_dim, 1], rng)
        self.f_re = MlpBlock([2 * y_dim, hidden_dim, y_dim], rng)
        self.mean_update = mean_update

    def __call__(self, y, z, distances):
        ny, nz = y.shape[0], z.shape[0]
        q = y @ self.w_q
        k = z @ self.w_k
        q_pairs = q.take(np.repeat(np.arange(ny), nz), axis=0)
        k_pairs = k.take(np.tile(np.arange(nz), ny), axis=0)
        d_pairs = Tensor(np.asarray(distances, dtype=np.float64).reshape(ny * nz, 1))
        logits = self.f_dis(concat([q_pairs, k_pairs, d_pairs], axis=1)).reshape(ny, nz)
        scores = softmax_rows(logits)
        values = z @ self.w_v
        if self.mean_update:
            aggregated = Tensor(np.full((ny, nz), 1.0 / nz)) @ values
        else:
            aggregated = scores @ values
        return y + self.f_re(concat([y, aggregated], axis=1)), scores


class NodeSelector(Module):
    def __init__(self, agent_dim, node_dim, config, rng):
        mean = config.mean
        self.agent_encoder = IndividualEncoder(agent_dim, config.hidden_dim, rng, mean)
        self.node_encoder = IndividualEncoder(node_dim, config.hidden_dim, rng, mean)
        self.relation = RelationEncoder(agent_dim, node_dim, config.embed_dim, config.hidden_dim, rng, mean)

    def __call__(self, agents, nodes, distances):
        agents, _ = self.agent_encoder(agents)
        nodes, _ = self.node_encoder(nodes)
        agents, scores = self.relation(agents, nodes, distances)
        return agents, scores


class MemoryFusion(Module):
    def __init__(self, dim, config, rng):
        self.self_attention = AttentionBlock(dim, dim, dim, rng, config.n_heads)
        self.cross_attention = AttentionBlock(dim, dim, dim, rng, config.n_heads)

    def __call__(self, current, history):
        fused = self.self_attention(current, current)
        if history is None or history.shape[0] == 0:
            return fused
        return self.cross_attention(fused, history)


@dataclass
class ForwardResult:
    probs: Tensor
    value: Tensor
    main_scores: Optional[Tensor]
    ghost_scores: Tensor


def combine_hierarchical(ghost_scores, main_scores, ghost_parent):
    """Multiply each ghost's score by its parent main's score for the same agent."""
    return ghost_scores * main_scores.take(ghost_parent, axis=1)


def renormalize(product):
    """Row-normalize ``product``; a row that underflowed to zero becomes uniform."""
    empty = product.values.sum(axis=1, keepdims=True) <= 0.0
    if empty.any():
        product = product + Tensor(np.broadcast_to(empty, product.shape).astype(np.float64))
    return normalize_rows(product)


class HtpNetwork(Module):
    def __init__(self, config: PlannerConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        e, h = config.embed_dim, config.hidden_dim
        self.encoder = MlpBlock([FEATURE_DIM, h, e], rng)
        self.fusion = {} if config.no_history else {kind: MemoryFusion(e, config, rng) for kind in GRAPH_KINDS}
        self.main_selector = None if config.single or config.concat else NodeSelector(e, e, config, rng)
        ghost_dim = 2 * e if config.concat else e
        self.ghost_selector = NodeSelector(e, ghost_dim, config, rng)
        self.value_head = MlpBlock([e, h, 1], rng)

    def encode(self, features):
        return self.encoder(Tensor(features))

    def memory_fusion(self, kind, current, history):
        return self.fusion[kind](current, history)

    def __call__(self, inputs: PlannerInputs):
        cfg = self.config
        if inputs.ghosts.shape[0] == 0:
            raise ExplorationComplete("No ghost nodes to score")
        agents = self.encode(inputs.agents)
        mains = self.encode(inputs.mains)
        ghosts = self.encode(inputs.ghosts)
        if not cfg.no_history:
            agents = self.memory_fusion('agent', agents, self._encoded_history(inputs.agent_history))
            mains = self.memory_fusion('main', mains, self._encoded_history(inputs.main_history))
            ghosts = self.memory_fusion('ghost', ghosts, self._encoded_history(inputs.ghost_history))

        # agent features are updated by each selector in turn
        main_scores = None
        if cfg.single:
            agents, ghost_scores = self.ghost_selector(agents, ghosts, inputs.agent_ghost_dist)
            probs = ghost_scores
        elif cfg.concat:
            with_parent = concat([ghosts, mains.take(inputs.ghost_parent, axis=0)], axis=1)
            agents, ghost_scores = self.ghost_selector(agents, with_parent, inputs.agent_ghost_dist)
            probs = ghost_scores
        else:
            agents, main_scores = self.main_selector(agents, mains, inputs.agent_main_dist)
            agents, ghost_scores = self.ghost_selector(agents, ghosts, inputs.agent_ghost_dist)
            probs = renormalize(combine_hierarchical(ghost_scores, main_scores, inputs.ghost_parent))

        pooled = concat([agents, mains, ghosts], axis=0).mean(axis=0, keepdims=True)
        value = self.value_head(pooled).reshape(())
        return ForwardResult(probs, value, main_scores, ghost_scores)

    def _encoded_history(self, features):
        if features.shape[0] == 0:
            return None
        return self.encode(features)


def action_log_probs(probs, actions):
    """Log-probability of each agent's chosen ghost index."""
    n_agents, n_ghosts = probs.shape
    flat = np.arange(n_agents) * n_ghosts + np.asarray(actions, dtype=np.int64)
    return (probs.reshape(n_agents * n_ghosts).take(flat) + 1e-12).log()


def entropy(probs):
    return -(probs * (probs + 1e-12).log()).sum(axis=1)


# Planner

@dataclass
class PlannerOutput:
    ghost_ids: List[NodeId]
    actions: np.ndarray
    distributions: np.ndarray
    log_probs: np.ndarray
    value: float
    candidates: List[NodeId]
    ghost_matching: Optional[ScoreMatrix] = None
    main_matching: Optional[ScoreMatrix] = None


class HierarchicalTopologicalPlanner:
    name = 'htp'

    def __init__(self, config: Optional[PlannerConfig] = None, network: Optional[HtpNetwork] = None,
                 training=False):
        self.config = config or PlannerConfig()
        self.network = network or HtpNetwork(self.config)
        self.training = training
        self.history = HistoryBuffer(self.config.history_length)
        self.rng = np.random.default_rng(self.config.seed)
        self.logger = logging.getLogger(__name__)

    @classmethod
    def from_checkpoint(cls, path, training=False):
        meta = nn_core.read_checkpoint_metadata(path)
        config = PlannerConfig(**meta.get('planner', {}))
        planner = cls(config, training=training)
        nn_core.load_checkpoint(planner.network, path)
        planner.logger.info(f"Loaded planner checkpoint {path} (variant {config.variant})")
        return planner

    def save(self, path, extra=None):
        meta = {'planner': self.config.to_dict()}
        meta.update(extra or {})
        return nn_core.save_checkpoint(self.network, path, meta)

    def reset(self, seed=None):
        self.history.clear()
        if seed is not None:
            self.rng = np.random.default_rng(seed)

    def select_goals(self, merged, agent_cells, agent_fields, width, height, cell_size):
        self.history.record_positions(agent_cells)
        graphs = extract_graphs(merged, agent_cells, agent_fields, self.history, width, height, cell_size)
        inputs = graphs.inputs()
        result = self.network(inputs)
        probs = result.probs.values
        if self.training:
            actions = np.array([self.rng.choice(probs.shape[1], p=row / row.sum()) for row in probs])
        else:
            actions = probs.argmax(axis=1)
        log_probs = np.log(probs[np.arange(len(actions)), actions] + 1e-12)

        ghost_ids = [graphs.ghosts.node_refs[a] for a in actions]
        chosen_ghosts = [merged.ghosts[g] for g in ghost_ids]
        self.history.record_selection([merged.mains[g.parent].cell for g in chosen_ghosts],
                                      [g.cell for g in chosen_ghosts])
        output = PlannerOutput(
            ghost_ids=ghost_ids,
            actions=actions,
            distributions=probs.copy(),
            log_probs=log_probs,
            value=result.value.item(),
            candidates=list(graphs.ghosts.node_refs),
            ghost_matching=_score_matrix(result.ghost_scores, graphs.ghosts.node_refs),
            main_matching=_score_matrix(result.main_scores, graphs.mains.node_refs),
        )
        return output, inputs

    def select(self, context):
        output, inputs = self.select_goals(
            context.merged, context.agent_cells, context.agent_fields,
            context.shape[0], context.shape[1], context.cell_size,
        )
        goals = [context.merged.ghosts[g].cell for g in output.ghost_ids]
        record = {
            'distribution': [[float(p) for p in row] for row in output.distributions],
            'candidates': [list(c) for c in output.candidates],
            'value': output.value,
        }
        training = {
            'inputs': inputs,
            'actions': output.actions,
            'log_probs': output.log_probs,
            'value': output.value,
        }
        return PlannerDecision(goals, output.ghost_ids, record, training)

    def estimate_value(self, context):
        """Critic value of ``context`` without sampling or touching the history."""
        try:
            graphs = extract_graphs(context.merged, context.agent_cells, context.agent_fields, self.history,
                                    context.shape[0], context.shape[1], context.cell_size)
        except ExplorationComplete:
            return 0.0
        return self.network(graphs.inputs()).value.item()

    def evaluate_actions(self, inputs, actions):
        """Differentiable log-probabilities, entropies and value for stored inputs."""
        result = self.network(inputs)
        return action_log_probs(result.probs, actions), entropy(result.probs), result.value
