import numpy as np
import pytest

import distance_field
from errors import ConfigError, ExplorationComplete
from grid_world import OccupancyGrid
from htp_planner import (HierarchicalTopologicalPlanner, HistoryBuffer, HtpNetwork, IndividualEncoder,
                         PlannerConfig, PlannerInputs, RelationEncoder, action_log_probs, combine_hierarchical,
                         entropy, extract_graphs, renormalize)
from nn_core import Tensor, gradient_check
from topo_mapper import GhostNode, MainNode, TopoGraph

VARIANTS = ('full', 'no_history', 'single', 'concat', 'mean')


def _small_config(variant='full', seed=0):
    return PlannerConfig.from_dict({'embed_dim': 4, 'hidden_dim': 5, 'history_length': 3, 'seed': seed}, variant)


def _features(rng, n, s1, s2):
    labels = np.tile([s1, s2], (n, 1))
    return np.hstack([rng.random((n, 2)), labels]).astype(np.float64)


def _inputs(rng, n_agents=2, n_mains=3, n_ghosts=5, n_history=4):
    return PlannerInputs(
        agents=_features(rng, n_agents, 0, 0),
        mains=_features(rng, n_mains, 1, 0),
        ghosts=_features(rng, n_ghosts, 1, 0),
        agent_history=_features(rng, n_history, 0, 1),
        main_history=_features(rng, n_history, 1, 1),
        ghost_history=_features(rng, n_history, 1, 1),
        agent_main_dist=rng.random((n_agents, n_mains)),
        agent_ghost_dist=rng.random((n_agents, n_ghosts)),
        ghost_parent=rng.integers(n_mains, size=n_ghosts),
    )


@pytest.mark.parametrize('variant', VARIANTS)
def test_distributions_are_normalized(rng, variant):
    network = HtpNetwork(_small_config(variant))
    for _ in range(5):
        result = network(_inputs(rng, n_agents=int(rng.integers(1, 4)), n_ghosts=int(rng.integers(1, 8))))
        probs = result.probs.values
        assert np.all(probs >= 0)
        assert np.allclose(probs.sum(axis=1), 1.0)
        assert np.isfinite(result.value.item())


def test_ghost_probability_is_product_with_parent_score(rng):
    network = HtpNetwork(_small_config())
    for _ in range(50):
        inputs = _inputs(rng, n_agents=int(rng.integers(1, 4)), n_mains=int(rng.integers(1, 5)),
                         n_ghosts=int(rng.integers(1, 9)))
        result = network(inputs)
        product = result.ghost_scores.values * result.main_scores.values[:, inputs.ghost_parent]
        expected = product / product.sum(axis=1, keepdims=True)
        assert np.allclose(result.probs.values, expected, atol=1e-12)


def test_zero_main_score_zeroes_its_ghosts():
    ghost_scores = Tensor(np.array([[0.2, 0.3, 0.5], [0.6, 0.2, 0.2]]))
    main_scores = Tensor(np.array([[0.0, 1.0], [0.5, 0.5]]))
    combined = combine_hierarchical(ghost_scores, main_scores, np.array([0, 0, 1])).values
    assert np.array_equal(combined[0], [0.0, 0.0, 0.5])
    assert np.allclose(combined[1], [0.3, 0.1, 0.1])


def test_zeroed_main_removes_its_ghosts_from_the_network_distribution(rng):
    network = HtpNetwork(_small_config())
    selector = network.main_selector
    for _ in range(50):
        n_mains = int(rng.integers(2, 5))
        n_ghosts = int(rng.integers(n_mains, 9))
        inputs = _inputs(rng, n_agents=int(rng.integers(1, 4)), n_mains=n_mains, n_ghosts=n_ghosts)
        inputs.ghost_parent = rng.permutation(np.arange(n_ghosts) % n_mains)
        zeroed = int(rng.integers(n_mains))

        def without_one_main(agents, mains, distances):
            updated, scores = selector(agents, mains, distances)
            mask = np.ones(scores.shape)
            mask[:, zeroed] = 0.0
            return updated, scores * Tensor(mask)

        network.main_selector = without_one_main
        probs = network(inputs).probs.values
        assert np.all(probs[:, inputs.ghost_parent == zeroed] == 0.0)
        assert np.allclose(probs.sum(axis=1), 1.0)
    network.main_selector = selector


def test_underflowed_rows_fall_back_to_uniform():
    probs = renormalize(Tensor(np.array([[0.0, 0.0, 0.0], [1.0, 3.0, 0.0]]))).values
    assert np.allclose(probs[0], [1 / 3, 1 / 3, 1 / 3])
    assert np.allclose(probs[1], [0.25, 0.75, 0.0])


@pytest.mark.parametrize('variant', VARIANTS)
def test_ghost_permutation_permutes_distribution(rng, variant):
    network = HtpNetwork(_small_config(variant))
    for _ in range(50):
        n_ghosts = int(rng.integers(2, 9))
        inputs = _inputs(rng, n_agents=int(rng.integers(1, 4)), n_ghosts=n_ghosts)
        order = rng.permutation(n_ghosts)
        base = network(inputs)
        permuted = network(inputs.permute_ghosts(order))
        assert np.allclose(permuted.probs.values, base.probs.values[:, order], atol=1e-9)
        assert permuted.value.item() == pytest.approx(base.value.item(), abs=1e-9)


def test_individual_encoder_rows_and_residual_identity(rng):
    encoder = IndividualEncoder(4, 5, rng)
    x = Tensor(rng.random((3, 4)))
    _, scores = encoder(x)
    assert np.allclose(scores.values.sum(axis=1), 1.0)
    last = encoder.f_in.layers[-1]
    last.weight.values[:] = 0.0
    last.bias.values[:] = 0.0
    out, _ = encoder(x)
    assert np.array_equal(out.values, x.values)


def test_relation_encoder_with_single_key_node_scores_one(rng):
    encoder = RelationEncoder(4, 4, 4, 5, rng)
    y = Tensor(rng.random((3, 4)))
    z = Tensor(rng.random((1, 4)))
    _, scores = encoder(y, z, rng.random((3, 1)))
    assert np.allclose(scores.values, [[1.0], [1.0], [1.0]])


def test_variants_produce_different_distributions(rng):
    inputs = _inputs(rng, n_ghosts=6)
    outputs = {v: HtpNetwork(_small_config(v))(inputs).probs.values for v in VARIANTS}
    for i, a in enumerate(VARIANTS):
        for b in VARIANTS[i + 1:]:
            assert not np.allclose(outputs[a], outputs[b]), (a, b)


def test_no_history_variant_ignores_history(rng):
    network = HtpNetwork(_small_config('no_history'))
    inputs = _inputs(rng)
    other = _inputs(np.random.default_rng(5))
    swapped = PlannerInputs(inputs.agents, inputs.mains, inputs.ghosts, other.agent_history,
                            other.main_history, other.ghost_history[:1], inputs.agent_main_dist,
                            inputs.agent_ghost_dist, inputs.ghost_parent)
    assert np.array_equal(network(inputs).probs.values, network(swapped).probs.values)

    full = HtpNetwork(_small_config('full'))
    assert not np.allclose(full(inputs).probs.values, full(swapped).probs.values)


def test_empty_history_is_accepted(rng):
    network = HtpNetwork(_small_config())
    inputs = _inputs(rng, n_history=0)
    assert np.allclose(network(inputs).probs.values.sum(axis=1), 1.0)


def test_config_rejects_two_variants_and_unknown_variant():
    with pytest.raises(ConfigError):
        PlannerConfig(single=True, mean=True)
    with pytest.raises(ConfigError):
        PlannerConfig.from_dict({}, 'deep')
    assert PlannerConfig.from_dict({}, 'concat').variant == 'concat'
    assert PlannerConfig().variant == 'full'


def _training_loss(network, inputs, actions):
    result = network(inputs)
    return action_log_probs(result.probs, actions).sum() + entropy(result.probs).sum() + result.value


@pytest.mark.parametrize('variant', VARIANTS)
def test_full_forward_gradient_check(rng, variant):
    network = HtpNetwork(_small_config(variant))
    inputs = _inputs(rng, n_agents=2, n_mains=2, n_ghosts=3, n_history=2)
    actions = np.array([2, 0])
    assert gradient_check(lambda: _training_loss(network, inputs, actions), network.parameters()) < 1e-5


@pytest.mark.slow
def test_gradient_check_on_many_random_instances(rng):
    for i in range(20):
        network = HtpNetwork(_small_config(VARIANTS[i % len(VARIANTS)], seed=i))
        n_agents, n_ghosts = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        inputs = _inputs(rng, n_agents=n_agents, n_mains=int(rng.integers(1, 4)), n_ghosts=n_ghosts,
                         n_history=int(rng.integers(0, 3)))
        actions = rng.integers(n_ghosts, size=n_agents)
        assert gradient_check(lambda: _training_loss(network, inputs, actions), network.parameters()) < 1e-5


@pytest.mark.parametrize('variant', VARIANTS)
def test_every_parameter_receives_gradient(rng, variant):
    network = HtpNetwork(PlannerConfig.from_dict({'embed_dim': 4, 'hidden_dim': 8, 'history_length': 3}, variant))
    inputs = _inputs(rng, n_agents=3, n_mains=3, n_ghosts=5, n_history=3)
    network.zero_grad()
    _training_loss(network, inputs, np.array([0, 2, 4])).backward()
    dead = [name for name, p in network.named_parameters().items()
            if p.grad is None or not np.linalg.norm(p.grad) > 0.0]
    assert dead == []


def test_history_buffer_keeps_latest_entries():
    history = HistoryBuffer(capacity=3)
    for t in range(5):
        history.record_positions([(t, 0), (t, 1)])
        history.record_selection([(t, 2)], [(t, 3)])
    assert history.agent_cells() == [(2, 0), (2, 1), (3, 0), (3, 1), (4, 0), (4, 1)]
    assert history.main_cells() == [(2, 2), (3, 2), (4, 2)]
    assert history.ghost_cells() == [(2, 3), (3, 3), (4, 3)]
    history.clear()
    assert history.agent_cells() == []


def test_checkpoint_restores_identical_outputs(tmp_path, rng):
    planner = HierarchicalTopologicalPlanner(_small_config('mean', seed=3))
    path = planner.save(tmp_path / 'htp.npz', {'iteration': 7})
    restored = HierarchicalTopologicalPlanner.from_checkpoint(path)
    assert restored.config.variant == 'mean'
    inputs = _inputs(rng)
    assert np.array_equal(planner.network(inputs).probs.values, restored.network(inputs).probs.values)


def _merged_graph():
    graph = TopoGraph(cell_size=0.25, owner=0)
    graph.mains[(0, 0)] = MainNode((0, 0), (4, 4), np.ones(4), 0)
    graph.mains[(0, 1)] = MainNode((0, 1), (10, 4), np.ones(4), 0)
    graph.add_edge((0, 0), (0, 1))
    graph.ghosts[(0, 2)] = GhostNode((0, 2), (0, 0), (4, 10))
    graph.ghosts[(0, 3)] = GhostNode((0, 3), (0, 1), (12, 12))
    graph.ghosts[(0, 4)] = GhostNode((0, 4), (0, 1), (13, 2), active=False)
    return graph


def test_extract_graphs_uses_active_ghosts_and_scaled_distances(open_grid):
    merged = _merged_graph()
    agent_cells = [(4, 4), (10, 4)]
    fields = [distance_field.compute(open_grid, [c]) for c in agent_cells]
    graphs = extract_graphs(merged, agent_cells, fields, HistoryBuffer(3), 16, 16, 0.25)
    assert graphs.ghosts.node_refs == [(0, 2), (0, 3)]
    assert list(graphs.ghost_parent) == [0, 1]
    inputs = graphs.inputs()
    assert inputs.agent_main_dist[0, 0] == 0.0
    assert inputs.agent_ghost_dist[0, 0] == pytest.approx(6 * 0.25 / graphs.diagonal)
    assert np.all(inputs.agents[:, :2] <= 1.0)


def test_select_goals_picks_active_ghosts_and_records_history(open_grid):
    planner = HierarchicalTopologicalPlanner(_small_config())
    merged = _merged_graph()
    agent_cells = [(4, 4), (10, 4)]
    fields = [distance_field.compute(open_grid, [c]) for c in agent_cells]
    output, _ = planner.select_goals(merged, agent_cells, fields, 16, 16, 0.25)
    assert set(output.ghost_ids) <= {(0, 2), (0, 3)}
    assert output.distributions.shape == (2, 2)
    assert output.ghost_matching.cols == output.candidates
    assert output.ghost_matching.rows == [0, 1]
    assert np.allclose(output.ghost_matching.values.sum(axis=1), 1.0)
    assert output.main_matching.cols == [(0, 0), (0, 1)]
    assert planner.history.agent_cells() == agent_cells
    again, _ = planner.select_goals(merged, agent_cells, fields, 16, 16, 0.25)
    assert len(planner.history.main_cells()) == 4
    planner.reset()
    assert planner.history.agent_cells() == []


def test_no_active_ghost_means_exploration_is_complete(open_grid, rng):
    merged = _merged_graph()
    for ghost in merged.ghosts.values():
        ghost.active = False
    fields = [distance_field.compute(open_grid, [(4, 4)])]
    with pytest.raises(ExplorationComplete):
        extract_graphs(merged, [(4, 4)], fields, HistoryBuffer(3), 16, 16, 0.25)
    with pytest.raises(ExplorationComplete):
        HtpNetwork(_small_config())(_inputs(rng, n_ghosts=0))


def test_unreachable_nodes_use_sentinel_distance():
    grid = OccupancyGrid.open(16, 16)
    grid.obstacle[8, :] = True
    merged = _merged_graph()
    fields = [distance_field.compute(grid, [(4, 4)])]
    graphs = extract_graphs(merged, [(4, 4)], fields, HistoryBuffer(3), 16, 16, 0.25)
    assert graphs.agent_ghost_dist[0, 1] == pytest.approx(2.0 * graphs.diagonal)
