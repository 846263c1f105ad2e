from collections import deque

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fjresilience.graphs import (GraphError, GraphSpec, Network, dumps_network, from_edges, generate,
                                 is_connected, loads_network, mark_misbehaving, perfect_matching,
                                 perfect_matching_removal, permute, remove_edge, shortest_path_lengths,
                                 uniform_weights)


def bfs_distances(adj):
    n = adj.shape[0]
    D = np.full((n, n), -1)
    for s in range(n):
        D[s, s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for v in np.flatnonzero(adj[u]):
                if D[s, v] < 0:
                    D[s, v] = D[s, u] + 1
                    q.append(v)
    return D


def floyd_warshall(adj):
    n = adj.shape[0]
    D = np.where(adj, 1.0, np.inf)
    np.fill_diagonal(D, 0.0)
    for k in range(n):
        D = np.minimum(D, D[:, [k]] + D[[k], :])
    return D


def cycle(n):
    return from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def test_uniform_weights_row_stochastic():
    net = from_edges(4, [(0, 1), (0, 2), (0, 3)])
    assert np.allclose(net.w_nominal.sum(axis=1), 1.0)
    assert net.w_nominal[0, 1] == pytest.approx(1 / 3)
    assert net.w_nominal[1, 0] == 1.0


def test_uniform_weights_isolated_row_zero():
    W = uniform_weights(np.array([[0, 0], [0, 0]], dtype=bool))
    assert np.all(W == 0)


@pytest.mark.parametrize("kind,extra", [("k_regular", {"degree": 3}), ("erdos_renyi", {"p": 0.2}),
                                        ("geometric", {"radius": 0.35})])
def test_generate_connected_and_reproducible(kind, extra):
    spec = GraphSpec(kind, 30, seed=5, **extra)
    a, b = generate(spec), generate(spec)
    assert a.is_connected()
    assert np.array_equal(a.adjacency, b.adjacency)
    assert np.allclose(a.w_nominal.sum(axis=1), 1.0)


def test_generate_regular_degrees():
    net = generate(GraphSpec("k_regular", 50, seed=1, degree=4))
    assert set(net.degrees.tolist()) == {4}
    assert net.is_symmetric()


def test_generate_rejects_odd_regular():
    with pytest.raises(GraphError):
        generate(GraphSpec("k_regular", 5, degree=3))


def test_generate_rejects_unknown_kind():
    with pytest.raises(GraphError):
        generate(GraphSpec("lattice", 5))


def test_network_validation():
    A = np.array([[0, 1], [1, 0]], dtype=bool)
    with pytest.raises(GraphError):
        Network(A, np.array([[0, 0.5], [1, 0]]), 2, np.arange(2))
    with pytest.raises(GraphError):
        Network(np.array([[0, 1], [0, 0]], dtype=bool), np.array([[0, 1.0], [0, 0]]), 2, np.arange(2))
    with pytest.raises(GraphError):
        Network(A, np.array([[0, 1.0], [1, 0]]), 2, np.array([0, 0]))


def test_network_arrays_read_only():
    net = cycle(4)
    with pytest.raises(ValueError):
        net.w_nominal[0, 1] = 0.3


def test_mark_misbehaving_block_layout():
    net = mark_misbehaving(cycle(6), [1, 4])
    assert net.n_regular == 4
    assert net.labels.tolist() == [0, 2, 3, 5, 1, 4]
    # row of original node 0 is now row 0; its neighbors 1 and 5 are at 4 and 3
    assert np.flatnonzero(net.adjacency[0]).tolist() == [3, 4]
    assert net.w_mal.shape == (4, 2)


def test_mark_misbehaving_union():
    net = mark_misbehaving(mark_misbehaving(cycle(6), [1]), [0])
    assert sorted(net.labels[net.misbehaving_ids].tolist()) == [0, 1]


def test_mark_misbehaving_needs_a_regular_node():
    with pytest.raises(GraphError):
        mark_misbehaving(cycle(3), [0, 1, 2])


def test_permute_roundtrip():
    net = generate(GraphSpec("erdos_renyi", 10, seed=3, p=0.4))
    order = np.random.default_rng(0).permutation(10)
    back = permute(permute(net, order), np.argsort(order))
    assert np.array_equal(back.adjacency, net.adjacency)
    assert np.array_equal(back.labels, net.labels)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 25), p=st.floats(0.15, 0.9), seed=st.integers(0, 1000))
def test_shortest_paths_match_bfs_and_floyd_warshall(n, p, seed):
    net = generate(GraphSpec("erdos_renyi", n, seed=seed, p=p))
    D = shortest_path_lengths(net)
    assert np.array_equal(D, bfs_distances(net.adjacency))
    assert np.array_equal(D, floyd_warshall(net.adjacency).astype(int))


def test_shortest_paths_reject_disconnected():
    with pytest.raises(GraphError):
        shortest_path_lengths(from_edges(4, [(0, 1), (2, 3)]))


def test_remove_edge_reweighs():
    net = remove_edge(Network(*_complete(4)), (0, 1))
    assert not net.adjacency[0, 1]
    assert net.w_nominal[0, 2] == pytest.approx(0.5)


def _complete(n):
    A = ~np.eye(n, dtype=bool)
    return A, uniform_weights(A), n, np.arange(n)


def test_remove_edge_errors():
    with pytest.raises(GraphError):
        remove_edge(cycle(4), (0, 2))
    with pytest.raises(GraphError):
        remove_edge(from_edges(3, [(0, 1), (1, 2)]), (0, 1))


def test_perfect_matching_valid():
    net = generate(GraphSpec("k_regular", 20, seed=2, degree=4))
    M = perfect_matching(net)
    covered = [v for e in M for v in e]
    assert sorted(covered) == list(range(20))
    assert all(net.adjacency[u, v] for u, v in M)
    assert nx.is_perfect_matching(nx.from_numpy_array(net.adjacency.astype(int)), set(M))


def test_perfect_matching_removal_drops_degree():
    net = perfect_matching_removal(generate(GraphSpec("k_regular", 20, seed=2, degree=4)))
    assert set(net.degrees.tolist()) == {3}
    c4 = perfect_matching_removal(cycle(4))
    assert set(c4.degrees.tolist()) == {1}
    assert not is_connected(c4.adjacency)


def test_perfect_matching_missing():
    with pytest.raises(GraphError):
        perfect_matching(cycle(5))


def test_edge_list_roundtrip():
    net = mark_misbehaving(generate(GraphSpec("k_regular", 12, seed=4, degree=3)), [2, 7])
    back = loads_network(dumps_network(net))
    assert np.array_equal(back.adjacency, net.adjacency)
    assert np.array_equal(back.labels, net.labels)
    assert back.n_regular == net.n_regular


def test_edge_list_is_one_based():
    text = dumps_network(from_edges(2, [(0, 1)]))
    assert text.splitlines()[1] == "1 2"
    assert loads_network("1 2\n2 3\n").n_total == 3
