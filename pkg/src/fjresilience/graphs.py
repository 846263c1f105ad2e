"""Communication graphs, node partitions and nominal weight matrices.

Nodes are indexed from 0 inside the library.  Text files use 1-based
labels.  After :func:`mark_misbehaving` the regular nodes always occupy
the first ``n_regular`` indices and ``labels`` maps each internal index
back to the node's original index.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import networkx as nx
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

MAX_CONNECT_ATTEMPTS = 1000
GRAPH_KINDS = ("k_regular", "erdos_renyi", "geometric", "explicit")


class GraphError(ValueError):
    """Infeasible graph request or an edit that would break the graph."""


def uniform_weights(adjacency: np.ndarray) -> np.ndarray:
    """Row-normalized adjacency; isolated nodes get an all-zero row."""
    A = np.asarray(adjacency, dtype=float)
    deg = A.sum(axis=1)
    W = np.zeros_like(A)
    nz = deg > 0
    W[nz] = A[nz] / deg[nz, None]
    return W


def _components(adjacency) -> int:
    n, _ = connected_components(csr_matrix(np.asarray(adjacency, dtype=np.int8)), directed=False)
    return n


def is_connected(adjacency) -> bool:
    adjacency = np.asarray(adjacency)
    return adjacency.shape[0] <= 1 or _components(adjacency) == 1


@dataclass(frozen=True, eq=False)
class Network:
    """A communication graph with its regular/misbehaving partition.

    Attributes
    ----------
    adjacency : (N, N) bool array
        Symmetric, zero diagonal.
    w_nominal : (N, N) float array
        Row-stochastic nominal weights, supported on the edges.
    n_regular : int
        Nodes ``0..n_regular-1`` are regular, the rest misbehave.
    labels : (N,) int array
        Original index of every node (before relabeling).
    """

    adjacency: np.ndarray
    w_nominal: np.ndarray
    n_regular: int
    labels: np.ndarray
    kind: str = "explicit"
    seed: Optional[int] = None
    positions: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        A = np.asarray(self.adjacency, dtype=bool)
        W = np.asarray(self.w_nominal, dtype=float)
        n = A.shape[0]
        if A.shape != (n, n) or W.shape != (n, n):
            raise GraphError("adjacency and weights must be square and of equal size")
        if not np.array_equal(A, A.T):
            raise GraphError("adjacency must be symmetric")
        if np.any(np.diag(A)) or np.any(np.diag(W) != 0.0):
            raise GraphError("self-loops are not allowed")
        if np.any(W < 0) or np.any((W > 0) & ~A):
            raise GraphError("weights must be nonnegative and supported on edges")
        deg = A.sum(axis=1)
        rows = W.sum(axis=1)
        if np.any(np.abs(rows[deg > 0] - 1.0) > 1e-12):
            raise GraphError("nominal weights must be row stochastic")
        if not 0 <= self.n_regular <= n:
            raise GraphError("n_regular out of range")
        labels = np.asarray(self.labels, dtype=int)
        if sorted(labels.tolist()) != list(range(n)):
            raise GraphError("labels must be a permutation of 0..N-1")
        object.__setattr__(self, "adjacency", A)
        object.__setattr__(self, "w_nominal", W)
        object.__setattr__(self, "labels", labels)
        for arr in (A, W, labels):
            arr.setflags(write=False)

    @property
    def n_total(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_misbehaving(self) -> int:
        return self.n_total - self.n_regular

    @property
    def regular_ids(self) -> np.ndarray:
        return np.arange(self.n_regular)

    @property
    def misbehaving_ids(self) -> np.ndarray:
        return np.arange(self.n_regular, self.n_total)

    @property
    def w_reg(self) -> np.ndarray:
        """Regular-to-regular block of the nominal weights."""
        R = self.n_regular
        return self.w_nominal[:R, :R]

    @property
    def w_mal(self) -> np.ndarray:
        """Regular-to-misbehaving block of the nominal weights."""
        R = self.n_regular
        return self.w_nominal[:R, R:]

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def edges(self) -> list[tuple[int, int]]:
        """Edges as sorted ``(u, v)`` pairs with ``u < v``, lexicographic order."""
        u, v = np.nonzero(np.triu(self.adjacency, 1))
        return list(zip(u.tolist(), v.tolist()))

    def is_connected(self) -> bool:
        return is_connected(self.adjacency)

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        return bool(np.allclose(self.w_nominal, self.w_nominal.T, rtol=0.0, atol=tol))

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[i])


def from_edges(n: int, edges: Iterable[Sequence[int]], *, kind="explicit", seed=None, positions=None) -> Network:
    """Build an all-regular network with uniform weights from 0-based edges."""
    A = np.zeros((n, n), dtype=bool)
    for u, v in edges:
        u, v = int(u), int(v)
        if u == v or not (0 <= u < n and 0 <= v < n):
            raise GraphError(f"invalid edge ({u}, {v}) for n={n}")
        A[u, v] = A[v, u] = True
    return Network(A, uniform_weights(A), n, np.arange(n), kind=kind, seed=seed, positions=positions)


@dataclass(frozen=True)
class GraphSpec:
    """Recipe for a random (or explicit) graph.

    ``degree`` is used by ``k_regular``, ``p`` by ``erdos_renyi``,
    ``radius`` by ``geometric`` and ``edges`` (0-based) by ``explicit``.
    """

    kind: str
    n: int
    seed: int = 0
    degree: Optional[int] = None
    p: Optional[float] = None
    radius: Optional[float] = None
    edges: Optional[tuple] = None

    def validate(self):
        if self.kind not in GRAPH_KINDS:
            raise GraphError(f"unknown graph kind {self.kind!r}")
        if self.n < 1:
            raise GraphError("n must be positive")
        if self.kind == "k_regular":
            d = self.degree
            if d is None or d < 0 or d >= self.n or (d * self.n) % 2:
                raise GraphError(f"no {d}-regular graph on {self.n} nodes")
        elif self.kind == "erdos_renyi":
            if self.p is None or not 0.0 < self.p <= 1.0:
                raise GraphError("erdos_renyi needs p in (0, 1]")
        elif self.kind == "geometric":
            if self.radius is None or not 0.0 < self.radius <= np.sqrt(2.0):
                raise GraphError("geometric needs radius in (0, sqrt(2)]")
        elif self.edges is None:
            raise GraphError("explicit graph needs an edge list")


def _pairing_attempt(n, d, rng):
    # Steger-Wormald style pairing: match random stubs, keep valid pairs,
    # re-pair the leftovers; give up when no valid pair can remain.
    edges = set()
    stubs = np.repeat(np.arange(n), d)
    while stubs.size:
        leftover = defaultdict(int)
        rng.shuffle(stubs)
        for a, b in stubs.reshape(-1, 2).tolist():
            if a > b:
                a, b = b, a
            if a != b and (a, b) not in edges:
                edges.add((a, b))
            else:
                leftover[a] += 1
                leftover[b] += 1
        if not leftover:
            break
        nodes = list(leftover)
        feasible = any(
            (min(u, v), max(u, v)) not in edges
            for i, u in enumerate(nodes)
            for v in nodes[i + 1:]
        )
        if not feasible:
            return None
        stubs = np.array([u for u, c in leftover.items() for _ in range(c)])
    return edges


def _k_regular_edges(n, d, rng, max_tries=1000):
    if d == 0:
        return set()
    for _ in range(max_tries):
        edges = _pairing_attempt(n, d, rng)
        if edges is not None:
            return edges
    raise GraphError(f"pairing failed for {d}-regular graph on {n} nodes")


def _sample(spec: GraphSpec, rng):
    n = spec.n
    if spec.kind == "k_regular":
        return _k_regular_edges(n, spec.degree, rng), None
    if spec.kind == "erdos_renyi":
        iu, ju = np.triu_indices(n, 1)
        keep = rng.random(iu.size) < spec.p
        return set(zip(iu[keep].tolist(), ju[keep].tolist())), None
    if spec.kind == "geometric":
        pos = rng.random((n, 2))
        dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        iu, ju = np.triu_indices(n, 1)
        keep = dist[iu, ju] <= spec.radius
        return set(zip(iu[keep].tolist(), ju[keep].tolist())), pos
    return {tuple(e) for e in spec.edges}, None


def generate(spec: GraphSpec) -> Network:
    """Sample a connected all-regular network with uniform weights.

    Attempt ``a`` uses the RNG stream ``(spec.seed, a)``; the first
    connected sample is returned.
    """
    spec.validate()
    attempts = 1 if spec.kind == "explicit" else MAX_CONNECT_ATTEMPTS
    for attempt in range(attempts):
        rng = np.random.default_rng([spec.seed, attempt])
        edges, pos = _sample(spec, rng)
        net = from_edges(spec.n, edges, kind=spec.kind, seed=spec.seed, positions=pos)
        if net.is_connected():
            return net
    raise GraphError(f"no connected {spec.kind} graph after {attempts} attempts")


def mark_misbehaving(net: Network, ids: Iterable[int]) -> Network:
    """Declare nodes ``ids`` (current 0-based indices) misbehaving.

    Nodes already misbehaving stay so.  Nodes are reordered so that the
    regular ones come first (in their current relative order), followed
    by the misbehaving ones in increasing index order; weights and
    adjacency are permuted conjugately.
    """
    ids = {int(i) for i in ids}
    n = net.n_total
    if any(not 0 <= i < n for i in ids):
        raise GraphError("misbehaving id out of range")
    bad = ids | set(net.misbehaving_ids.tolist())
    regular = [i for i in range(n) if i not in bad]
    if not regular:
        raise GraphError("at least one regular node is required")
    order = np.array(regular + sorted(bad))
    return permute(net, order, n_regular=len(regular))


def permute(net: Network, order, n_regular=None) -> Network:
    """Reindex nodes so that new node ``k`` is old node ``order[k]``."""
    order = np.asarray(order)
    ix = np.ix_(order, order)
    pos = None if net.positions is None else net.positions[order]
    return replace(
        net,
        adjacency=net.adjacency[ix],
        w_nominal=net.w_nominal[ix],
        n_regular=net.n_regular if n_regular is None else n_regular,
        labels=net.labels[order],
        positions=pos,
    )


def shortest_path_lengths(net: Network) -> np.ndarray:
    """Hop distances between all node pairs of a connected graph."""
    if not net.is_connected():
        raise GraphError("graph is disconnected")
    D = shortest_path(csr_matrix(net.adjacency.astype(np.int8)), directed=False, unweighted=True)
    return np.rint(D).astype(int)


def with_adjacency(net: Network, adjacency) -> Network:
    """Same partition and labels, new edge set, uniform weights."""
    A = np.asarray(adjacency, dtype=bool)
    return replace(net, adjacency=A, w_nominal=uniform_weights(A))


def remove_edge(net: Network, edge: Sequence[int]) -> Network:
    """Delete edge ``(u, v)`` and re-weigh uniformly.

    Raises :class:`GraphError` if the edge is missing or its removal
    disconnects the graph.
    """
    u, v = int(edge[0]), int(edge[1])
    if not (0 <= u < net.n_total and 0 <= v < net.n_total) or not net.adjacency[u, v]:
        raise GraphError(f"edge ({u}, {v}) does not exist")
    A = net.adjacency.copy()
    A[u, v] = A[v, u] = False
    if not is_connected(A):
        raise GraphError(f"removing ({u}, {v}) disconnects the graph")
    return with_adjacency(net, A)


def perfect_matching(net: Network) -> list[tuple[int, int]]:
    """A perfect matching as sorted edges, via blossom maximum-cardinality matching."""
    G = nx.Graph()
    G.add_nodes_from(range(net.n_total))
    G.add_edges_from(net.edges())
    matching = nx.max_weight_matching(G, maxcardinality=True)
    if 2 * len(matching) != net.n_total:
        raise GraphError("graph has no perfect matching")
    return sorted((min(a, b), max(a, b)) for a, b in matching)


def perfect_matching_removal(net: Network) -> Network:
    """Drop a perfect matching, turning a Delta-regular graph (Delta-1)-regular.

    The result may be disconnected (e.g. a 4-cycle becomes two edges).
    """
    A = net.adjacency.copy()
    for u, v in perfect_matching(net):
        A[u, v] = A[v, u] = False
    return with_adjacency(net, A)


# -- edge-list files ---------------------------------------------------------

def dumps_network(net: Network) -> str:
    """Edge-list text: a ``# {json}`` header line, then ``u v`` (1-based) per line."""
    header = {
        "n": net.n_total,
        "kind": net.kind,
        "seed": net.seed,
        "misbehaving": (net.misbehaving_ids + 1).tolist(),
        "labels": (net.labels + 1).tolist(),
    }
    lines = ["# " + json.dumps(header)]
    lines += [f"{u + 1} {v + 1}" for u, v in net.edges()]
    return "\n".join(lines) + "\n"


def loads_network(text: str) -> Network:
    header = {}
    edges = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if body.startswith("{"):
                header = json.loads(body)
            continue
        u, v = line.split()[:2]
        edges.append((int(u) - 1, int(v) - 1))
    if "n" in header:
        n = int(header["n"])
    else:
        n = 1 + max(max(e) for e in edges)
    net = from_edges(n, edges, kind=header.get("kind", "explicit"), seed=header.get("seed"))
    mis = [int(i) - 1 for i in header.get("misbehaving", [])]
    if mis:
        net = mark_misbehaving(net, mis)
    if "labels" in header:
        # labels describe the stored order; mark_misbehaving kept it when mis is a suffix
        stored = np.asarray(header["labels"], dtype=int) - 1
        net = replace(net, labels=stored[net.labels])
    return net


def save_network(net: Network, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_network(net))


def load_network(path) -> Network:
    with open(path) as fh:
        return loads_network(fh.read())
