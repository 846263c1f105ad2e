"""Network-level studies: worst-case attackers, connectivity sweeps, edge pruning."""

from __future__ import annotations

import csv
import io
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .analysis import ErrorModel
from .dynamics import MisbehaviorModel, PriorModel
from .graphs import (GraphError, GraphSpec, Network, generate, is_connected, mark_misbehaving,
                     perfect_matching_removal, with_adjacency)
from .gramian import controllability_gramian, reachability_index
from .numerics import solve_discrete_lyapunov

OBJECTIVES = ("consensus_error", "gramian_trace")
TIE_RTOL = 1e-12
_ATTACKER_STREAM = 7919
_FAST_LAMBDA_MIN = 1e-3


@dataclass(frozen=True)
class DesignObjective:
    """What a network study optimizes.

    ``consensus_error`` uses a prior (``identity`` or ``exp_decay`` with
    ``prior_base``/``prior_rate``) and isotropic misbehavior ``V = d I``,
    ``Q = q I``.  ``gramian_trace`` uses ``k_policy``: ``"reachability"``
    (reachability index, falling back to R), ``"R"`` or a fixed integer.
    """

    kind: str = "consensus_error"
    lam: float = 0.1
    prior: str = "identity"
    prior_base: float = 10.0
    prior_rate: float = 0.2
    d: float = 10.0
    q: float = 0.0
    k_policy: Union[str, int] = "reachability"

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.kind!r}; expected one of {OBJECTIVES}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.prior not in ("identity", "exp_decay"):
            raise ValueError(f"unknown prior {self.prior!r}")
        if self.d < 0 or self.q < 0:
            raise ValueError("d and q must be nonnegative")
        if not (self.k_policy in ("reachability", "R") or (isinstance(self.k_policy, int) and self.k_policy >= 1)):
            raise ValueError(f"invalid K policy {self.k_policy!r}")

    def prior_for(self, net: Network) -> PriorModel:
        if self.prior == "identity":
            return PriorModel.identity(net.n_total)
        return PriorModel.exp_decay(net, self.prior_base, self.prior_rate)

    def misbehavior_for(self, m: int) -> MisbehaviorModel:
        return MisbehaviorModel.isotropic(m, self.d, self.q)

    def gramian_k(self, net: Network) -> int:
        if isinstance(self.k_policy, int):
            return self.k_policy
        if self.k_policy == "R" or self.lam >= 1.0:
            return net.n_regular
        return reachability_index(net, self.lam)

    def evaluate(self, net: Network) -> float:
        """Objective for a network whose misbehaving nodes are already marked."""
        if self.kind == "gramian_trace":
            return controllability_gramian(net, self.lam, self.gramian_k(net)).trace
        mis = self.misbehavior_for(net.n_misbehaving)
        return ErrorModel(net, self.prior_for(net), mis).total(self.lam)


def _single_attacker_errors(net: Network, obj: DesignObjective) -> np.ndarray:
    """Consensus error for every single-attacker placement, in one batch.

    Placing the attacker at ``m`` replaces row ``m`` of ``I - (1-lam) W``
    by ``lam e_m``; all N systems are inverted together.
    """
    N, lam = net.n_total, obj.lam
    a = 1.0 - lam
    R = N - 1
    T = np.broadcast_to(np.eye(N) - a * net.w_nominal, (N, N, N)).copy()
    idx = np.arange(N)
    T[idx, idx, :] = 0.0
    T[idx, idx, idx] = lam
    E = lam * np.linalg.inv(T)
    E -= 1.0 / R
    E[idx, :, idx] += 1.0 / R  # attacker column keeps its raw influence
    E[idx, idx, :] = 0.0       # attacker row is not part of the error
    sigma = obj.prior_for(net).sigma
    e_v = np.einsum("mij,mij->m", E @ sigma, E) + obj.d * np.einsum("mi,mi->m", E[idx, :, idx], E[idx, :, idx])
    if obj.q == 0.0 or lam == 1.0:
        return e_v
    e_n = np.empty(N)
    for m in range(N):
        keep = np.delete(idx, m)
        A = a * net.w_nominal[np.ix_(keep, keep)]
        b = a * net.w_nominal[keep, m]
        e_n[m] = np.trace(solve_discrete_lyapunov(A, obj.q * np.outer(b, b)))
    return e_v + e_n


def attacker_values(net: Network, obj: DesignObjective) -> np.ndarray:
    """Objective with a single misbehaving node at each position of an all-regular net."""
    if net.n_misbehaving:
        raise ValueError("attacker search needs an all-regular network")
    if net.n_total < 2:
        raise ValueError("attacker search needs at least two nodes")
    if obj.kind == "consensus_error" and obj.lam >= _FAST_LAMBDA_MIN:
        return _single_attacker_errors(net, obj)
    return np.array([obj.evaluate(mark_misbehaving(net, [m])) for m in range(net.n_total)])


def _argmax_lowest(values: np.ndarray) -> int:
    # values equal up to round-off count as ties, resolved by lowest index
    top = values.max()
    return int(np.flatnonzero(values >= top - TIE_RTOL * abs(top))[0])


def worst_case_attacker(net: Network, obj: DesignObjective) -> tuple[int, float]:
    """Exhaustive argmax over single-node placements; ties go to the lowest index."""
    vals = attacker_values(net, obj)
    m = _argmax_lowest(vals)
    return m, float(vals[m])


# -- connectivity sweeps ----------------------------------------------------------

_DENSITY_FIELD = {"k_regular": "degree", "erdos_renyi": "p", "geometric": "radius"}


@dataclass
class SweepRow:
    density: float
    objective_kind: str
    mean: float
    stderr: float
    values: np.ndarray = field(repr=False)


def _sweep_value(kind, n, density, seed, policy, M, obj):
    key = _DENSITY_FIELD[kind]
    dens = int(density) if key == "degree" else float(density)
    net = generate(GraphSpec(kind, n, seed=seed, **{key: dens}))
    if policy == "worst_case":
        return worst_case_attacker(net, obj)[1]
    rng = np.random.default_rng([seed, _ATTACKER_STREAM])
    ids = rng.choice(n, size=M, replace=False)
    return obj.evaluate(mark_misbehaving(net, ids))


def connectivity_sweep(kind: str, n: int, densities, obj: DesignObjective, seeds,
                       policy: str = "worst_case", M: int = 5, threads: int = 1) -> list[SweepRow]:
    """Mean objective over random graphs for each density value.

    ``policy`` is ``"worst_case"`` (single exhaustive attacker) or
    ``"random"`` (``M`` attackers drawn from the graph seed).  Graph ``s``
    is sampled with seed ``s``, so rows do not depend on ``threads``.
    """
    if kind not in _DENSITY_FIELD:
        raise ValueError(f"cannot sweep density of {kind!r} graphs")
    if policy not in ("worst_case", "random"):
        raise ValueError(f"unknown attacker policy {policy!r}")
    if policy == "random" and not 1 <= M < n:
        raise ValueError("random policy needs 1 <= M < n")
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    jobs = [(d, s) for d in densities for s in seeds]

    def run(job):
        return _sweep_value(kind, n, job[0], job[1], policy, M, obj)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            flat = list(pool.map(run, jobs))
    else:
        flat = [run(j) for j in jobs]
    rows = []
    k = len(seeds)
    for i, d in enumerate(densities):
        vals = np.array(flat[i * k:(i + 1) * k])
        se = float(vals.std(ddof=1) / np.sqrt(k)) if k > 1 else 0.0
        rows.append(SweepRow(float(d), obj.kind, float(vals.mean()), se, vals))
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["density_or_step", "objective_kind", "mean", "stderr"])
    for r in rows:
        w.writerow([repr(r.density), r.objective_kind, repr(r.mean), repr(r.stderr)])
    return buf.getvalue()


# -- greedy pruning ---------------------------------------------------------------

@dataclass
class PruneStep:
    edge: tuple[int, int]
    value: float
    degree_histogram: dict


@dataclass
class PruneTrace:
    initial_value: float
    steps: list[PruneStep]
    net: Network

    @property
    def values(self) -> list[float]:
        return [self.initial_value] + [s.value for s in self.steps]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "edge_u", "edge_v", "value"])
        w.writerow([0, "", "", repr(self.initial_value)])
        for k, s in enumerate(self.steps, 1):
            w.writerow([k, s.edge[0] + 1, s.edge[1] + 1, repr(s.value)])
        return buf.getvalue()


def prune_candidates(net: Network, delta: int) -> list[tuple[int, int]]:
    """Edges whose endpoints both still have degree ``delta`` and whose removal keeps connectivity."""
    deg = net.degrees
    out = []
    for u, v in net.edges():
        if deg[u] == delta and deg[v] == delta:
            A = net.adjacency.copy()
            A[u, v] = A[v, u] = False
            if is_connected(A):
                out.append((u, v))
    return out


def _without(net, edge):
    A = net.adjacency.copy()
    A[edge[0], edge[1]] = A[edge[1], edge[0]] = False
    return with_adjacency(net, A)


def removal_values(net: Network, obj: DesignObjective, candidates, threads: int = 1) -> np.ndarray:
    """Worst-case objective after removing each candidate edge."""
    def run(e):
        return worst_case_attacker(_without(net, e), obj)[1]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return np.array(list(pool.map(run, candidates)))
    return np.array([run(e) for e in candidates])


def greedy_prune(net: Network, obj: DesignObjective, max_removals: Optional[int] = None,
                 threads: int = 1) -> PruneTrace:
    """Remove edges one at a time, each minimizing the worst-case objective.

    Only edges between two nodes of full degree ``Delta`` are eligible,
    so every node loses at most one edge and degrees stay in
    ``{Delta, Delta-1}``; removals that disconnect the graph are skipped.
    Ties go to the lexicographically smallest edge.  Stops when no
    eligible edge remains or after ``max_removals`` steps.
    """
    deg = net.degrees
    if net.n_misbehaving or deg.min() != deg.max():
        raise ValueError("greedy pruning starts from an all-regular Delta-regular network")
    if not net.is_connected():
        raise GraphError("greedy pruning needs a connected graph")
    delta = int(deg[0])
    limit = net.n_total // 2 if max_removals is None else max_removals
    trace = PruneTrace(worst_case_attacker(net, obj)[1], [], net)
    cur = net
    for _ in range(limit):
        cands = prune_candidates(cur, delta)
        if not cands:
            break
        vals = removal_values(cur, obj, cands, threads)
        low = vals.min()
        k = int(np.flatnonzero(vals <= low + TIE_RTOL * abs(low))[0])
        cur = _without(cur, cands[k])
        hist = dict(sorted(Counter(cur.degrees.tolist()).items()))
        trace.steps.append(PruneStep(cands[k], float(vals[k]), hist))
    trace.net = cur
    return trace


def matching_baseline(net: Network, obj: DesignObjective) -> float:
    """Worst-case objective after removing a whole perfect matching."""
    return worst_case_attacker(perfect_matching_removal(net), obj)[1]


@dataclass(frozen=True)
class PruneComparison:
    prune_final: float
    matching: float

    @property
    def ratio(self) -> float:
        return self.matching / self.prune_final

    def to_dict(self) -> dict:
        return {"prune_final": self.prune_final, "matching": self.matching, "ratio": self.ratio}


def compare_with_matching(trace: PruneTrace, net: Network, obj: DesignObjective) -> PruneComparison:
    return PruneComparison(trace.values[-1], matching_baseline(net, obj))
