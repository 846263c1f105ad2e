"""Controllability Gramian of the regular subsystem driven by misbehaving nodes.

With ``A = (1-lam) W_reg`` and ``B = (1-lam) W_mal`` the K-step Gramian is

    W(K) = sum_{k<K} A^k B B^T (A^T)^k.

A large trace means the attackers can steer the regular states cheaply.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .graphs import Network

RANK_RTOL = 1e-10


@dataclass
class GramianResult:
    K: int
    gramian: np.ndarray
    trace: float


def _system(net: Network, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    a = 1.0 - lam
    return a * net.w_reg, a * net.w_mal


def controllability_gramian(net: Network, lam: float, K: int) -> GramianResult:
    """K-step Gramian by the recurrence ``X <- A X A^T``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    A, B = _system(net, lam)
    X = B @ B.T
    W = np.zeros_like(X)
    for _ in range(K):
        W += X
        X = A @ X @ A.T
    W = 0.5 * (W + W.T)
    return GramianResult(K, W, float(np.trace(W)))


def reachability_index(net: Network, lam: float, rtol: float = RANK_RTOL) -> int:
    """Smallest K at which ``rank [B, AB, ..., A^{K-1} B]`` stops growing.

    Singular values below ``rtol * sigma_max`` count as zero.  Falls back
    to ``K = R`` if the rank never settles, which only happens when the
    tolerance sits on a singular-value gap.
    """
    if lam >= 1.0:
        raise ValueError("reachability index is undefined at lambda = 1 (no input)")
    if net.n_misbehaving == 0:
        raise ValueError("reachability index needs at least one misbehaving node")
    A, B = _system(net, lam)
    R = net.n_regular
    blocks = [B]
    prev = -1
    for K in range(1, R + 1):
        s = np.linalg.svd(np.hstack(blocks), compute_uv=False)
        rank = int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0
        if rank == prev:
            return K - 1
        if rank == R:
            return K
        prev = rank
        blocks.append(A @ blocks[-1])
    return R


def trace_series(net: Network, lam: float, K: int) -> float:
    """``tr W(K) = (1-lam)^2 sum_k ||((1-lam) W_reg)^k W_mal||_F^2``."""
    a = 1.0 - lam
    W1, W2 = net.w_reg, net.w_mal
    total, term = 0.0, W2.copy()
    for _ in range(K):
        total += float(np.sum(term * term))
        term = a * W1 @ term
    return a * a * total


def gramian_trace_curve(net: Network, lams, K: Optional[int] = None) -> tuple[np.ndarray, int]:
    """``tr W(K)`` on a grid of ``lam`` with one K for the whole curve.

    Without ``K`` the reachability index at the smallest grid value is used.
    Returns ``(traces, K)``.
    """
    lams = np.asarray(lams, dtype=float)
    if np.any(lams < 0.0) or np.any(lams >= 1.0):
        raise ValueError("lambda grid must lie in [0, 1)")
    if K is None:
        K = reachability_index(net, float(lams.min()))
    return np.array([controllability_gramian(net, l, K).trace for l in lams]), K


def curve_csv(lams, traces, K) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda", "K", "trace"])
    for l, t in zip(lams, traces):
        w.writerow([repr(float(l)), int(K), repr(float(t))])
    return buf.getvalue()
