"""Closed-form steady-state performance of the FJ protocol.

For competition ``lam`` the regular states converge in mean to
``S_R L (theta + S_M^T v)`` with the resolvent

    L = lam * (I - (1 - lam) W)^{-1},

where ``W`` is the actual weight matrix (nominal rows for regular nodes,
identity rows for misbehaving ones).  The noise-driven covariance ``P``
of the regular states solves

    P = A P A^T + B Q B^T,   A = (1 - lam) W_reg,  B = (1 - lam) W_mal.

The consensus error is ``e = e_v + e_n`` with

    e_v = tr(Sigma_t E^T E),  E = S_R L - C_R S_R,  Sigma_t = Sigma + S_M^T V S_M,
    e_n = tr(P).

Expanding ``E(theta + S_M^T v)`` shows that no additional constant term is
needed: the expression above is the full steady-state error, which the
Monte Carlo estimator in :mod:`fjresilience.dynamics` reproduces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import MisbehaviorModel, PriorModel, _check_models
from .graphs import Network
from .numerics import NumericalError, ScaledSymmetricLyapunov, eig_sym, solve_discrete_lyapunov, solve_linear

LAMBDA_MIN = 1e-6
GRID_START = 1e-4
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _check_lam(lam, low=0.0):
    if not low <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [{low}, 1], got {lam}")


@dataclass(frozen=True, eq=False)
class ActualWeightMatrix:
    """Weights actually followed in the network: ``[[W_reg, W_mal], [0, I_M]]``."""

    W: np.ndarray
    n_regular: int

    @property
    def n_total(self) -> int:
        return self.W.shape[0]

    @property
    def n_misbehaving(self) -> int:
        return self.n_total - self.n_regular

    @property
    def w_reg(self):
        return self.W[: self.n_regular, : self.n_regular]

    @property
    def w_mal(self):
        return self.W[: self.n_regular, self.n_regular:]


def build_actual_w(net: Network) -> ActualWeightMatrix:
    R, N = net.n_regular, net.n_total
    W = np.zeros((N, N))
    W[:R] = net.w_nominal[:R]
    W[R:, R:] = np.eye(N - R)
    return ActualWeightMatrix(W, R)


def absorption_matrix(aw: ActualWeightMatrix) -> np.ndarray:
    """``(I - W_reg)^{-1} W_mal``: where consensus sends each regular node."""
    R = aw.n_regular
    return solve_linear(np.eye(R) - aw.w_reg, aw.w_mal)


def _perron_left(W):
    # left eigenvector of a row-stochastic irreducible W, normalized to sum 1
    N = W.shape[0]
    A = (np.eye(N) - W).T
    A[-1] = 1.0
    rhs = np.zeros(N)
    rhs[-1] = 1.0
    return solve_linear(A, rhs)


def consensus_limit(aw: ActualWeightMatrix) -> np.ndarray:
    """Limit of the resolvent as ``lam -> 0+``.

    With misbehaving nodes this is ``[[0, (I - W_reg)^{-1} W_mal], [0, I]]``;
    without them it is ``1 pi^T`` with ``pi`` the left Perron vector.
    """
    R, N = aw.n_regular, aw.n_total
    if aw.n_misbehaving == 0:
        return np.outer(np.ones(N), _perron_left(aw.W))
    Wbar = np.zeros((N, N))
    Wbar[:R, R:] = absorption_matrix(aw)
    Wbar[R:, R:] = np.eye(N - R)
    return Wbar


def resolvent_l(aw: ActualWeightMatrix, lam: float) -> np.ndarray:
    """Steady-state influence matrix ``L = lam (I - (1-lam) W)^{-1}``.

    Below ``LAMBDA_MIN`` the analytic limit :func:`consensus_limit` is
    returned.  With misbehaving nodes only the regular block is inverted;
    without them the Perron direction is deflated, so both paths stay well
    conditioned as ``lam -> 0``.
    """
    _check_lam(lam)
    R, N = aw.n_regular, aw.n_total
    if lam == 1.0:
        return np.eye(N)
    if lam < LAMBDA_MIN:
        return consensus_limit(aw)
    a = 1.0 - lam
    if aw.n_misbehaving:
        L = np.zeros((N, N))
        inv = solve_linear(np.eye(R) - a * aw.w_reg, np.eye(R))
        L[:R, :R] = lam * inv
        L[:R, R:] = a * inv @ aw.w_mal
        L[R:, R:] = np.eye(N - R)
        return L
    Pi = np.outer(np.ones(N), _perron_left(aw.W))
    X = solve_linear(np.eye(N) - a * (aw.W - Pi), np.eye(N) - Pi)
    return Pi + lam * X


def _noise_forcing(net, lam, Q):
    B = (1.0 - lam) * net.w_mal
    return B @ np.asarray(Q, dtype=float) @ B.T


def _lyapunov(net, lam, S, solver=None):
    if solver is not None:
        return solver.solve(1.0 - lam, S)
    return solve_discrete_lyapunov((1.0 - lam) * net.w_reg, S)


def steady_state_p(net: Network, lam: float, Q, solver=None) -> np.ndarray:
    """Steady-state covariance of the regular states driven by deception noise.

    ``solver`` optionally supplies a :class:`ScaledSymmetricLyapunov` for
    ``W_reg``, reused across many values of ``lam``.
    """
    _check_lam(lam)
    R = net.n_regular
    if lam == 1.0 or net.n_misbehaving == 0:
        return np.zeros((R, R))
    return _lyapunov(net, lam, _noise_forcing(net, lam, Q), solver)


def steady_state_p_derivative(net: Network, lam: float, P: np.ndarray, solver=None) -> np.ndarray:
    """``dP/dlam`` by implicit differentiation of the Lyapunov equation.

    Differentiating ``P = A P A^T + B Q B^T`` gives
    ``X = A X A^T - 2 P / (1 - lam)``, solved exactly.
    """
    R = net.n_regular
    if lam >= 1.0 or net.n_misbehaving == 0:
        return np.zeros((R, R))
    return _lyapunov(net, lam, -2.0 * P / (1.0 - lam), solver)


def en_derivative_diagonal(net: Network, lam: float, Q) -> float:
    """Element-wise implicit derivative of ``tr(P)`` (diagnostic only).

    Differentiates each diagonal equation of the Lyapunov system in
    isolation; it ignores how the other entries of ``P`` move with
    ``lam`` and therefore underestimates the true slope.  Use
    :meth:`ErrorModel.derivative` for the exact value.
    """
    P = steady_state_p(net, lam, Q)
    W1 = net.w_reg
    Qt = net.w_mal @ np.asarray(Q, dtype=float) @ net.w_mal.T
    num = 2.0 * (1.0 - lam) * (np.diag(W1 @ P @ W1.T) + np.diag(Qt))
    den = 1.0 - (1.0 - lam) ** 2 * np.diag(W1) ** 2
    return float(-np.sum(num / den))


@dataclass
class AnalyticReport:
    lam: float
    L: np.ndarray
    P: np.ndarray
    e_v: float
    e_n: float
    e_total: float
    e_deception: float
    e_consensus: float

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("lam", "e_v", "e_n", "e_total", "e_deception", "e_consensus")}

    def csv_row(self) -> list[float]:
        return [self.lam, self.e_v, self.e_n, self.e_total, self.e_deception, self.e_consensus]


class ErrorModel:
    """Consensus error of the FJ protocol as a function of ``lam``.

    Resolvents and noise covariances are cached per ``lam``;
    :meth:`with_misbehavior` reuses them when only ``V`` changes.
    """

    def __init__(self, net: Network, prior: PriorModel, mis: MisbehaviorModel, *, _caches=None):
        _check_models(net, prior, mis)
        self.net, self.prior, self.mis = net, prior, mis
        self.aw = build_actual_w(net)
        R, N = net.n_regular, net.n_total
        self.R, self.N = R, N
        st = prior.sigma.copy()
        st[R:, R:] += mis.V
        self.sigma_tilde = st
        self._L, self._P, self._solver = _caches if _caches is not None else ({}, {}, [])

    def with_misbehavior(self, mis: MisbehaviorModel) -> "ErrorModel":
        same_q = np.array_equal(mis.Q, self.mis.Q)
        return ErrorModel(self.net, self.prior, mis, _caches=(self._L, self._P if same_q else {}, self._solver))

    @property
    def solver(self):
        """Diagonalized Lyapunov solver when ``W_reg`` is symmetric, else ``None``."""
        if not self._solver:
            W1 = self.net.w_reg
            sym = self.net.n_misbehaving > 0 and np.allclose(W1, W1.T, rtol=0.0, atol=1e-12)
            self._solver.append(ScaledSymmetricLyapunov(W1) if sym else None)
        return self._solver[0]

    def L(self, lam: float) -> np.ndarray:
        lam = float(lam)
        if lam not in self._L:
            self._L[lam] = resolvent_l(self.aw, lam)
        return self._L[lam]

    def P(self, lam: float) -> np.ndarray:
        lam = float(lam)
        if lam not in self._P:
            self._P[lam] = steady_state_p(self.net, lam, self.mis.Q, self.solver)
        return self._P[lam]

    def E(self, lam: float) -> np.ndarray:
        E = self.L(lam)[: self.R].copy()
        E[:, : self.R] -= 1.0 / self.R
        return E

    def e_v(self, lam: float) -> float:
        E = self.E(lam)
        return float(np.sum((E @ self.sigma_tilde) * E))

    def e_n(self, lam: float) -> float:
        return float(np.trace(self.P(lam)))

    def total(self, lam: float) -> float:
        return self.e_v(lam) + self.e_n(lam)

    def report(self, lam: float) -> AnalyticReport:
        E = self.E(lam)
        e_v = float(np.sum((E @ self.sigma_tilde) * E))
        e_n = self.e_n(lam)
        Er = E[:, : self.R]
        e_cons = float(np.sum((Er @ self.prior.sigma[: self.R, : self.R]) * Er))
        return AnalyticReport(float(lam), self.L(lam), self.P(lam), e_v, e_n, e_v + e_n,
                              e_v - e_cons + e_n, e_cons)

    def derivative(self, lam: float) -> float:
        """Exact ``de/dlam``.

        ``dL/dlam = L (I - W L) / lam`` for the bias part and an implicit
        Lyapunov solve for the noise part; below ``LAMBDA_MIN`` the
        right-derivative from :func:`gamma_blocks` is used.
        """
        _check_lam(lam)
        return self.derivative_ev(lam) + self.derivative_en(lam)

    def derivative_ev(self, lam: float) -> float:
        if lam < LAMBDA_MIN:
            dE = gamma_blocks(self.net).gamma[: self.R]
        else:
            L = self.L(lam)
            dE = (L @ (np.eye(self.N) - self.aw.W @ L))[: self.R] / lam
        return float(2.0 * np.sum((dE @ self.sigma_tilde) * self.E(lam)))

    def derivative_en(self, lam: float) -> float:
        return float(np.trace(steady_state_p_derivative(self.net, lam, self.P(lam), self.solver)))


def error_terms(net, lam, prior, mis) -> AnalyticReport:
    return ErrorModel(net, prior, mis).report(lam)


def error_derivative(net, lam, prior, mis) -> float:
    return ErrorModel(net, prior, mis).derivative(lam)


def decomposition(net, lam, prior, mis) -> tuple[float, float]:
    """``(e_deception, e_consensus)`` for one misbehaving node and diagonal sigma.

    ``e_consensus = sum_i sigma_i ||L_i^{-m} - 1/R||^2`` over regular
    columns ``i``; ``e_deception = (sigma_m + d) ||L_m^{-m}||^2 + e_n``.
    """
    if net.n_misbehaving != 1:
        raise ValueError("decomposition needs exactly one misbehaving node")
    if not prior.is_diagonal():
        raise ValueError("decomposition needs a diagonal prior covariance")
    model = ErrorModel(net, prior, mis)
    R = net.n_regular
    L = model.L(lam)[:R]
    sig = np.diag(prior.sigma)
    e_cons = float(sum(sig[i] * np.sum((L[:, i] - 1.0 / R) ** 2) for i in range(R)))
    e_dec = float((sig[R] + mis.V[0, 0]) * np.sum(L[:, R] ** 2) + model.e_n(lam))
    return e_dec, e_cons


def social_power(net: Network, lam: float, m: int) -> np.ndarray:
    """Influence of misbehaving node ``m`` on each regular node (column of L)."""
    if not net.n_regular <= m < net.n_total:
        raise ValueError(f"node {m} is not misbehaving")
    return resolvent_l(build_actual_w(net), lam)[: net.n_regular, m].copy()


# -- derivative of L at lam = 0 -------------------------------------------------

@dataclass
class GammaBlocks:
    gamma: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    method: str


def _gamma_spectral(net):
    R, N = net.n_regular, net.n_total
    G = np.zeros((N, N))
    if net.n_misbehaving == 0:
        mu, Y = eig_sym(net.w_nominal)
        keep = mu < 1.0 - 1e-9
        G[:] = (Y[:, keep] / (1.0 - mu[keep])) @ Y[:, keep].T
        return G
    # eigenvectors of W: [y; 0] for eigenpairs (mu, y) of W_reg, and
    # [A u; u] (A = absorption) for the unit eigenvalue, which Gamma annihilates
    mu, Y = eig_sym(net.w_reg)
    absorb = absorption_matrix(build_actual_w(net))
    g1 = (Y / (1.0 - mu)) @ Y.T
    G[:R, :R] = g1
    G[:R, R:] = -g1 @ absorb
    return G


def _gamma_fd(net, lam0=1e-4):
    aw = build_actual_w(net)

    def central(l0):
        h = 0.5 * l0
        return (resolvent_l(aw, l0 + h) - resolvent_l(aw, l0 - h)) / (2.0 * h)

    # Richardson step removes the O(lam0) offset between dL/dlam(lam0) and the limit
    return 2.0 * central(lam0) - central(2.0 * lam0)


def gamma_blocks(net: Network, method: str = "auto") -> GammaBlocks:
    """``Gamma = lim_{lam->0+} dL/dlam`` with its regular blocks.

    ``method`` is ``"spectral"`` (symmetric nominal weights only),
    ``"fd"`` (finite differences of the resolvent near zero) or
    ``"auto"``.
    """
    if method == "auto":
        method = "spectral" if net.is_symmetric() else "fd"
    if method == "spectral":
        if not net.is_symmetric():
            raise ValueError("spectral construction needs symmetric nominal weights")
        G = _gamma_spectral(net)
    elif method == "fd":
        G = _gamma_fd(net)
    else:
        raise ValueError(f"unknown method {method!r}")
    R = net.n_regular
    if net.n_misbehaving:
        G[R:] = 0.0
    return GammaBlocks(G, G[:R, :R], G[:R, R:], method)


# -- closed forms at the endpoints ----------------------------------------------

def _blocks(S, R):
    return S[:R, :R], S[:R, R:], S[R:, R:]


def e_v_full_competition(prior: PriorModel, n_regular: int) -> float:
    """``e_v(1) = tr(Sigma_11 (I - C_R))``."""
    S11 = prior.sigma[:n_regular, :n_regular]
    return float(np.trace(S11) - S11.sum() / n_regular)


def e_v_full_collaboration(prior: PriorModel, mis: MisbehaviorModel, n_regular: int) -> float:
    """``e_v(0)`` when consensus settles on the plain average of misbehaving values.

    Exact for a single misbehaving node; for several it assumes uniform
    absorption and a diagonal ``V`` (use :class:`ErrorModel` otherwise).
    """
    R, M = n_regular, mis.m
    S11, S12, S22 = _blocks(prior.sigma, R)
    return float(R / M**2 * np.trace(mis.V) + R / M**2 * S22.sum() + S11.sum() / R - 2.0 / M * S12.sum())


@dataclass(frozen=True)
class Prop1Check:
    """Is full competition (lam = 1) better than full collaboration (lam = 0)?"""

    holds: bool
    lhs: float
    rhs: float


def check_prop1(net: Network, prior: PriorModel, mis: MisbehaviorModel, *, literal: bool = False) -> Prop1Check:
    """Evaluate the full-competition-vs-consensus inequality ``lhs > rhs``.

    Both sides are scaled by ``M^2 / R``.  By default the consensus limit
    uses the actual absorption matrix, so ``holds`` equals ``e(1) < e(0)``
    for every network.  With ``literal=True`` the textbook form is used,
    which assumes consensus converges to the plain mean of the misbehaving
    values and that ``V`` is diagonal (exact for ``M = 1``).
    """
    _check_models(net, prior, mis)
    R, M = net.n_regular, net.n_misbehaving
    if M == 0:
        raise ValueError("check_prop1 needs at least one misbehaving node")
    S11, S12, S22 = _blocks(prior.sigma, R)
    e_n0 = float(np.trace(steady_state_p(net, 0.0, mis.Q)))
    k = M**2 / R
    if literal:
        lhs = k * e_n0 + np.trace(mis.V)
        rhs = k * np.trace(S11) - 2.0 * M**2 / R**2 * S11.sum() + 2.0 * M / R * S12.sum() - S22.sum()
    else:
        G = absorption_matrix(build_actual_w(net))
        GtG = G.T @ G
        lhs = k * (e_n0 + np.trace(mis.V @ GtG))
        rhs = k * (np.trace(S11) - 2.0 * S11.sum() / R
                   + 2.0 * np.sum(S12 @ G.T) / R - np.trace(S22 @ GtG))
    return Prop1Check(bool(lhs > rhs), float(lhs), float(rhs))


@dataclass(frozen=True)
class Theorem1Check:
    """Which sufficient condition for an interior optimum holds, if any."""

    condition: str  # "C1", "C2" or "neither"
    lhs: float
    rhs: float


def check_theorem1(net: Network, prior: PriorModel, mis: MisbehaviorModel) -> Theorem1Check:
    """Test the conditions guaranteeing ``0 < lam* < 1``.

    C1: diagonal prior covariance.  C2: symmetric nominal weights and a
    negative right-derivative of the error at ``lam = 0``, written as
    ``lhs > rhs`` with ``lhs = -de_n/dlam(0) / 2 - tr(V Gamma_2^T A)`` where
    ``A`` is the absorption matrix (``C_RM`` for uniform absorption).
    """
    _check_models(net, prior, mis)
    R = net.n_regular
    if net.n_misbehaving == 0 or R < 2:
        # a lone regular node has zero error at full competition
        return Theorem1Check("neither", math.nan, math.nan)
    S11, S12, S22 = _blocks(prior.sigma, R)
    gb = gamma_blocks(net)
    G = absorption_matrix(build_actual_w(net))
    de_n0 = ErrorModel(net, prior, mis).derivative_en(0.0)
    # de/dlam(0) = 2 (rhs + tr(V Gamma_2^T A)) + de_n/dlam(0), so a negative slope is lhs > rhs
    lhs = float(-0.5 * de_n0 - np.trace(mis.V @ gb.gamma2.T @ G))
    rhs = float(-np.sum(S11 @ gb.gamma1.T) / R - np.sum(S12 @ gb.gamma2.T) / R
                + np.trace(S12.T @ gb.gamma1.T @ G) + np.trace(S22 @ gb.gamma2.T @ G))
    if prior.is_diagonal():
        cond = "C1"
    elif net.is_symmetric() and lhs > rhs:
        cond = "C2"
    else:
        cond = "neither"
    return Theorem1Check(cond, lhs, rhs)


# -- optimal competition ---------------------------------------------------------

def lambda_grid(resolution: int = 256, start: float = GRID_START) -> np.ndarray:
    if resolution < 2:
        raise ValueError("grid resolution must be at least 2")
    return np.linspace(start, 1.0, resolution)


def golden_section(f, lo, hi, tol=1e-5):
    """Minimize a unimodal ``f`` on ``[lo, hi]`` to an interval of width ``tol``."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def optimal_lambda(net=None, prior=None, mis=None, resolution: int = 256, tol: float = 1e-5,
                   *, model: Optional[ErrorModel] = None) -> tuple[float, float]:
    """Grid scan over ``[1e-4, 1]`` then golden-section refinement.

    Returns ``(lam_star, e_star)``.
    """
    if resolution < 32:
        raise ValueError("grid resolution must be at least 32")
    model = model or ErrorModel(net, prior, mis)
    grid = lambda_grid(resolution)
    values = np.array([model.total(l) for l in grid])
    i = int(np.argmin(values))
    best = (float(grid[i]), float(values[i]))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    lam, val = golden_section(model.total, lo, hi, tol)
    if val < best[1]:
        best = (float(lam), float(val))
    return best


def grid_argmin(model: ErrorModel, resolution: int = 256) -> tuple[int, np.ndarray, np.ndarray]:
    """Index of the grid minimizer, the grid, and the error values on it."""
    grid = lambda_grid(resolution)
    values = np.array([model.total(l) for l in grid])
    return int(np.argmin(values)), grid, values
