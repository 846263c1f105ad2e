"""Trajectory simulation of the averaging protocols under misbehavior.

Four protocols are supported:

``consensus``
    ``x_R(k+1) = W_R x(k)`` (the FJ update with ``lam = 0``).
``fj``
    Friedkin-Johnsen: ``x_i(k+1) = lam*theta_i + (1-lam) * sum_j W_ij x_j(k)``.
``wmsr``
    Trims up to ``F`` neighbor values above and below the node's own
    value, then averages the rest together with its own state.
``saba``
    Simplified buffer-and-vote baseline: every node keeps the full history
    of values broadcast by each neighbor, votes the median of that
    history, and applies the nominal weights to the voted values.

Misbehaving nodes ignore the protocol: ``x_m(k) = theta_m + v_m + n_m(k)``
with white noise ``n(k) ~ N(0, Q)``, for every ``k`` including ``k = 0``.

All simulation is vectorized over independent trials.  Trial ``t`` of a
run with master seed ``s`` draws its world and noise path from the
stream ``numpy.random.default_rng([s, t])``, so results do not depend on
chunking or scheduling.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .graphs import Network, shortest_path_lengths
from .numerics import NumericalError, spectral_radius

PROTOCOLS = ("consensus", "fj", "wmsr", "saba")
_CHUNK = 2000


def _psd_factor(C, name):
    """Matrix F with F F^T = C for a symmetric PSD C."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.size == 0:
        return C
    if not np.allclose(C, C.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (C + C.T))
    if vals.min() < -1e-10 * max(1.0, abs(vals.max())):
        raise ValueError(f"{name} must be positive semidefinite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True, eq=False)
class PriorModel:
    """Zero-mean Gaussian prior on the observations, covariance ``sigma``."""

    sigma: np.ndarray
    kind: str = "explicit"

    def __post_init__(self):
        S = np.asarray(self.sigma, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError("sigma must be square")
        if not np.allclose(S, S.T, atol=1e-12):
            raise ValueError("sigma must be symmetric")
        try:
            chol = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise ValueError("sigma must be positive definite") from exc
        object.__setattr__(self, "sigma", S)
        object.__setattr__(self, "_chol", chol)

    @property
    def n(self) -> int:
        return self.sigma.shape[0]

    @property
    def chol(self) -> np.ndarray:
        return self._chol

    def is_diagonal(self) -> bool:
        return bool(np.count_nonzero(self.sigma - np.diag(np.diag(self.sigma))) == 0)

    def relabel(self, order) -> "PriorModel":
        """Prior for a network whose node ``k`` is old node ``order[k]``."""
        order = np.asarray(order)
        return PriorModel(self.sigma[np.ix_(order, order)], self.kind)

    @classmethod
    def identity(cls, n, scale=1.0):
        return cls(scale * np.eye(n), "diagonal")

    @classmethod
    def diagonal(cls, variances):
        return cls(np.diag(np.asarray(variances, dtype=float)), "diagonal")

    @classmethod
    def exp_decay(cls, net: Network, base=10.0, rate=0.2):
        """``sigma_ij = base ** (-rate * hops(i, j))``, unit variances."""
        D = shortest_path_lengths(net)
        return cls(np.power(float(base), -float(rate) * D), "exp_decay")


@dataclass(frozen=True, eq=False)
class MisbehaviorModel:
    """Bias covariance ``V``, noise covariance ``Q`` (both M x M), optional fixed bias."""

    V: np.ndarray
    Q: np.ndarray
    fixed_bias: Optional[np.ndarray] = None

    def __post_init__(self):
        V = np.asarray(self.V, dtype=float)
        Q = np.asarray(self.Q, dtype=float)
        V = V.reshape(1, 1) if V.ndim == 0 else V
        Q = Q.reshape(1, 1) if Q.ndim == 0 else Q
        if V.shape != Q.shape or V.shape[0] != V.shape[1]:
            raise ValueError("V and Q must be square with equal shapes")
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "_fv", _psd_factor(V, "V"))
        object.__setattr__(self, "_fq", _psd_factor(Q, "Q"))
        if self.fixed_bias is not None:
            b = np.asarray(self.fixed_bias, dtype=float).reshape(-1)
            if b.size != V.shape[0]:
                raise ValueError("fixed_bias length must equal M")
            object.__setattr__(self, "fixed_bias", b)

    @property
    def m(self) -> int:
        return self.V.shape[0]

    @classmethod
    def isotropic(cls, m, d=0.0, q=0.0, fixed_bias=None):
        return cls(d * np.eye(m), q * np.eye(m), fixed_bias)

    @classmethod
    def none(cls):
        return cls(np.zeros((0, 0)), np.zeros((0, 0)))

    def with_V(self, V) -> "MisbehaviorModel":
        return MisbehaviorModel(V, self.Q, self.fixed_bias)

    def with_Q(self, Q) -> "MisbehaviorModel":
        return MisbehaviorModel(self.V, Q, self.fixed_bias)


def _check_models(net, prior, mis):
    if prior.n != net.n_total:
        raise ValueError("prior dimension does not match the network")
    if mis.m != net.n_misbehaving:
        raise ValueError("misbehavior dimension does not match the number of misbehaving nodes")


def sample_world(prior: PriorModel, mis: MisbehaviorModel, rng):
    """Draw observations ``theta ~ N(0, sigma)`` and biases ``v``, independently."""
    theta = prior.chol @ rng.standard_normal(prior.n)
    if mis.fixed_bias is not None:
        v = mis.fixed_bias.copy()
    else:
        v = mis._fv @ rng.standard_normal(mis.m)
    return theta, v


def _sample_trials(prior, mis, horizon, seed, trials):
    """Worlds and noise paths for trials ``trials`` of master ``seed``."""
    N, M = prior.n, mis.m
    thetas = np.empty((len(trials), N))
    biases = np.empty((len(trials), M))
    noise = np.empty((len(trials), horizon + 1, M))
    for row, t in enumerate(trials):
        rng = np.random.default_rng([int(seed), int(t)])
        thetas[row], biases[row] = sample_world(prior, mis, rng)
        noise[row] = rng.standard_normal((horizon + 1, M)) @ mis._fq.T
    return thetas, biases, noise


# -- single steps (batched over leading axes) ---------------------------------

def _check_lam(lam):
    if lam is None or not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")


def _set_misbehaving(net, x_new, x, theta, bias, noise):
    R = net.n_regular
    if theta is None:
        x_new[..., R:] = x[..., R:]
    else:
        theta = np.asarray(theta, dtype=float)
        bias = np.zeros(net.n_misbehaving) if bias is None else np.asarray(bias, dtype=float)
        noise = 0.0 if noise is None else np.asarray(noise, dtype=float)
        x_new[..., R:] = theta[..., R:] + bias + noise
    return x_new


def step_fj(net: Network, lam, x, theta, bias=None, noise=None):
    """One FJ update; misbehaving rows become ``theta_m + v_m + noise_m``."""
    _check_lam(lam)
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    R = net.n_regular
    x_new = np.empty_like(x)
    x_new[..., :R] = lam * theta[..., :R] + (1.0 - lam) * x @ net.w_nominal[:R].T
    return _set_misbehaving(net, x_new, x, theta, bias, noise)


def step_wmsr(net: Network, F, x, theta=None, bias=None, noise=None):
    """One W-MSR update with trimming parameter ``F``.

    Each regular node drops the (at most) ``F`` largest neighbor values
    strictly above its own and the ``F`` smallest strictly below it, then
    takes the plain average of the retained values and its own.
    """
    if F < 0:
        raise ValueError("F must be nonnegative")
    x = np.asarray(x, dtype=float)
    x_new = np.empty_like(x)
    for i in range(net.n_regular):
        own = x[..., i]
        nb = np.sort(x[..., net.neighbors(i)], axis=-1)
        deg = nb.shape[-1]
        k = min(F, deg)
        top, bottom = nb[..., deg - k:], nb[..., :k]
        drop_top = top > own[..., None]
        drop_bottom = bottom < own[..., None]
        dropped = (top * drop_top).sum(-1) + (bottom * drop_bottom).sum(-1)
        n_drop = drop_top.sum(-1) + drop_bottom.sum(-1)
        x_new[..., i] = (own + nb.sum(-1) - dropped) / (1 + deg - n_drop)
    return _set_misbehaving(net, x_new, x, theta, bias, noise)


def step_saba(net: Network, buffers, x, theta=None, bias=None, noise=None):
    """One step of the buffer-and-vote baseline.

    ``buffers`` holds the history of broadcast values, shape ``(..., N, k)``
    (``None`` before the first step).  The current broadcast ``x`` is
    appended, each sender's value is voted as the median of its history
    and regular nodes apply the nominal weights to the voted values.
    Returns ``(x_new, buffers)``.
    """
    x = np.asarray(x, dtype=float)
    if buffers is None:
        buffers = x[..., None]
    else:
        buffers = np.concatenate([buffers, x[..., None]], axis=-1)
    voted = np.median(buffers, axis=-1)
    R = net.n_regular
    x_new = np.empty_like(x)
    x_new[..., :R] = voted @ net.w_nominal[:R].T
    return _set_misbehaving(net, x_new, x, theta, bias, noise), buffers


# -- trajectories -------------------------------------------------------------

@dataclass
class Trajectory:
    """States ``x(0..T)`` (shape ``(T+1, N)``) of one simulated world."""

    states: np.ndarray
    theta: np.ndarray
    bias: np.ndarray
    noise: np.ndarray
    protocol: str
    net: Network

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1

    def cost(self) -> np.ndarray:
        """Consensus cost ``sum_R (x_i(k) - mean(theta_R))^2`` for every ``k``."""
        R = self.net.n_regular
        return ((self.states[:, :R] - self.theta[:R].mean()) ** 2).sum(axis=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "node_id", "role", "state"])
        R = self.net.n_regular
        for k, row in enumerate(self.states):
            for i, val in enumerate(row):
                w.writerow([k, int(self.net.labels[i]) + 1, "regular" if i < R else "misbehaving", repr(float(val))])
        return buf.getvalue()


def _run(net, protocol, thetas, biases, noise, horizon, lam, F, keep_states):
    R = net.n_regular
    x = thetas.copy()
    x[:, R:] = thetas[:, R:] + biases + noise[:, 0]
    theta_bar = thetas[:, :R].mean(axis=1, keepdims=True)
    costs = np.empty((thetas.shape[0], horizon + 1))
    costs[:, 0] = ((x[:, :R] - theta_bar) ** 2).sum(axis=1)
    states = [x.copy()] if keep_states else None
    buffers = None
    for k in range(1, horizon + 1):
        n_k = noise[:, k]
        if protocol == "fj":
            x = step_fj(net, lam, x, thetas, biases, n_k)
        elif protocol == "consensus":
            x = step_fj(net, 0.0, x, thetas, biases, n_k)
        elif protocol == "wmsr":
            x = step_wmsr(net, F, x, thetas, biases, n_k)
        else:
            x, buffers = step_saba(net, buffers, x, thetas, biases, n_k)
        costs[:, k] = ((x[:, :R] - theta_bar) ** 2).sum(axis=1)
        if keep_states:
            states.append(x.copy())
    return costs, (np.stack(states, axis=1) if keep_states else None)


def _check_protocol(protocol, lam, F):
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if protocol == "fj":
        _check_lam(lam)
    if protocol == "wmsr" and (F is None or F < 0):
        raise ValueError("W-MSR needs F >= 0")


def simulate(net, protocol, prior, mis, horizon, rng, *, lam=None, F=1) -> Trajectory:
    """Simulate one world from ``x(0) = theta`` for ``horizon`` steps."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    _check_protocol(protocol, lam, F)
    _check_models(net, prior, mis)
    theta, v = sample_world(prior, mis, rng)
    noise = rng.standard_normal((horizon + 1, mis.m)) @ mis._fq.T
    _, states = _run(net, protocol, theta[None], v[None], noise[None], horizon, lam, F, True)
    return Trajectory(states[0], theta, v, noise, protocol, net)


def cost_histories(net, protocol, prior, mis, horizon, trials, seed, *, lam=None, F=1, trial_offset=0):
    """Per-trial cost at every step, shape ``(trials, horizon + 1)``."""
    _check_protocol(protocol, lam, F)
    _check_models(net, prior, mis)
    out = np.empty((trials, horizon + 1))
    for start in range(0, trials, _CHUNK):
        idx = np.arange(start, min(trials, start + _CHUNK)) + trial_offset
        th, b, nz = _sample_trials(prior, mis, horizon, seed, idx)
        out[idx - trial_offset], _ = _run(net, protocol, th, b, nz, horizon, lam, F, False)
    return out


@dataclass(frozen=True)
class MCEstimate:
    mean_cost: float
    std_error: float
    trials: int
    horizon: int

    def z_score(self, reference: float) -> float:
        if self.std_error == 0.0:
            return 0.0 if math.isclose(self.mean_cost, reference, rel_tol=1e-9, abs_tol=1e-12) else math.inf
        return (self.mean_cost - reference) / self.std_error


def mc_cost(net, protocol, prior, mis, horizon, trials, seed, *, lam=None, F=1) -> MCEstimate:
    """Monte Carlo estimate of the consensus cost at step ``horizon``."""
    if trials < 2:
        raise ValueError("need at least two trials")
    final = cost_histories(net, protocol, prior, mis, horizon, trials, seed, lam=lam, F=F)[:, -1]
    return MCEstimate(float(final.mean()), float(final.std(ddof=1) / np.sqrt(trials)), trials, horizon)


def horizon_for(net: Network, lam: float, tol: float = 1e-10, max_horizon: int = 100_000) -> int:
    """Steps after which the FJ transient is below ``tol`` (geometric bound)."""
    rate = (1.0 - lam) * spectral_radius(net.w_reg) if net.n_regular else 0.0
    if rate <= 0.0:
        return 1
    if rate >= 1.0:
        raise NumericalError("FJ dynamics does not converge for this network and lambda")
    return int(min(max_horizon, max(1, math.ceil(math.log(tol) / math.log(rate)))))
