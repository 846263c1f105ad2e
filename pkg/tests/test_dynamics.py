import numpy as np
import pytest

from fjresilience.analysis import build_actual_w, resolvent_l, steady_state_p
from fjresilience.dynamics import (MCEstimate, MisbehaviorModel, PriorModel, cost_histories, horizon_for, mc_cost,
                                   simulate, step_fj, step_saba, step_wmsr)
from fjresilience.graphs import GraphSpec, from_edges, generate, mark_misbehaving

from instances import two_node


def wmsr_reference(net, F, x):
    # one node at a time, straight from the trimming rule
    out = x.copy()
    for i in range(net.n_regular):
        vals = sorted(x[j] for j in net.neighbors(i))
        above = [v for v in vals if v > x[i]]
        below = [v for v in vals if v < x[i]]
        drop_vals = above[len(above) - min(F, len(above)):] + below[:min(F, len(below))]
        kept = list(vals)
        for v in drop_vals:
            kept.remove(v)
        out[i] = (x[i] + sum(kept)) / (1 + len(kept))
    return out


def test_prior_exp_decay_unit_diagonal():
    net = generate(GraphSpec("k_regular", 20, seed=0, degree=3))
    prior = PriorModel.exp_decay(net)
    assert np.allclose(np.diag(prior.sigma), 1.0)
    i, j = net.edges()[0]
    assert prior.sigma[i, j] == pytest.approx(10 ** -0.2)


def test_prior_rejects_indefinite():
    with pytest.raises(ValueError):
        PriorModel(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_prior_relabel():
    prior = PriorModel.diagonal([1.0, 2.0, 3.0])
    assert np.diag(prior.relabel([2, 0, 1]).sigma).tolist() == [3.0, 1.0, 2.0]


def test_misbehavior_scalar_and_validation():
    mis = MisbehaviorModel(2.0, 0.5)
    assert mis.V.shape == (1, 1) and mis.m == 1
    with pytest.raises(ValueError):
        MisbehaviorModel(np.eye(2), np.eye(3))
    with pytest.raises(ValueError):
        MisbehaviorModel(-np.eye(1), np.eye(1))
    with pytest.raises(ValueError):
        MisbehaviorModel.isotropic(2, 1.0, fixed_bias=[1.0])


def test_step_fj_two_node():
    net = two_node()
    x = step_fj(net, 0.5, np.array([1.0, 3.0]), np.array([1.0, 3.0]), bias=np.array([2.0]), noise=np.array([0.5]))
    assert x.tolist() == [0.5 * 1.0 + 0.5 * 3.0, 3.0 + 2.0 + 0.5]


def test_step_fj_rejects_lambda():
    with pytest.raises(ValueError):
        step_fj(two_node(), 1.5, np.zeros(2), np.zeros(2))


def test_step_wmsr_hand_example():
    net = from_edges(5, [(0, 1), (0, 2), (0, 3), (0, 4)])
    x = np.array([0.0, -5.0, 1.0, 2.0, 10.0])
    assert step_wmsr(net, 1, x)[0] == pytest.approx(1.0)
    # F = 0 keeps everything: closed-neighborhood average
    assert step_wmsr(net, 0, x)[0] == pytest.approx(x.mean())


def test_step_wmsr_keeps_ties():
    net = from_edges(3, [(0, 1), (0, 2)])
    x = np.array([1.0, 1.0, 1.0])
    assert step_wmsr(net, 1, x)[0] == 1.0


def test_step_wmsr_matches_reference():
    rng = np.random.default_rng(3)
    net = generate(GraphSpec("erdos_renyi", 15, seed=2, p=0.4))
    for F in (0, 1, 2, 3):
        x = rng.standard_normal((4, 15))
        batch = step_wmsr(net, F, x)
        for b in range(4):
            assert np.allclose(batch[b], wmsr_reference(net, F, x[b]))


def test_step_saba_votes_median_of_history():
    net = from_edges(3, [(0, 1), (1, 2), (0, 2)])
    x1, buf = step_saba(net, None, np.array([0.0, 3.0, 6.0]))
    assert x1[0] == pytest.approx(4.5)
    x2, buf = step_saba(net, buf, np.array([0.0, 100.0, 6.0]))
    assert buf.shape == (3, 2)
    # medians of histories: node1 -> 51.5, node2 -> 6
    assert x2[0] == pytest.approx(0.5 * 51.5 + 0.5 * 6.0)


def test_misbehaving_rows_follow_attack():
    net = mark_misbehaving(generate(GraphSpec("k_regular", 8, seed=0, degree=3)), [0, 5])
    theta = np.arange(8.0)
    for new in (step_fj(net, 0.3, theta, theta, np.array([1.0, 2.0]), np.array([0.1, 0.2])),
                step_wmsr(net, 1, theta, theta, np.array([1.0, 2.0]), np.array([0.1, 0.2]))):
        assert np.allclose(new[6:], theta[6:] + [1.1, 2.2])


def test_simulate_converges_to_resolvent_fixed_point():
    net = mark_misbehaving(generate(GraphSpec("erdos_renyi", 12, seed=1, p=0.4)), [3])
    prior = PriorModel.identity(12)
    mis = MisbehaviorModel.isotropic(1, 4.0, 0.0)
    lam = 0.3
    traj = simulate(net, "fj", prior, mis, horizon_for(net, lam, 1e-13), np.random.default_rng(0), lam=lam)
    u = traj.theta.copy()
    u[11:] += traj.bias
    assert np.allclose(traj.states[-1], resolvent_l(build_actual_w(net), lam) @ u, atol=1e-10)


def test_trajectory_cost_and_csv():
    net = two_node()
    traj = simulate(net, "fj", PriorModel.identity(2), MisbehaviorModel.isotropic(1, 1.0, 0.0), 3,
                    np.random.default_rng(0), lam=0.5)
    assert traj.states.shape == (4, 2)
    assert np.allclose(traj.cost(), (traj.states[:, 0] - traj.theta[0]) ** 2)
    lines = traj.to_csv().splitlines()
    assert lines[0] == "k,node_id,role,state"
    assert len(lines) == 1 + 4 * 2
    assert lines[2].split(",")[1:3] == ["2", "misbehaving"]


def test_cost_histories_chunk_invariant():
    net = mark_misbehaving(generate(GraphSpec("k_regular", 10, seed=0, degree=3)), [2])
    prior, mis = PriorModel.identity(10), MisbehaviorModel.isotropic(1, 2.0, 1.0)
    full = cost_histories(net, "fj", prior, mis, 5, 6, seed=9, lam=0.4)
    tail = cost_histories(net, "fj", prior, mis, 5, 3, seed=9, lam=0.4, trial_offset=3)
    assert np.array_equal(full[3:], tail)
    assert np.array_equal(full, cost_histories(net, "fj", prior, mis, 5, 6, seed=9, lam=0.4))


def test_protocols_share_worlds():
    net = mark_misbehaving(generate(GraphSpec("k_regular", 10, seed=0, degree=3)), [2])
    prior, mis = PriorModel.identity(10), MisbehaviorModel.isotropic(1, 2.0, 1.0)
    a = cost_histories(net, "consensus", prior, mis, 4, 5, seed=1)
    b = cost_histories(net, "wmsr", prior, mis, 4, 5, seed=1, F=1)
    assert np.array_equal(a[:, 0], b[:, 0])


def test_consensus_equals_fj_at_zero():
    net = mark_misbehaving(generate(GraphSpec("k_regular", 10, seed=0, degree=3)), [2])
    prior, mis = PriorModel.identity(10), MisbehaviorModel.isotropic(1, 2.0, 1.0)
    a = cost_histories(net, "consensus", prior, mis, 6, 4, seed=1)
    assert np.array_equal(a, cost_histories(net, "fj", prior, mis, 6, 4, seed=1, lam=0.0))


def test_unknown_protocol():
    with pytest.raises(ValueError):
        cost_histories(two_node(), "gossip", PriorModel.identity(2), MisbehaviorModel.isotropic(1), 2, 2, 0)
    with pytest.raises(ValueError):
        cost_histories(two_node(), "fj", PriorModel.identity(2), MisbehaviorModel.isotropic(1), 2, 2, 0)


def test_noise_covariance_matches_lyapunov():
    # observations are nearly zero, so x_R(T) is driven by the deception noise alone
    net = mark_misbehaving(generate(GraphSpec("k_regular", 8, seed=3, degree=3)), [1, 6])
    prior = PriorModel.identity(8, 1e-12)
    Q = np.array([[1.0, 0.3], [0.3, 0.5]])
    mis = MisbehaviorModel(np.zeros((2, 2)), Q)
    lam = 0.4
    P = steady_state_p(net, lam, Q)
    est = mc_cost(net, "fj", prior, mis, horizon_for(net, lam, 1e-12), 10_000, seed=5, lam=lam)
    assert abs(est.z_score(np.trace(P))) < 3


def test_mc_two_node_matches_hand_value():
    d, q = 2.0, 1.0
    est = mc_cost(two_node(), "fj", PriorModel.identity(2), MisbehaviorModel.isotropic(1, d, q), 1, 10_000,
                  seed=11, lam=0.5)
    assert abs(est.z_score(0.5 + 0.25 * d + 0.25 * q)) < 3


def test_z_score_zero_stderr():
    assert MCEstimate(1.0, 0.0, 10, 1).z_score(1.0) == 0.0
    assert MCEstimate(1.0, 0.0, 10, 1).z_score(2.0) == np.inf


def test_horizon_for():
    net = two_node()
    assert horizon_for(net, 0.5) == 1
    ring = mark_misbehaving(generate(GraphSpec("k_regular", 10, seed=0, degree=2)), [0])
    h = horizon_for(ring, 0.1, 1e-6)
    rho = max(abs(np.linalg.eigvals(0.9 * ring.w_reg)))
    assert rho ** h <= 1e-6 < rho ** (h - 1)
