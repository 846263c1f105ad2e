import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fjresilience.numerics import (NumericalError, ScaledSymmetricLyapunov, eig_sym, solve_discrete_lyapunov,
                                   solve_linear, spectral_radius)


def lyapunov_series(A, S, tol=1e-15):
    # oracle: P = sum_k A^k S (A^T)^k, truncated once terms are negligible
    P = np.zeros_like(S)
    X = S.copy()
    for _ in range(100_000):
        P += X
        X = A @ X @ A.T
        if np.abs(X).max() < tol:
            break
    return P


def stable(rng, n, rho):
    A = rng.standard_normal((n, n))
    return rho * A / spectral_radius(A)


def test_solve_linear_matches_numpy():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((6, 6)) + 6 * np.eye(6)
    B = rng.standard_normal((6, 3))
    assert np.allclose(solve_linear(A, B), np.linalg.solve(A, B))


def test_solve_linear_rejects_singular():
    with pytest.raises(NumericalError):
        solve_linear(np.array([[1.0, 2.0], [2.0, 4.0]]), np.ones(2))


def test_solve_linear_rejects_nonfinite():
    with pytest.raises(NumericalError):
        solve_linear(np.array([[np.nan, 0.0], [0.0, 1.0]]), np.ones(2))


def test_spectral_radius_rotation():
    c, s = np.cos(0.3), np.sin(0.3)
    assert spectral_radius(0.5 * np.array([[c, -s], [s, c]])) == pytest.approx(0.5)


def test_eig_sym_reconstructs_and_sorts():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((5, 5))
    A = A + A.T
    mu, U = eig_sym(A)
    assert np.all(np.diff(mu) >= 0)
    assert np.allclose(U @ np.diag(mu) @ U.T, A)
    assert np.allclose(U.T @ U, np.eye(5))


def test_eig_sym_rejects_asymmetric():
    with pytest.raises(ValueError):
        eig_sym(np.array([[0.0, 1.0], [0.0, 0.0]]))


@pytest.mark.parametrize("n", [1, 4, 20, 35])
def test_lyapunov_matches_series(n):
    # n <= 20 exercises the Kronecker path, 35 the Bartels-Stewart path
    rng = np.random.default_rng(n)
    A = stable(rng, n, 0.8)
    F = rng.standard_normal((n, n))
    S = F @ F.T
    P = solve_discrete_lyapunov(A, S)
    assert np.allclose(P, lyapunov_series(A, S), atol=1e-9)
    assert np.allclose(P, P.T)


def test_lyapunov_rejects_unstable():
    with pytest.raises(NumericalError):
        solve_discrete_lyapunov(np.eye(3), np.eye(3))


def test_lyapunov_scalar():
    # p = a^2 p + s
    assert solve_discrete_lyapunov(np.array([[0.5]]), np.array([[3.0]]))[0, 0] == pytest.approx(4.0)


def test_scaled_symmetric_lyapunov_matches_series():
    rng = np.random.default_rng(7)
    W = rng.standard_normal((8, 8))
    W = 0.9 * (W + W.T) / spectral_radius(W + W.T)
    S = np.diag(rng.uniform(0, 1, 8))
    solver = ScaledSymmetricLyapunov(W)
    for c in (0.0, 0.4, 0.99):
        assert np.allclose(solver.solve(c, S), lyapunov_series(c * W, S), atol=1e-9)


def test_scaled_symmetric_lyapunov_rejects_unstable():
    with pytest.raises(NumericalError):
        ScaledSymmetricLyapunov(np.eye(2)).solve(1.0, np.eye(2))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 25), rho=st.floats(0.0, 0.95), seed=st.integers(0, 10_000))
def test_lyapunov_residual_and_psd(n, rho, seed):
    rng = np.random.default_rng(seed)
    A = stable(rng, n, rho) if rho > 0 else np.zeros((n, n))
    F = rng.standard_normal((n, 2))
    S = F @ F.T
    P = solve_discrete_lyapunov(A, S)
    assert np.allclose(P, A @ P @ A.T + S, atol=1e-8 * max(1.0, np.abs(P).max()))
    assert np.linalg.eigvalsh(P).min() > -1e-8 * max(1.0, np.abs(P).max())
