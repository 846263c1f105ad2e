"""Dense linear-algebra kernel.

Thin, guarded wrappers around numpy/scipy for the handful of matrix
problems the analytic formulas rely on: linear solves, symmetric
eigenproblems, spectral radii and the discrete Lyapunov equation.
"""

import warnings

import numpy as np
import scipy.linalg
import scipy.linalg.lapack

COND_LIMIT = 1e12
# Kronecker vectorization is exact but O(n^6); above this size use Bartels-Stewart.
KRONECKER_MAX_N = 20


class NumericalError(ArithmeticError):
    """Raised when a matrix problem is singular, unstable or ill-conditioned."""


def _as_square(A, name="A"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NumericalError(f"{name} has non-finite entries")
    return A


def solve_linear(A, B, cond_limit=COND_LIMIT):
    """Solve ``A X = B`` for a square, well-conditioned ``A``.

    Raises
    ------
    NumericalError
        If ``A`` is singular or its 1-norm condition number exceeds
        ``cond_limit``.
    """
    A = _as_square(A)
    B = np.asarray(B, dtype=float)
    if A.size == 0:
        return np.zeros(B.shape)
    with warnings.catch_warnings():
        # singularity is reported below as NumericalError
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=False)
    if np.any(np.diag(lu) == 0.0):
        raise NumericalError("matrix is singular")
    # LAPACK 1-norm condition estimate from the LU factors
    rcond, _ = scipy.linalg.lapack.dgecon(lu, float(np.abs(A).sum(axis=0).max()), norm="1")
    cond = np.inf if rcond == 0.0 else 1.0 / rcond
    if not np.isfinite(cond) or cond > cond_limit:
        raise NumericalError(f"matrix is ill-conditioned (cond_1 = {cond:.3e})")
    X = scipy.linalg.lu_solve((lu, piv), B, check_finite=False)
    if not np.all(np.isfinite(X)):
        raise NumericalError("solution has non-finite entries")
    return X


def spectral_radius(A):
    A = _as_square(A)
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def eig_sym(A, tol=1e-10):
    """Eigendecomposition of a symmetric matrix.

    Returns ascending eigenvalues and an orthonormal matrix whose columns
    are the matching eigenvectors.
    """
    A = _as_square(A)
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if not np.allclose(A, A.T, rtol=0.0, atol=tol * scale):
        raise ValueError("eig_sym requires a symmetric matrix")
    vals, vecs = np.linalg.eigh(0.5 * (A + A.T))
    return vals, vecs


def _lyapunov_kronecker(A, S):
    n = A.shape[0]
    K = np.eye(n * n) - np.kron(A, A)
    # row-major vec: vec(A P A^T) = (A kron A) vec(P)
    p = solve_linear(K, S.reshape(-1))
    return p.reshape(n, n)


def solve_discrete_lyapunov(A, S):
    """Solve ``P = A P A^T + S`` for a Schur-stable ``A``.

    Small problems (n <= 20) are solved exactly through the vectorized
    Kronecker system; larger ones through scipy's Bartels-Stewart
    solver.  The result is symmetrized.

    Raises
    ------
    NumericalError
        If the spectral radius of ``A`` is not below one.
    """
    A = _as_square(A)
    S = _as_square(S, "S")
    if A.shape != S.shape:
        raise ValueError("A and S must have the same shape")
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    rho = spectral_radius(A)
    if rho >= 1.0:
        raise NumericalError(f"A is not Schur stable (spectral radius {rho:.6g})")
    if n <= KRONECKER_MAX_N:
        P = _lyapunov_kronecker(A, S)
    else:
        P = scipy.linalg.solve_discrete_lyapunov(A, S)
    P = 0.5 * (P + P.T)
    if not np.all(np.isfinite(P)):
        raise NumericalError("Lyapunov solution has non-finite entries")
    return P


class ScaledSymmetricLyapunov:
    """Solver for ``P = c^2 W P W + S`` with a fixed symmetric ``W`` and varying ``c``.

    ``W`` is diagonalized once; each solve is then two basis changes and
    an entrywise division by ``1 - c^2 mu_i mu_j``.
    """

    def __init__(self, W):
        self.mu, self.U = eig_sym(W)
        self.rho = float(np.max(np.abs(self.mu))) if self.mu.size else 0.0

    def solve(self, c, S):
        S = _as_square(S, "S")
        if S.shape[0] != self.mu.size:
            raise ValueError("S has the wrong shape")
        if S.size == 0:
            return np.zeros((0, 0))
        if abs(c) * self.rho >= 1.0:
            raise NumericalError(f"A is not Schur stable (spectral radius {abs(c) * self.rho:.6g})")
        U = self.U
        Sh = U.T @ S @ U
        P = U @ (Sh / (1.0 - c * c * np.outer(self.mu, self.mu))) @ U.T
        return 0.5 * (P + P.T)
