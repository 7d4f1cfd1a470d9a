"""Backward solver for the matrix-valued second-order adjoint equation.

The matrix dynamics

    dP = -(A* + J*) P dt - P (A + J) dt - K* P K dt - (K* Q + Q K) dt
         + F dt + Q dw,        P(T) = P_T

are vectorized (column-major stacking, so cross terms of Q are reproducible)
and swept backward with the same propagate/regress/driver update as the
vector adjoint.  The unbounded part acts exactly through the tensor flow
M -> S(dt) M S*(dt), i.e. entry (k, l) is scaled by exp((mu_k + mu_l) dt).

Two storage modes:

* coefficient mode (J, K, F deterministic): per-step regression coefficients
  are kept and per-path matrices are re-evaluated on demand, so memory stays
  O(n_steps * n_features * n^2) even for large ensembles;
* dense mode (path-dependent coefficients): full per-path histories.
"""

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .adjoint import RegressionBasis, RidgeSolver, _guard_basis
from .errors import DimensionError, DomainError
from .spectral import OperatorSpec

SYMMETRY_WARN = 1e-6


def mat_to_vec(m):
    """Column-major stack of the trailing two axes."""
    n = m.shape[-1]
    return m.swapaxes(-1, -2).reshape(m.shape[:-2] + (n * n,))


def vec_to_mat(v, n):
    return v.reshape(v.shape[:-1] + (n, n)).swapaxes(-1, -2)


def tensor_semigroup_apply(op, dt, m):
    """Congruence flow S(dt) M S*(dt): entry (k, l) scaled by exp((mu_k+mu_l)dt)."""
    if dt < 0:
        raise DomainError("dt must be nonnegative")
    m = np.asarray(m, dtype=float)
    n = op.n_modes
    if m.shape[-2:] != (n, n):
        raise DimensionError(f"matrix must be {n}x{n}")
    if dt == 0:
        return m.copy()
    return m * np.exp(np.add.outer(op.eigenvalues, op.eigenvalues) * dt)


def max_asymmetry(m):
    return float(np.max(np.abs(m - np.swapaxes(m, -1, -2)))) if m.size else 0.0


def _coeff_at(coeff, j, n):
    """Step slice of a coefficient spec: None, (n,n), (N,n,n) or (P,N,n,n)."""
    if coeff is None:
        return None
    if coeff.ndim == 2:
        return coeff
    if coeff.ndim == 3:
        return coeff[j]
    return coeff[:, j]


def _is_pathwise(coeff):
    return coeff is not None and coeff.ndim == 4


def _driver(J, K, F, P, Q):
    """-J*P - PJ - K*PK - (K*Q + QK) + F, batched over leading axes of P, Q."""
    out = np.zeros_like(P) if F is None else F + np.zeros_like(P)
    if J is not None:
        Jt = np.swapaxes(J, -1, -2)
        out = out - np.matmul(Jt, P) - np.matmul(P, J)
    if K is not None:
        Kt = np.swapaxes(K, -1, -2)
        out = out - np.matmul(Kt, np.matmul(P, K))
        out = out - np.matmul(Kt, Q) - np.matmul(Q, K)
    return out


@dataclass
class SecondOrderAdjoint:
    """Pair (P, Q) of matrix processes, per path.

    ``P_paths(j)``/``Q_paths(j)`` return (n_paths, n, n) slices regardless of
    the storage mode; the terminal slice is stored exactly per path.
    """

    grid: object
    op: OperatorSpec
    basis: Optional[RegressionBasis] = None
    feature_states: Optional[np.ndarray] = None   # (P, N+1, d) regressor states
    beta_P: Optional[np.ndarray] = None           # (N, F, n^2)
    beta_Q: Optional[np.ndarray] = None           # (N, F, n^2)
    P_terminal: Optional[np.ndarray] = None       # (P, n, n)
    dense_P: Optional[np.ndarray] = None          # (P, N+1, n, n)
    dense_Q: Optional[np.ndarray] = None          # (P, N, n, n)
    fingerprint: Optional[tuple] = None
    symmetry_drift: float = 0.0

    @property
    def n_paths(self):
        if self.dense_P is not None:
            return self.dense_P.shape[0]
        return self.P_terminal.shape[0]

    def _features_at(self, j):
        cached = getattr(self, "_feat_cache", None)
        if cached is not None and cached[0] == j:
            return cached[1]
        X = self.basis.features(self.feature_states[:, j])
        self._feat_cache = (j, X)
        return X

    def P_paths(self, j):
        if self.dense_P is not None:
            return self.dense_P[:, j]
        if j == self.grid.n_steps:
            return self.P_terminal
        return vec_to_mat(self._features_at(j) @ self.beta_P[j], self.op.n_modes)

    def Q_paths(self, j):
        if self.dense_Q is not None:
            return self.dense_Q[:, j]
        if j >= self.grid.n_steps:
            raise DomainError("martingale component is defined on steps 0..n_steps-1")
        return vec_to_mat(self._features_at(j) @ self.beta_Q[j], self.op.n_modes)

    def P_mean(self, j):
        return self.P_paths(j).mean(axis=0)


def solve_second_adjoint(op, J, K, F, P_T, ens, basis=None, feature_states=None):
    """Regression sweep for (P, Q).

    J, K, F may be None, constant (n, n), time-indexed (N, n, n), or
    path-indexed (P, N, n, n); P_T may be (n, n) or per path (P, n, n).
    ``feature_states`` supplies the regressor state per step, shape
    (n_paths, N+1, d); defaults to the Brownian path itself.
    """
    basis = basis or RegressionBasis()
    grid = ens.grid
    n, N, P = op.n_modes, grid.n_steps, ens.n_paths
    nn = n * n
    dt = grid.dt
    if feature_states is None:
        feature_states = ens.brownian_paths()[:, :, None]
    if feature_states.shape[:2] != (P, N + 1):
        raise DimensionError("feature_states must cover every path and step")
    _guard_basis(basis, feature_states.shape[2], P)

    J = None if J is None else np.asarray(J, dtype=float)
    K = None if K is None else np.asarray(K, dtype=float)
    F = None if F is None else np.asarray(F, dtype=float)
    P_T = np.asarray(P_T, dtype=float)
    if P_T.ndim == 2:
        P_T = np.broadcast_to(P_T, (P, n, n))
    dense = any(_is_pathwise(c) for c in (J, K, F))

    decay_vec = mat_to_vec(np.exp(np.add.outer(op.eigenvalues, op.eigenvalues) * dt))
    sym_data = max_asymmetry(P_T) <= 1e-12 and all(
        c is None or max_asymmetry(c) <= 1e-12 for c in (F,)
    )
    drift_sym = 0.0

    result = SecondOrderAdjoint(
        grid=grid, op=op, basis=basis,
        feature_states=None if dense else feature_states,
        P_terminal=np.array(P_T, dtype=float, copy=True),
        fingerprint=ens.fingerprint,
    )

    if dense:
        dense_P = np.empty((P, N + 1, n, n))
        dense_Q = np.empty((P, N, n, n))
        dense_P[:, N] = P_T
        p_next = dense_P[:, N]
    else:
        beta_P = np.empty((N, basis.n_features(feature_states.shape[2]), nn))
        beta_Q = np.empty_like(beta_P)
        p_next = P_T.copy()

    p_next_vec = mat_to_vec(p_next)
    for j in range(N - 1, -1, -1):
        solver = RidgeSolver(basis.features(feature_states[:, j]), basis.ridge)
        propagated = p_next_vec * decay_vec
        beta_tilde, fitted_P = solver.solve(propagated)
        # centered martingale target, as in the vector sweep
        beta_q, fitted_Q = solver.solve(
            (propagated - fitted_P) * (ens.increments[:, j : j + 1] / dt)
        )
        p_tilde = vec_to_mat(fitted_P, n)
        q_j = vec_to_mat(fitted_Q, n)
        f_j = _driver(_coeff_at(J, j, n), _coeff_at(K, j, n), _coeff_at(F, j, n), p_tilde, q_j)
        p_j = p_tilde - dt * f_j
        if dense:
            dense_P[:, j] = p_j
            dense_Q[:, j] = q_j
        else:
            # the driver is feature-affine, so the update can be done once in
            # coefficient space instead of per path
            bP = vec_to_mat(beta_tilde, n)
            bQ = vec_to_mat(beta_q, n)
            f_beta = _driver(_coeff_at(J, j, n), _coeff_at(K, j, n), None, bP, bQ)
            new_bP = bP - dt * f_beta
            Fj = _coeff_at(F, j, n)
            if Fj is not None:
                new_bP[0] = new_bP[0] - dt * Fj  # constant feature column is 1
            beta_P[j] = mat_to_vec(new_bP)
            beta_Q[j] = mat_to_vec(bQ)
        if sym_data:
            drift_sym = max(drift_sym, max_asymmetry(p_j.mean(axis=0)))
        p_next_vec = mat_to_vec(p_j)

    if not dense:
        result.beta_P, result.beta_Q = beta_P, beta_Q
    else:
        result.dense_P, result.dense_Q = dense_P, dense_Q
    result.symmetry_drift = drift_sym
    if sym_data and drift_sym > SYMMETRY_WARN:
        warnings.warn(f"symmetry drift {drift_sym:.2e} with symmetric data")
    return result


def _stiff_substeps(op, J, K, dt):
    rate = 2.0 * np.max(np.abs(op.eigenvalues)) + 1.0
    if J is not None:
        rate += 2.0 * np.max(np.linalg.norm(J, 2, axis=(-2, -1)))
    if K is not None:
        rate += np.max(np.linalg.norm(K, 2, axis=(-2, -1))) ** 2
    return max(1, int(np.ceil(rate * dt / 0.02)))


def lyapunov_oracle(op, J, K, F, P_T, grid, substeps=None):
    """Deterministic reduction: with nonrandom data the martingale part
    vanishes and P solves P' = -(A+J)'P - P(A+J) - K'PK + F backward from
    P(T) = P_T.  Classical RK4 with stiffness-based substeps; coefficients
    are frozen per grid step, matching the discrete convention of the Monte
    Carlo sweep.  Returns (n_steps+1, n, n)."""
    n, N = op.n_modes, grid.n_steps
    A = np.diag(op.eigenvalues)
    J = None if J is None else np.asarray(J, dtype=float)
    K = None if K is None else np.asarray(K, dtype=float)
    F = None if F is None else np.asarray(F, dtype=float)
    P_T = np.asarray(P_T, dtype=float)
    if P_T.shape != (n, n):
        raise DimensionError(f"P_T must be {n}x{n}")
    sub = substeps or _stiff_substeps(op, J, K, grid.dt)
    h = grid.dt / sub

    out = np.empty((N + 1, n, n))
    out[N] = P_T
    p = P_T.copy()
    for j in range(N - 1, -1, -1):
        AJ = A if J is None else A + _coeff_at(J, j, n)
        Kj = _coeff_at(K, j, n)
        Fj = _coeff_at(F, j, n)

        def rhs(m):
            d = -(AJ.T @ m) - m @ AJ
            if Kj is not None:
                d = d - Kj.T @ m @ Kj
            if Fj is not None:
                d = d + Fj
            return d

        for _ in range(sub):
            k1 = rhs(p)
            k2 = rhs(p - 0.5 * h * k1)
            k3 = rhs(p - 0.5 * h * k2)
            k4 = rhs(p - h * k3)
            p = p - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[j] = p
    return out
