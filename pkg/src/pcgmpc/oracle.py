"""Slow reference implementations used to check the structured solver.

Nothing here touches the Schur, PCG or SQP code paths: the dense KKT solve,
the Riccati recursion and the finite-difference helpers work directly from
``QpData`` or from plain callables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from pcgmpc.errors import ContractError, EvaluationError, NumericalError
from pcgmpc.problem import QpData, Trajectory


@dataclass(frozen=True)
class DenseKkt:
    matrix: np.ndarray
    G: np.ndarray
    H: np.ndarray
    n_z: int
    n_lambda: int


def _z_offsets(T, n_x, n_u):
    """Column offsets of x_t and u_t in the interleaved primal vector."""
    xo = [t * (n_x + n_u) for t in range(T + 1)]
    uo = [t * (n_x + n_u) + n_x for t in range(T)]
    return xo, uo


def dense_kkt(qp: QpData) -> DenseKkt:
    """Assemble ``[[G, H'], [H, 0]]`` for a single (unbatched) QP."""
    if qp.Q.ndim != 3:
        raise ContractError("dense_kkt handles one instance at a time")
    T, n_x, n_u = qp.T, qp.n_x, qp.n_u
    n_z = (T + 1) * n_x + T * n_u
    n_l = (T + 1) * n_x
    xo, uo = _z_offsets(T, n_x, n_u)
    G = np.zeros((n_z, n_z))
    H = np.zeros((n_l, n_z))
    for t in range(T + 1):
        G[xo[t]:xo[t] + n_x, xo[t]:xo[t] + n_x] = qp.Q[t]
    for t in range(T):
        G[uo[t]:uo[t] + n_u, uo[t]:uo[t] + n_u] = qp.R[t]
    H[0:n_x, 0:n_x] = np.eye(n_x)
    for t in range(T):
        rows = slice((t + 1) * n_x, (t + 2) * n_x)
        H[rows, xo[t]:xo[t] + n_x] = qp.A[t]
        H[rows, uo[t]:uo[t] + n_u] = qp.B[t]
        H[rows, xo[t + 1]:xo[t + 1] + n_x] = qp.A_plus[t]
    K = np.block([[G, H.T], [H, np.zeros((n_l, n_l))]])
    return DenseKkt(K, G, H, n_z, n_l)


def qp_rhs(qp: QpData):
    """Forward right-hand side ``(-b, d)`` as flat vectors."""
    b = Trajectory(qp.q, qp.r).flat()
    d = np.concatenate([qp.x_s[None, :], qp.C], axis=0).ravel()
    return -b, d


def dense_kkt_solve(qp: QpData, rhs_top, rhs_bottom):
    """Direct LU solve of the full KKT system; returns flat ``(z, lam)``."""
    kkt = dense_kkt(qp)
    rhs = np.concatenate([np.asarray(rhs_top, float).ravel(), np.asarray(rhs_bottom, float).ravel()])
    if rhs.shape != (kkt.n_z + kkt.n_lambda,):
        raise ContractError("right-hand side does not match the KKT dimension")
    try:
        sol = scipy.linalg.solve(kkt.matrix, rhs)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
        raise NumericalError(f"singular KKT matrix: {exc}") from exc
    return sol[: kkt.n_z], sol[kkt.n_z:]


def dense_schur(qp: QpData):
    """Dense ``H G^{-1} H'`` (the negated Schur complement) and ``gamma = d + H G^{-1} b``."""
    kkt = dense_kkt(qp)
    Ginv = np.linalg.inv(kkt.G)
    b = Trajectory(qp.q, qp.r).flat()
    d = np.concatenate([qp.x_s[None, :], qp.C], axis=0).ravel()
    return kkt.H @ Ginv @ kkt.H.T, d + kkt.H @ Ginv @ b


def dense_stair_inverse(S_neg: np.ndarray, n_blocks, n):
    """Stair preconditioner ``D^{-1} - D^{-1} O D^{-1}`` from a dense block-tridiagonal SPD matrix.

    ``D`` is the block diagonal of ``S_neg`` and ``O`` its off-diagonal part.
    """
    D = np.zeros_like(S_neg)
    for t in range(n_blocks):
        blk = slice(t * n, (t + 1) * n)
        D[blk, blk] = S_neg[blk, blk]
    O = S_neg - D
    Dinv = np.linalg.inv(D)
    return Dinv - Dinv @ O @ Dinv


def riccati_lqr(qp: QpData) -> Trajectory:
    """Backward Riccati sweep and forward rollout for ``A+_t = I``.

    Dynamics read ``x_{t+1} = C_t - A_t x_t - B_t u_t``; costs are
    ``1/2 x'Qx + q'x`` and ``1/2 u'Ru + r'u``.
    """
    if qp.Q.ndim != 3:
        raise ContractError("riccati_lqr handles one instance at a time")
    if not np.allclose(qp.A_plus, np.eye(qp.n_x)[None], rtol=0, atol=0):
        raise ContractError("Riccati oracle requires A_plus = I at every stage")
    T = qp.T
    F = -qp.A
    G = -qp.B
    c = qp.C
    P = qp.Q[T].copy()
    p = qp.q[T].copy()
    K = np.zeros((T, qp.n_u, qp.n_x))
    k = np.zeros((T, qp.n_u))
    for t in range(T - 1, -1, -1):
        Pc = P @ c[t] + p
        Huu = qp.R[t] + G[t].T @ P @ G[t]
        Hux = G[t].T @ P @ F[t]
        hu = qp.r[t] + G[t].T @ Pc
        cho = scipy.linalg.cho_factor(Huu)
        K[t] = -scipy.linalg.cho_solve(cho, Hux)
        k[t] = -scipy.linalg.cho_solve(cho, hu)
        P_new = qp.Q[t] + F[t].T @ P @ F[t] + Hux.T @ K[t]
        p = qp.q[t] + F[t].T @ Pc + Hux.T @ k[t]
        P = 0.5 * (P_new + P_new.T)
    x = np.zeros((T + 1, qp.n_x))
    u = np.zeros((T, qp.n_u))
    x[0] = qp.x_s
    for t in range(T):
        u[t] = K[t] @ x[t] + k[t]
        x[t + 1] = F[t] @ x[t] + G[t] @ u[t] + c[t]
    return Trajectory(x, u)


def fd_gradient(fn, theta, step=1e-6, indices=None) -> np.ndarray:
    """Central differences of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise ContractError("fd_gradient expects a flat parameter vector")
    grad = np.zeros_like(theta)
    for i in range(theta.size) if indices is None else indices:
        e = np.zeros_like(theta)
        e[i] = step
        fp, fm = fn(theta + e), fn(theta - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite function value while differencing entry {i}")
        grad[i] = (fp - fm) / (2 * step)
    return grad


def fd_jacobian(fn, v, step=1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector function of a flat vector."""
    v = np.asarray(v, dtype=float)
    cols = []
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = step
        cols.append((np.asarray(fn(v + e)) - np.asarray(fn(v - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def fd_theta_vjp(ocp, z: Trajectory, lam, z_t: Trajectory, lam_t, theta, step=1e-6) -> np.ndarray:
    """Finite-difference fallback for ``-dF/dtheta' [z_t; lam_t]``.

    Differentiates the KKT residual map directly, written out here from the
    callbacks so that it shares nothing with the analytic theta products.
    """
    cot = np.concatenate([z_t.flat(), np.asarray(lam_t).ravel()])

    def residual(th):
        _, gx, _ = ocp.state_cost.derivatives(z.x, th)
        _, gu, _ = ocp.control_cost.derivatives(z.u, th)
        f, Ap, A, B = ocp.dynamics.jacobians(z.x[1:], z.x[:-1], z.u, th)
        gx = gx.copy()
        gx[0] += lam[0]
        for t in range(ocp.T):
            gx[t + 1] += Ap[t].T @ lam[t + 1]
            gx[t] += A[t].T @ lam[t + 1]
        gu = gu + np.einsum("tij,ti->tj", B, lam[1:])
        g = np.concatenate([(z.x[0] - ocp.initial_state(th))[None], f], axis=0)
        return np.concatenate([Trajectory(gx, gu).flat(), g.ravel()]) @ cot

    return -fd_gradient(residual, np.asarray(theta, float), step)
