"""Schur complement of the OCP KKT system and its stair preconditioner.

Eliminating the primal variables leaves a multiplier system with one block per
constraint row: the initial condition followed by the ``T`` dynamics rows.
Its negation ``M = H G^{-1} H'`` is symmetric positive definite and
block-tridiagonal, so conjugate gradient applies to ``M lam = -gamma``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pcgmpc.errors import ContractError, NumericalError
from pcgmpc.problem import QpData, Trajectory


@dataclass(frozen=True)
class BlockTridiag:
    """Block-tridiagonal matrix over ``N`` blocks of size ``n``.

    ``sub[t]`` is block ``(t+1, t)``.  When ``sup`` is ``None`` the matrix is
    symmetric and block ``(t, t+1)`` is ``sub[t]'``; otherwise ``sup[t]``.
    """

    diag: np.ndarray  # [..., N, n, n]
    sub: np.ndarray  # [..., N-1, n, n]
    sup: np.ndarray | None = None

    @property
    def n_blocks(self):
        return self.diag.shape[-3]

    @property
    def block_size(self):
        return self.diag.shape[-1]

    def upper(self):
        return np.swapaxes(self.sub, -1, -2) if self.sup is None else self.sup

    def to_dense(self) -> np.ndarray:
        N, n = self.n_blocks, self.block_size
        batch = self.diag.shape[:-3]
        out = np.zeros(batch + (N * n, N * n))
        up = self.upper()
        for t in range(N):
            out[..., t * n:(t + 1) * n, t * n:(t + 1) * n] = self.diag[..., t, :, :]
            if t + 1 < N:
                out[..., (t + 1) * n:(t + 2) * n, t * n:(t + 1) * n] = self.sub[..., t, :, :]
                out[..., t * n:(t + 1) * n, (t + 1) * n:(t + 2) * n] = up[..., t, :, :]
        return out

    def take(self, index) -> "BlockTridiag":
        return BlockTridiag(self.diag[index], self.sub[index], None if self.sup is None else self.sup[index])

    @property
    def band(self) -> np.ndarray:
        """Block rows ``[M_{t,t-1} | M_{t,t} | M_{t,t+1}]`` as ``[..., N, n, 3n]`` (zero-padded at the ends)."""
        cached = self.__dict__.get("_band")
        if cached is None:
            z = np.zeros(self.diag.shape[:-3] + (1,) + self.diag.shape[-2:])
            left = np.concatenate([z, self.sub], axis=-3)
            right = np.concatenate([self.upper(), z], axis=-3)
            cached = np.ascontiguousarray(np.concatenate([left, self.diag, right], axis=-1))
            object.__setattr__(self, "_band", cached)
        return cached


def btd_matvec(M: BlockTridiag, v) -> np.ndarray:
    """Product with a blocked vector ``v[..., N, n]``; block rows are independent.

    Each block row multiplies its band ``[..., n, 3n]`` with the stacked
    neighbours ``(v_{t-1}, v_t, v_{t+1})``.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[-2:] != (M.n_blocks, M.block_size):
        raise ContractError(f"vector of shape {v.shape} does not match {M.n_blocks} blocks of size {M.block_size}")
    z = np.zeros(v.shape[:-2] + (1, v.shape[-1]))
    vp = np.concatenate([z, v, z], axis=-2)
    w = np.concatenate([vp[..., :-2, :], vp[..., 1:-1, :], vp[..., 2:, :]], axis=-1)
    return np.einsum("...ij,...j->...i", M.band, w)


def precond_apply(P: BlockTridiag, r) -> np.ndarray:
    """Apply the stair preconditioner; same kernel as :func:`btd_matvec`."""
    return btd_matvec(P, r)


def _chol(M, what):
    bad = ~np.isfinite(M).all(axis=(-2, -1))
    if bad.any():
        t = int(np.argwhere(bad)[0][-1])
        raise NumericalError(f"non-finite entries in {what}", stage=t)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        # locate the failing stage for the error message
        stages = M.reshape((-1,) + M.shape[-3:]) if M.ndim > 3 else M[None]
        for t in range(stages.shape[1]):
            for k in range(stages.shape[0]):
                try:
                    np.linalg.cholesky(stages[k, t])
                except np.linalg.LinAlgError:
                    raise NumericalError(f"Cholesky factorization of {what} failed", stage=t) from None
        raise NumericalError(f"Cholesky factorization of {what} failed") from None


def chol_solve(L, b):
    """Solve ``(L L') x = b`` for stacked factors; ``b`` is ``[..., n]`` or ``[..., n, m]``."""
    vec = b.ndim == L.ndim - 1
    rhs = b[..., None] if vec else b
    y = np.linalg.solve(L, rhs)
    x = np.linalg.solve(np.swapaxes(L, -1, -2), y)
    return x[..., 0] if vec else x


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


@dataclass(frozen=True)
class SchurSystem:
    """Stored SPD system ``M = -S`` with its preconditioner and cached stage inverses."""

    S: BlockTridiag
    precond: BlockTridiag
    Q_inv: np.ndarray  # [..., T+1, n_x, n_x]
    R_inv: np.ndarray  # [..., T, n_u, n_u]
    qp: QpData

    def Qinv(self, v):
        return np.einsum("...ij,...j->...i", self.Q_inv, v)

    def Rinv(self, v):
        return np.einsum("...ij,...j->...i", self.R_inv, v)

    def take(self, index) -> "SchurSystem":
        return SchurSystem(self.S.take(index), self.precond.take(index), self.Q_inv[index], self.R_inv[index], self.qp.take(index))


def assemble_schur(qp: QpData) -> SchurSystem:
    """Blocks of ``-S`` and of the stair preconditioner, all stages independent.

    Diagonal: ``Q_0^{-1}`` then ``chi_t = A_t Q_t^{-1} A_t' + B_t R_t^{-1} B_t'
    + A+_t Q_{t+1}^{-1} A+_t'``.  Subdiagonal: ``phi_t = A_t Q_t^{-1} A+_{t-1}'``
    with ``A+_{-1} = I``.  The preconditioner keeps the inverted diagonal
    blocks ``D_t^{-1}`` and off-diagonal blocks ``-D_{t+1}^{-1} phi_t D_t^{-1}``.
    """
    n_x = qp.n_x
    LQ = _chol(qp.Q, "Q")
    LR = _chol(qp.R, "R")
    At = np.swapaxes(qp.A, -1, -2)
    Bt = np.swapaxes(qp.B, -1, -2)
    Apt = np.swapaxes(qp.A_plus, -1, -2)

    QinvAt = chol_solve(LQ[..., :-1, :, :], At)  # Q_t^{-1} A_t'
    RinvBt = chol_solve(LR, Bt)  # R_t^{-1} B_t'
    QinvApt = chol_solve(LQ[..., 1:, :, :], Apt)  # Q_{t+1}^{-1} A+_t'
    chi = _sym(qp.A @ QinvAt + qp.B @ RinvBt + qp.A_plus @ QinvApt)

    eye = np.broadcast_to(np.eye(n_x), qp.Q.shape[:-3] + (n_x, n_x))
    Q0inv = _sym(chol_solve(LQ[..., 0, :, :], eye))

    # A+_{t-1}' for t = 0..T-1, with A+_{-1} = I
    prev_Apt = np.concatenate([eye[..., None, :, :], Apt[..., :-1, :, :]], axis=-3)
    phi = qp.A @ chol_solve(LQ[..., :-1, :, :], prev_Apt)

    diag = np.concatenate([Q0inv[..., None, :, :], chi], axis=-3)
    S = BlockTridiag(diag, phi)

    Lchi = _chol(chi, "chi")
    chi_inv = _sym(chol_solve(Lchi, np.broadcast_to(np.eye(n_x), chi.shape)))
    Q0 = _sym(qp.Q[..., 0, :, :])
    Dinv = np.concatenate([Q0[..., None, :, :], chi_inv], axis=-3)
    low = -(Dinv[..., 1:, :, :] @ phi @ Dinv[..., :-1, :, :])
    precond = BlockTridiag(Dinv, low, np.swapaxes(low, -1, -2))
    Q_inv = _sym(chol_solve(LQ, np.broadcast_to(np.eye(n_x), qp.Q.shape)))
    R_inv = _sym(chol_solve(LR, np.broadcast_to(np.eye(qp.n_u), qp.R.shape)))
    return SchurSystem(S, precond, Q_inv, R_inv, qp)


def assemble_gamma(system: SchurSystem, b: Trajectory, d) -> np.ndarray:
    """Stored right-hand side ``-gamma`` with ``gamma = d + H G^{-1} b``.

    ``gamma_0 = d_0 + Q_0^{-1} b_x0`` and ``gamma_{t+1} = d_{t+1} + A_t Q_t^{-1} b_xt
    + B_t R_t^{-1} b_ut + A+_t Q_{t+1}^{-1} b_x(t+1)``.
    """
    qp = system.qp
    d = np.asarray(d, dtype=float)
    if b.x.shape[-2:] != qp.q.shape[-2:] or b.u.shape[-2:] != qp.r.shape[-2:] or d.shape[-2:] != (qp.T + 1, qp.n_x):
        raise ContractError("gamma inputs do not match the QP dimensions")
    Qb = system.Qinv(np.broadcast_to(b.x, np.broadcast_shapes(b.x.shape, qp.q.shape)))
    Rb = system.Rinv(np.broadcast_to(b.u, np.broadcast_shapes(b.u.shape, qp.r.shape)))
    zeta = (qp.A @ Qb[..., :-1, :, None] + qp.B @ Rb[..., None] + qp.A_plus @ Qb[..., 1:, :, None])[..., 0]
    gamma = np.concatenate([Qb[..., :1, :], zeta], axis=-2) + d
    return -gamma


def recover_primal(system: SchurSystem, lam, rhs_b: Trajectory) -> Trajectory:
    """``z = -G^{-1}(b + H' lam)`` evaluated stage by stage.

    ``x_t = -Q_t^{-1}(b_xt + A+_{t-1}' lam_t + A_t' lam_{t+1})`` with
    ``A+_{-1} = I`` and ``u_t = -R_t^{-1}(b_ut + B_t' lam_{t+1})``.
    """
    qp = system.qp
    lam = np.asarray(lam, dtype=float)
    if lam.shape[-2:] != (qp.T + 1, qp.n_x):
        raise ContractError(f"dual vector must be [..., {qp.T + 1}, {qp.n_x}], got {lam.shape}")
    lam_dyn = lam[..., 1:, :, None]
    hx = np.array(np.broadcast_to(rhs_b.x, np.broadcast_shapes(rhs_b.x.shape, lam.shape)))
    hx[..., 0, :] += lam[..., 0, :]
    hx[..., 1:, :] += (np.swapaxes(qp.A_plus, -1, -2) @ lam_dyn)[..., 0]
    hx[..., :-1, :] += (np.swapaxes(qp.A, -1, -2) @ lam_dyn)[..., 0]
    hu = rhs_b.u + (np.swapaxes(qp.B, -1, -2) @ lam_dyn)[..., 0]
    return Trajectory(-system.Qinv(hx), -system.Rinv(hu))
