"""Warm-startable preconditioned conjugate gradient on the block-tridiagonal Schur system.

Leading batch axes are solved together.  Each instance keeps its own scalars
and stops independently; once an instance's ``eta`` drops below tolerance its
multiplier is frozen, so batching never changes per-instance arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pcgmpc.errors import ContractError, PcgBreakdown
from pcgmpc.schur import SchurSystem, btd_matvec, precond_apply


@dataclass(frozen=True)
class PcgConfig:
    epsilon: float = 1e-12
    max_iters: int | None = None  # default 2 * (T+1) * n_x

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")

    def cap(self, n_blocks, block_size):
        return 2 * n_blocks * block_size if self.max_iters is None else self.max_iters


@dataclass
class PcgOutcome:
    lam: np.ndarray
    iters: np.ndarray
    final_eta: np.ndarray
    converged: np.ndarray
    eta_history: list = field(default_factory=list, repr=False)


def _dot(a, b):
    # Fixed-order per-instance reduction: flatten the block axes, then sum.
    prod = a * b
    return prod.reshape(prod.shape[:-2] + (-1,)).sum(axis=-1)


def pcg_solve(system: SchurSystem, gamma, lambda0, cfg: PcgConfig = PcgConfig(), record_history=False) -> PcgOutcome:
    """Solve ``M lam = gamma`` where ``M`` is the stored (negated) Schur matrix.

    ``gamma`` and ``lambda0`` are blocked ``[..., T+1, n_x]``.  The loop guard
    ``eta = r' P r > epsilon`` is tested before the first iteration, so an
    exact warm start costs zero iterations.
    """
    S, P = system.S, system.precond
    gamma = np.asarray(gamma, dtype=float)
    shape = np.broadcast_shapes(gamma.shape, np.shape(lambda0), S.diag.shape[:-3] + gamma.shape[-2:])
    if shape[-2:] != (S.n_blocks, S.block_size):
        raise ContractError(f"right-hand side of shape {gamma.shape} does not match the Schur system")
    lam = np.array(np.broadcast_to(lambda0, shape), dtype=float)
    if not np.all(np.isfinite(lam)):
        raise ContractError("initial multiplier guess must be finite")
    cap = cfg.cap(S.n_blocks, S.block_size)

    r = gamma - btd_matvec(S, lam)
    rt = precond_apply(P, r)
    p = rt.copy()
    eta = _dot(r, rt)
    iters = np.zeros(shape[:-2], dtype=int)
    active = eta > cfg.epsilon
    history = [eta.copy()] if record_history else []

    while np.any(active):
        y = btd_matvec(S, p)
        v = _dot(p, y)
        bad = active & ~(v > 0)
        if np.any(bad):
            raise PcgBreakdown(int(iters[bad].flat[0]) + 1, float(np.asarray(v)[bad].flat[0]))
        alpha = np.where(active, eta / np.where(active, v, 1.0), 0.0)
        lam = lam + alpha[..., None, None] * p
        r = r - alpha[..., None, None] * y
        rt = precond_apply(P, r)
        eta_new = _dot(r, rt)
        beta = np.where(active, eta_new / np.where(active, eta, 1.0), 0.0)
        p = np.where(active[..., None, None], rt + beta[..., None, None] * p, p)
        eta = np.where(active, eta_new, eta)
        iters = iters + active
        if record_history:
            history.append(eta.copy())
        active = active & (eta > cfg.epsilon) & (iters < cap)

    return PcgOutcome(lam, iters, eta, eta <= cfg.epsilon, history)
