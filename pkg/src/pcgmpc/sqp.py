"""Forward pass: SQP with a Schur/PCG QP solve and a merit-function line search."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from pcgmpc.errors import ContractError, DivergenceError, EvaluationError
from pcgmpc.pcg import PcgConfig, pcg_solve
from pcgmpc.problem import (
    EPS_PD,
    OcpDefinition,
    QpData,
    Trajectory,
    kkt_residual_from_qp,
    linearize,
    theta_values,
)
from pcgmpc.schur import SchurSystem, assemble_gamma, assemble_schur, recover_primal

log = logging.getLogger(__name__)

STEP_CANDIDATES = (1.0, 0.7, 0.3, 0.1, 0.01)


@dataclass(frozen=True)
class SqpConfig:
    max_sqp_iters: int = 20
    step_candidates: tuple = STEP_CANDIDATES
    eta_armijo: float = 0.4
    rho_penalty: float = 0.5
    pcg: PcgConfig = PcgConfig()
    convergence_tol: float = 1e-8
    mu_floor_denominator: float = 1e-12
    mu_init: float = 1.0
    eps_pd: float = EPS_PD
    line_search: bool = True
    exact_penalty: bool = False

    def __post_init__(self):
        c = tuple(float(a) for a in self.step_candidates)
        if not c or any(a <= 0 or a > 1 for a in c) or any(b >= a for a, b in zip(c, c[1:])):
            raise ValueError("step candidates must be strictly decreasing in (0, 1]")
        if not 0 < self.eta_armijo < 1:
            raise ValueError("eta_armijo must lie in (0, 1)")
        if self.max_sqp_iters < 1:
            raise ValueError("max_sqp_iters must be at least 1")
        object.__setattr__(self, "step_candidates", c)


@dataclass(frozen=True)
class SolveResult:
    """Primal-dual solution plus the matrices linearized at the returned ``z``."""

    z: Trajectory
    lam: np.ndarray
    qp: QpData
    schur: SchurSystem
    sqp_iters: np.ndarray
    kkt_inf_norm: np.ndarray
    converged: np.ndarray
    pcg_iters: np.ndarray  # PCG iterations summed over SQP iterations
    history: list = field(default_factory=list, repr=False, compare=False)

    @property
    def batch_shape(self):
        return self.lam.shape[:-2]

    def take(self, index) -> "SolveResult":
        history = [{k: (v[index] if np.ndim(v) else v) for k, v in h.items()} for h in self.history]
        return SolveResult(
            self.z.take(index), self.lam[index], self.qp.take(index), self.schur.take(index),
            self.sqp_iters[index], self.kkt_inf_norm[index], self.converged[index], self.pcg_iters[index], history,
        )


@dataclass(frozen=True)
class LineSearchResult:
    z: Trajectory
    alpha: np.ndarray
    mu: np.ndarray
    decrease: np.ndarray  # [K, ...] values of the decrease test per candidate
    merit_old: np.ndarray
    merit_new: np.ndarray
    descent: np.ndarray


def constraint_violation(ocp: OcpDefinition, z: Trajectory, theta) -> np.ndarray:
    g = ocp.constraint_residual(z, theta)
    return np.abs(g).sum(axis=(-2, -1))


def merit(ocp: OcpDefinition, z: Trajectory, mu, theta) -> np.ndarray:
    """Total cost plus ``mu`` times the 1-norm of all equality residuals (``x_0 - x_s`` included)."""
    if np.any(np.asarray(mu) < 0):
        raise ContractError("merit penalty must be non-negative")
    value = ocp.cost(z, theta) + mu * constraint_violation(ocp, z, theta)
    if not np.all(np.isfinite(value)):
        raise EvaluationError("non-finite merit value")
    return value


def _cost_gradient(ocp, z, theta):
    th = theta_values(theta)
    _, gx, _ = ocp.state_cost.derivatives(z.x, th)
    _, gu, _ = ocp.control_cost.derivatives(z.u, th)
    return Trajectory(gx, gu)


def _inner(a: Trajectory, b: Trajectory):
    return (a.x * b.x).sum(axis=(-2, -1)) + (a.u * b.u).sum(axis=(-2, -1))


def line_search(ocp, z_old: Trajectory, z_qp: Trajectory, theta, cfg: SqpConfig = SqpConfig(), mu_prev=None, cost_grad=None, lam_qp=None, hess=None) -> LineSearchResult:
    """Pick the largest candidate step with a negative decrease test, else the smallest.

    ``mu`` comes from the penalty rule ``(g'dz + sigma/2 dz'H dz) / ((1 - rho) |c|_1)``
    with ``sigma = 1`` when ``dz'H dz > 0`` and ``H`` the cost Hessian
    (``hess = (Q, R)`` blocks if given, else evaluated at ``z_old``).  The
    curvature term makes the QP step a descent direction for the merit even
    when ``g'dz <= 0``, e.g. a convex problem started from ``z = 0``.  The
    previous ``mu_prev`` is kept when the violation is too small to divide by.
    When the QP multipliers ``lam_qp`` are supplied, ``mu`` is also raised to
    ``max|lam_qp|`` so the l1 merit is exact; ``sqp_solve`` does this only
    with ``exact_penalty``, since the raised penalty can reject every
    candidate near the optimum on nonlinear dynamics.
    All candidates are evaluated at once (stacked on a leading axis); the
    selection then scans them in decreasing order.
    """
    mu_prev = cfg.mu_init if mu_prev is None else mu_prev
    dz = z_qp - z_old
    g = _cost_gradient(ocp, z_old, theta) if cost_grad is None else cost_grad
    gdz = _inner(g, dz)
    if hess is None:
        th = theta_values(theta)
        hess = (ocp.state_cost.derivatives(z_old.x, th)[2], ocp.control_cost.derivatives(z_old.u, th)[2])
    curv = _inner(dz, Trajectory((hess[0] @ dz.x[..., None])[..., 0], (hess[1] @ dz.u[..., None])[..., 0]))
    viol = constraint_violation(ocp, z_old, theta)
    denom = (1.0 - cfg.rho_penalty) * viol
    big = denom >= cfg.mu_floor_denominator
    mu = np.where(big, (gdz + 0.5 * np.maximum(curv, 0.0)) / np.where(big, denom, 1.0), mu_prev)
    mu = np.maximum(mu, 0.0)
    if lam_qp is not None:
        mu = np.maximum(mu, np.abs(lam_qp).max(axis=(-2, -1)))
    descent = gdz - mu * viol
    phi0 = merit(ocp, z_old, mu, theta)

    alphas = np.asarray(cfg.step_candidates)
    shape = (len(alphas),) + (1,) * len(np.shape(gdz))
    a = alphas.reshape(shape)
    cand = Trajectory(z_old.x + a[..., None, None] * dz.x, z_old.u + a[..., None, None] * dz.u)
    phis = merit(ocp, cand, mu, theta)
    decrease = phis - phi0 - cfg.eta_armijo * a * descent

    ok = decrease < 0
    first = np.argmax(ok, axis=0)
    idx = np.where(ok.any(axis=0), first, len(alphas) - 1)
    alpha = alphas[idx]
    z_new = Trajectory(z_old.x + alpha[..., None, None] * dz.x, z_old.u + alpha[..., None, None] * dz.u)
    merit_new = np.take_along_axis(phis, np.asarray(idx)[None], axis=0)[0]
    return LineSearchResult(z_new, alpha, mu, decrease, phi0, merit_new, descent)


def _bcast_traj(z: Trajectory, batch):
    return Trajectory(np.broadcast_to(z.x, batch + z.x.shape[-2:]).copy(), np.broadcast_to(z.u, batch + z.u.shape[-2:]).copy())


def sqp_solve(ocp: OcpDefinition, theta, z0: Trajectory | None = None, lam0=None, cfg: SqpConfig = SqpConfig()) -> SolveResult:
    """Solve the OCP for every instance in the leading batch axes of ``theta``.

    Each iteration linearizes at ``z``, assembles the Schur system, runs PCG
    warm-started from the previous multipliers, recovers the QP primal and
    line-searches toward it.  Instances stop individually once
    ``||z_new - z||_inf <= convergence_tol``; their iterates are then frozen.
    The returned QP and Schur data are re-linearized at the returned ``z``.
    """
    th = theta_values(theta)
    batch = th.shape[:-1]
    z = _bcast_traj(ocp.zeros() if z0 is None else z0, batch)
    ocp.check(z)
    lam = np.zeros(batch + (ocp.T + 1, ocp.n_x)) if lam0 is None else np.array(np.broadcast_to(lam0, batch + (ocp.T + 1, ocp.n_x)), dtype=float)
    if not (z.all_finite() and np.all(np.isfinite(lam))):
        raise ContractError("initial guesses must be finite")

    active = np.ones(batch, bool)
    converged = np.zeros(batch, bool)
    iters = np.zeros(batch, int)
    pcg_total = np.zeros(batch, int)
    mu = np.full(batch, cfg.mu_init)
    history = []

    for k in range(cfg.max_sqp_iters):
        qp = linearize(ocp, z, th, cfg.eps_pd)
        kkt = np.abs(kkt_residual_from_qp(qp, z, lam)).max(axis=-1)
        schur = assemble_schur(qp)
        gamma = assemble_gamma(schur, qp.b, qp.d)
        out = pcg_solve(schur, gamma, lam, cfg.pcg)
        if not np.all(out.converged[active]):
            log.warning("PCG hit its iteration cap before reaching epsilon=%g", cfg.pcg.epsilon)
        z_qp = recover_primal(schur, out.lam, qp.b)
        if cfg.line_search:
            cost_grad = Trajectory(qp.q + (qp.Q @ z.x[..., None])[..., 0], qp.r + (qp.R @ z.u[..., None])[..., 0])
            ls = line_search(ocp, z, z_qp, th, cfg, mu, cost_grad=cost_grad, lam_qp=out.lam if cfg.exact_penalty else None, hess=(qp.Q, qp.R))
            z_new, alpha = ls.z, ls.alpha
            mu = np.where(active, ls.mu, mu)
        else:
            z_new, alpha = z_qp, np.ones(batch)
        if not z_new.all_finite():
            raise DivergenceError(f"non-finite iterate at SQP iteration {k + 1}", last_iterate=z)
        step = (z_new - z).inf_norm()
        mask = active[..., None, None]
        z = Trajectory(np.where(mask, z_new.x, z.x), np.where(mask, z_new.u, z.u))
        lam = np.where(mask, out.lam, lam)
        iters = iters + active
        pcg_total = pcg_total + np.where(active, out.iters, 0)
        entry = {"kkt_inf_norm": kkt, "alpha": alpha, "step_norm": step, "pcg_iters": out.iters, "active": active.copy()}
        if cfg.line_search:
            entry.update(mu=ls.mu, merit_old=ls.merit_old, merit_new=ls.merit_new, accepted=(ls.decrease < 0).any(axis=0))
        history.append(entry)
        done = step <= cfg.convergence_tol
        converged = converged | (active & done)
        active = active & ~done
        if not np.any(active):
            break

    qp = linearize(ocp, z, th, cfg.eps_pd)
    schur = assemble_schur(qp)
    kkt = np.abs(kkt_residual_from_qp(qp, z, lam)).max(axis=-1)
    history.append({"kkt_inf_norm": kkt})
    return SolveResult(z, lam, qp, schur, iters, kkt, converged, pcg_total, history)


def policy_first_control(result: SolveResult) -> np.ndarray:
    """First control of the returned trajectory (the receding-horizon action)."""
    return result.z.u[..., 0, :]
