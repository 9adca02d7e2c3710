"""Backward pass: loss gradients with respect to theta by the implicit function theorem.

The KKT system at the returned solution is reused as is.  A single Schur/PCG
solve with right-hand side ``(dl/dz, 0)`` gives the adjoint ``(z~, lam~)``,
and the parameter gradient is the vector-Jacobian product ``-dF/dtheta' [z~; lam~]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pcgmpc import pcg as _pcg
from pcgmpc.errors import ContractError
from pcgmpc.pcg import PcgConfig
from pcgmpc.problem import OcpDefinition, Trajectory, theta_values
from pcgmpc.schur import assemble_gamma, recover_primal

# Tight tolerance for finite-difference validation: the perturbed solves must be
# accurate well below the step size.
FD_PCG = PcgConfig(epsilon=1e-28)


@dataclass(frozen=True)
class BackwardResult:
    grad_theta: np.ndarray
    lambda_tilde: np.ndarray
    pcg_iters: np.ndarray
    z_tilde: Trajectory


def _as_trajectory(g, ocp: OcpDefinition) -> Trajectory:
    if isinstance(g, Trajectory):
        ocp.check(g)
        return g
    g = np.asarray(g, dtype=float)
    if g.shape[-1] != ocp.n_z:
        raise ContractError(f"loss gradient has {g.shape[-1]} entries, expected {ocp.n_z}")
    return Trajectory.from_flat(g, ocp.n_x, ocp.n_u, ocp.T)


def backward_vjp(result, loss_grad_z, lambda_tilde0=None, ocp: OcpDefinition = None, theta=None, cfg: PcgConfig = PcgConfig()) -> BackwardResult:
    """Gradient of a loss on the returned trajectory with respect to theta.

    ``loss_grad_z`` is ``dl/dz`` as a flat vector (interleaved layout) or a
    ``Trajectory``, with the same batch axes as ``result``.  Only the matrices
    cached in ``result`` are used; the problem callbacks enter through
    ``ocp.theta_vjp`` alone.
    """
    if ocp is None or theta is None:
        raise ContractError("backward_vjp needs the problem definition and theta")
    g = _as_trajectory(loss_grad_z, ocp)
    system = result.schur
    b = Trajectory(-g.x, -g.u)
    d = np.zeros(result.lam.shape)
    gamma = assemble_gamma(system, b, d)
    lam0 = np.zeros(gamma.shape) if lambda_tilde0 is None else lambda_tilde0
    out = _pcg.pcg_solve(system, gamma, lam0, cfg)
    z_t = recover_primal(system, out.lam, b)
    grad = ocp.theta_vjp(result.z, result.lam, z_t, out.lam, theta_values(theta))
    return BackwardResult(grad, out.lam, out.iters, z_t)


def _numeric_loss_grad(loss_fn, z: Trajectory, step):
    flat = z.flat()
    n_x, n_u, T = z.x.shape[-1], z.u.shape[-1], z.T
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = step
        grad[i] = (loss_fn(Trajectory.from_flat(flat + e, n_x, n_u, T)) - loss_fn(Trajectory.from_flat(flat - e, n_x, n_u, T))) / (2 * step)
    return grad


def fd_check(result, loss_fn, theta, step=1e-6, *, ocp: OcpDefinition, sqp_cfg=None, loss_grad=None, indices=None):
    """Max componentwise relative error of ``backward_vjp`` against central differences.

    The finite differences re-solve the problem at ``theta +/- step e_i``
    with full steps, warm-started from ``result``.  ``loss_grad`` maps a trajectory to
    ``dl/dz``; when omitted it is obtained by differencing ``loss_fn``.
    Relative errors use ``max(|fd|, 1e-8)`` as denominator.  Returns
    ``(max_rel_err, analytic, numeric)``.
    """
    from dataclasses import replace

    from pcgmpc.oracle import fd_gradient
    from pcgmpc.sqp import SqpConfig, sqp_solve

    # The perturbed solves start within ``step`` of a solution, where merit
    # differences are at roundoff level and the line search would accept
    # arbitrary short steps.  Full Newton steps converge there.
    base = sqp_cfg or SqpConfig()
    cfg = replace(base, pcg=FD_PCG, line_search=False, convergence_tol=min(base.convergence_tol, 1e-13), max_sqp_iters=max(base.max_sqp_iters, 20))
    th = np.asarray(theta_values(theta), dtype=float)
    if th.ndim != 1:
        raise ContractError("fd_check handles one instance at a time")
    dl = loss_grad(result.z) if loss_grad is not None else _numeric_loss_grad(loss_fn, result.z, step)
    analytic = backward_vjp(result, dl, None, ocp, th, FD_PCG).grad_theta

    def objective(v):
        return float(loss_fn(sqp_solve(ocp, v, result.z, result.lam, cfg).z))

    idx = range(th.size) if indices is None else list(indices)
    numeric = fd_gradient(objective, th, step, idx)
    sel = np.asarray(list(idx))
    err = np.abs(analytic[sel] - numeric[sel]) / np.maximum(np.abs(numeric[sel]), 1e-8)
    return float(err.max(initial=0.0)), analytic, numeric
