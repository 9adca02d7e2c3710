"""Gradient-based training through the solver: imitation learning and closed-loop RL."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from pcgmpc.batch import DEFAULT_CHUNK, ModelEnv, backward_stacked, rollout, rollout_backward, solve_stacked
from pcgmpc.errors import RolloutTruncated, SolverError
from pcgmpc.problem import STATE_COST, Trajectory

from pcgmpc.bench.problems import IlBundle, RlBundle, cartpole_theta

log = logging.getLogger(__name__)


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    theta: np.ndarray | None = None
    failed: bool = False
    message: str = ""
    meta: dict = field(default_factory=dict)

    def series(self, key):
        return np.array([r[key] for r in self.records])


# ---------------------------------------------------------------------------
# Imitation learning
# ---------------------------------------------------------------------------


def il_loss_and_grad(bundle: IlBundle, q, workers=None, chunk_size=DEFAULT_CHUNK, with_grad=True):
    """Mean squared control error over the demonstrations and its gradient in ``q``."""
    ocp = bundle.ocp
    th = cartpole_theta(ocp, q, bundle.x0)
    res = solve_stacked(ocp, th, bundle.expert_z, bundle.expert_lam, bundle.cfg, workers, chunk_size)
    n = bundle.x0.shape[0]
    diff = res.z.u - bundle.demo_controls
    loss = float(np.sum(diff * diff) / n)
    info = {"sqp_iters": float(res.sqp_iters.mean()), "pcg_iters": float(res.pcg_iters.mean())}
    if not with_grad:
        return loss, None, info
    dl = Trajectory(np.zeros_like(res.z.x), 2.0 * diff / n)
    br = backward_stacked(res, dl, ocp, th, None, bundle.cfg.pcg, workers, chunk_size)
    grad = br.grad_theta.sum(axis=0)[ocp.layout[STATE_COST]]
    info["bwd_pcg_iters"] = float(br.pcg_iters.mean())
    return loss, grad, info


def train_il(bundle: IlBundle, epochs=200, lr=1e-2, seed=0, q0=None, workers=None, chunk_size=DEFAULT_CHUNK) -> TrainReport:
    """Full-batch gradient descent on the cost weights ``diag(Q)``.

    Starts from ``U([0, 1]^4)`` unless ``q0`` is given.  Records one entry per
    epoch (before its update) plus a final evaluation.
    """
    rng = np.random.default_rng(seed)
    q = rng.uniform(0.0, 1.0, size=4) if q0 is None else np.array(q0, dtype=float)
    star = bundle.theta_star
    report = TrainReport(meta={"task": "cartpole-il", "epochs": epochs, "lr": lr, "seed": seed, "q0": q.tolist(), **bundle.meta})
    t0 = time.perf_counter()
    for epoch in range(epochs + 1):
        try:
            loss, grad, info = il_loss_and_grad(bundle, q, workers, chunk_size, with_grad=epoch < epochs)
        except SolverError as exc:
            report.failed, report.message = True, f"epoch {epoch}: {exc}"
            log.warning("training stopped: %s", report.message)
            break
        rec = {"epoch": epoch, "loss": loss, "model_loss": float(np.linalg.norm(q - star)), "wall_time": time.perf_counter() - t0, **info}
        if grad is not None:
            rec["grad_norm"] = float(np.linalg.norm(grad))
        rec.update({f"theta_{i}": float(v) for i, v in enumerate(q)})
        if not np.isfinite(loss):
            report.failed, report.message = True, f"epoch {epoch}: non-finite loss"
            break
        report.records.append(rec)
        if grad is not None:
            q = q - lr * grad
    report.theta = q
    return report


# ---------------------------------------------------------------------------
# Reinforcement learning
# ---------------------------------------------------------------------------


def _learn_index(ocp, names):
    return np.concatenate([np.arange(ocp.layout[n].start, ocp.layout[n].stop) for n in names])


def _rollout_subset(bundle, theta, keep, workers, chunk_size, with_grad):
    env = ModelEnv(bundle.env.dynamics, bundle.env.theta_env[keep])
    J, rec = rollout(env, bundle.ocp, theta[keep], bundle.x0[keep], bundle.H, bundle.cfg, bundle.reward, workers=workers, chunk_size=chunk_size)
    g = rollout_backward(rec, bundle.ocp, theta[keep], bundle.cfg.pcg, workers, chunk_size)[0] if with_grad else None
    return J, rec, g


def rl_objective(bundle: RlBundle, theta, keep, workers=None, chunk_size=DEFAULT_CHUNK, with_grad=True):
    """Batch rollouts, excluding instances whose rollout diverges."""
    try:
        J, rec, g = _rollout_subset(bundle, theta, keep, workers, chunk_size, with_grad)
    except RolloutTruncated:
        ok = []
        for i in np.flatnonzero(keep):
            one = np.zeros_like(keep)
            one[i] = True
            try:
                _rollout_subset(bundle, theta, one, workers, chunk_size, False)
                ok.append(i)
            except RolloutTruncated as exc:
                log.warning("excluding instance %d: %s", i, exc)
        keep = np.zeros_like(keep)
        keep[ok] = True
        if not keep.any():
            raise
        J, rec, g = _rollout_subset(bundle, theta, keep, workers, chunk_size, with_grad)
    return J, rec, g, keep


def train_rl(bundle: RlBundle, steps=50, lr=1e-2, workers=None, chunk_size=DEFAULT_CHUNK) -> TrainReport:
    """Gradient ascent on the batch-mean total reward.

    The trained segments are shared by all instances; each instance keeps its
    own dynamics and start state.  Records the reward before each update and
    after the last one.
    """
    ocp = bundle.ocp
    idx = _learn_index(ocp, bundle.learn)
    theta = bundle.theta.copy()
    w = theta[0, idx].copy()
    keep = np.ones(theta.shape[0], bool)
    report = TrainReport(meta={"task": bundle.name, "steps": steps, "lr": lr, "learn": list(bundle.learn), **bundle.meta})
    t0 = time.perf_counter()
    for step in range(steps + 1):
        theta[:, idx] = w
        try:
            J, rec, g, keep = rl_objective(bundle, theta, keep, workers, chunk_size, with_grad=step < steps)
        except (RolloutTruncated, SolverError) as exc:
            report.failed, report.message = True, f"step {step}: {exc}"
            log.warning("training stopped: %s", report.message)
            break
        r = {
            "step": step,
            "reward": float(J.mean()),
            "terminal_state_norm": float(np.linalg.norm(rec.states[:, -1, :], axis=-1).mean()),
            "n_active": int(keep.sum()),
            "wall_time": time.perf_counter() - t0,
            "sqp_iters": float(np.mean([res.sqp_iters.mean() for res in rec.results])),
            "pcg_iters": float(np.mean([res.pcg_iters.mean() for res in rec.results])),
        }
        r.update({f"theta_{i}": float(v) for i, v in enumerate(w)})
        report.records.append(r)
        if g is not None:
            grad = g[:, idx].mean(axis=0)
            r["grad_norm"] = float(np.linalg.norm(grad))
            w = w + lr * grad
    report.theta = w
    return report
