"""Batched solves with warm-start caching, and differentiable closed-loop rollouts.

Instances sharing a problem definition are stacked and solved together in
fixed-size chunks.  The chunk partition depends only on ``chunk_size``, never
on the worker count, and every instance's arithmetic is independent of its
neighbours, so results are bit-identical for any degree of parallelism.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from pcgmpc.backward import backward_vjp
from pcgmpc.errors import ContractError, RolloutTruncated, SolverError
from pcgmpc.problem import INITIAL_STATE, OcpDefinition, Trajectory, theta_values
from pcgmpc.sqp import SolveResult, SqpConfig, policy_first_control, sqp_solve

log = logging.getLogger(__name__)

WORKERS_ENV = "PCGMPC_WORKERS"
DEFAULT_CHUNK = 16


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Stacking helpers
# ---------------------------------------------------------------------------


def _concat(items):
    first = items[0]
    if first is None:
        return None
    if isinstance(first, np.ndarray) or np.isscalar(first):
        return np.concatenate([np.asarray(a) for a in items], axis=0)
    if isinstance(first, list):  # per-iteration history: not merged across chunks
        return []
    if dataclasses.is_dataclass(first):
        return type(first)(**{f.name: _concat([getattr(o, f.name) for o in items]) for f in dataclasses.fields(first)})
    raise TypeError(f"cannot stack {type(first).__name__}")


def concat_results(results):
    """Join batched results along their leading axis."""
    return results[0] if len(results) == 1 else _concat(results)


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def solve_stacked(ocp: OcpDefinition, theta, z0=None, lam0=None, cfg: SqpConfig = SqpConfig(), workers=None, chunk_size=DEFAULT_CHUNK) -> SolveResult:
    """``sqp_solve`` over ``theta[B, p]`` in fixed chunks of the leading axis."""
    th = np.asarray(theta_values(theta), dtype=float)
    if th.ndim != 2:
        raise ContractError("solve_stacked expects theta of shape [B, p]")
    workers = default_workers() if workers is None else workers
    bounds = [(s, min(s + chunk_size, th.shape[0])) for s in range(0, th.shape[0], chunk_size)]

    def job(b):
        s, e = b
        zc = None if z0 is None else Trajectory(z0.x[s:e], z0.u[s:e])
        lc = None if lam0 is None else lam0[s:e]
        return sqp_solve(ocp, th[s:e], zc, lc, cfg)

    return concat_results(_map(job, bounds, workers))


def backward_stacked(result: SolveResult, loss_grad, ocp, theta, lambda_tilde0=None, cfg=None, workers=None, chunk_size=DEFAULT_CHUNK):
    """``backward_vjp`` over a stacked result, with the same chunking as the forward pass."""
    cfg = cfg or SqpConfig().pcg
    th = np.asarray(theta_values(theta), dtype=float)
    g = loss_grad if isinstance(loss_grad, Trajectory) else Trajectory.from_flat(np.asarray(loss_grad), ocp.n_x, ocp.n_u, ocp.T)
    workers = default_workers() if workers is None else workers
    n = th.shape[0]
    bounds = [(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]

    def job(b):
        s, e = b
        idx = slice(s, e)
        sub = dataclasses.replace(result, z=result.z.take(idx), lam=result.lam[idx], schur=result.schur.take(idx), qp=result.qp.take(idx), history=[])
        lt = None if lambda_tilde0 is None else lambda_tilde0[idx]
        return backward_vjp(sub, Trajectory(g.x[idx], g.u[idx]), lt, ocp, th[idx], cfg)

    return _concat(_map(job, bounds, workers))


# ---------------------------------------------------------------------------
# Warm-start cache and batch_solve
# ---------------------------------------------------------------------------


@dataclass
class CacheSlot:
    z: Trajectory
    lam: np.ndarray
    lam_tilde: np.ndarray


@dataclass
class WarmStartCache:
    """Per-instance ``(z, lam, lam~)`` from the previous solve; missing slots read as zeros."""

    slots: dict = field(default_factory=dict)
    generation: int = 0

    def get(self, key, ocp: OcpDefinition) -> CacheSlot:
        slot = self.slots.get(key)
        shape = (ocp.T + 1, ocp.n_x)
        if slot is None or slot.z.x.shape != (ocp.T + 1, ocp.n_x) or slot.z.u.shape != (ocp.T, ocp.n_u):
            return CacheSlot(ocp.zeros(), np.zeros(shape), np.zeros(shape))
        return slot

    def put(self, key, z=None, lam=None, lam_tilde=None):
        old = self.slots.get(key)
        if old is None:
            if z is None:
                raise ContractError("first write to a cache slot must include z")
            old = CacheSlot(z, np.zeros(np.shape(lam)), np.zeros(np.shape(lam)))
        self.slots[key] = CacheSlot(
            old.z if z is None else z,
            old.lam if lam is None else np.asarray(lam),
            old.lam_tilde if lam_tilde is None else np.asarray(lam_tilde),
        )

    def clear(self, key=None):
        if key is None:
            self.slots.clear()
        else:
            self.slots.pop(key, None)
        self.generation += 1


def batch_solve(instances, cache: WarmStartCache | None = None, cfg: SqpConfig = SqpConfig(), workers=None, chunk_size=DEFAULT_CHUNK, keys=None):
    """Solve independent ``(ocp, theta)`` instances, warm-starting each from its cache slot.

    Returns a list aligned with ``instances`` holding a ``SolveResult`` per
    instance or the ``SolverError`` that instance raised.  A failing chunk is
    retried instance by instance so one bad problem never aborts the batch.
    """
    keys = list(range(len(instances))) if keys is None else list(keys)
    cache = WarmStartCache() if cache is None else cache
    groups: dict = {}
    for i, (ocp, _) in enumerate(instances):
        groups.setdefault(id(ocp), []).append(i)
    out = [None] * len(instances)
    workers = default_workers() if workers is None else workers

    jobs = []
    for members in groups.values():
        for s in range(0, len(members), chunk_size):
            jobs.append(members[s:s + chunk_size])

    def run(idx):
        ocp = instances[idx[0]][0]
        th = np.stack([np.asarray(theta_values(instances[i][1]), dtype=float) for i in idx])
        slots = [cache.get(keys[i], ocp) for i in idx]
        z0 = Trajectory(np.stack([s.z.x for s in slots]), np.stack([s.z.u for s in slots]))
        lam0 = np.stack([s.lam for s in slots])
        try:
            res = sqp_solve(ocp, th, z0, lam0, cfg)
            return [res.take(k) for k in range(len(idx))]
        except SolverError:
            if len(idx) == 1:
                raise
        singles = []
        for k in range(len(idx)):
            try:
                singles.append(sqp_solve(ocp, th[k:k + 1], z0.take(slice(k, k + 1)), lam0[k:k + 1], cfg).take(0))
            except SolverError as exc:
                singles.append(exc)
        return singles

    def guarded(idx):
        try:
            return run(idx)
        except SolverError as exc:
            return [exc]

    for idx, res in zip(jobs, _map(guarded, jobs, workers)):
        for i, r in zip(idx, res):
            out[i] = r
            if isinstance(r, SolveResult):
                cache.put(keys[i], z=r.z, lam=r.lam)
            else:
                log.warning("instance %s failed: %s", keys[i], r)
    cache.generation += 1
    return out


# ---------------------------------------------------------------------------
# Environments, rewards and rollouts
# ---------------------------------------------------------------------------


class ModelEnv:
    """Environment stepping a problem's own dynamics at fixed parameters ``theta_env``."""

    def __init__(self, dynamics, theta_env):
        self.dynamics = dynamics
        self.theta_env = np.asarray(theta_values(theta_env), dtype=float)

    def step(self, x, u):
        return self.dynamics.step(x[..., None, :], u[..., None, :], self.theta_env)[..., 0, :]

    def vjp(self, x, u, cot):
        """Cotangents ``(phi_x' cot, phi_u' cot)`` of one step."""
        _, fx, fu = self.dynamics.step_jacobians(x[..., None, :], u[..., None, :], self.theta_env)
        fx, fu = fx[..., 0, :, :], fu[..., 0, :, :]
        return (np.swapaxes(fx, -1, -2) @ cot[..., None])[..., 0], (np.swapaxes(fu, -1, -2) @ cot[..., None])[..., 0]


@dataclass(frozen=True)
class QuadraticReward:
    """``R(x, u) = -(wx ||x||^2 + wu ||u||^2)``."""

    wx: float = 1.0
    wu: float = 1.0

    def value(self, x, u):
        return -(self.wx * np.sum(x * x, axis=-1) + self.wu * np.sum(u * u, axis=-1))

    def grad(self, x, u):
        return -2.0 * self.wx * x, -2.0 * self.wu * u


@dataclass
class RolloutRecord:
    states: np.ndarray  # [..., H+1, n_x]
    controls: np.ndarray  # [..., H, n_u]
    rewards: np.ndarray  # [..., H]
    results: list  # per-step SolveResult (batched)
    thetas: list  # per-step theta with the initial state substituted
    env: object
    reward: object

    @property
    def H(self):
        return self.controls.shape[-2]


def _with_initial_state(ocp, th, x):
    th = np.array(th, dtype=float)
    th = np.array(np.broadcast_to(th, x.shape[:-1] + th.shape[-1:]))
    th[..., ocp.layout[INITIAL_STATE]] = x
    return th


def rollout(env, ocp: OcpDefinition, theta, x_init, H, cfg: SqpConfig = SqpConfig(), reward=None, warm_start=True, workers=None, chunk_size=DEFAULT_CHUNK):
    """Closed-loop episode: solve, apply ``u_0``, step the environment, ``H`` times.

    The reward of step ``t`` is ``R(x_{t+1}, u_t)``.  Each solve is warm-started
    from the previous step's solution.  Batched when ``theta``/``x_init``
    carry a leading axis.
    """
    if H < 1:
        raise ContractError("episode length must be at least 1")
    reward = QuadraticReward() if reward is None else reward
    th = np.asarray(theta_values(theta), dtype=float)
    x = np.asarray(x_init, dtype=float)
    stacked = x.ndim == 2
    states, controls, rewards, results, thetas = [x], [], [], [], []
    z0 = lam0 = None
    for t in range(H):
        th_t = _with_initial_state(ocp, th, x)
        try:
            if stacked:
                res = solve_stacked(ocp, th_t, z0, lam0, cfg, workers, chunk_size)
            else:
                res = sqp_solve(ocp, th_t, z0, lam0, cfg)
        except SolverError as exc:
            raise RolloutTruncated(t, exc) from exc
        u = policy_first_control(res)
        x = env.step(x, u)
        if not np.all(np.isfinite(x)):
            raise RolloutTruncated(t, ContractError("environment returned a non-finite state"))
        rewards.append(reward.value(x, u))
        states.append(x)
        controls.append(u)
        results.append(res)
        thetas.append(th_t)
        if warm_start:
            z0, lam0 = res.z, res.lam
    rec = RolloutRecord(np.stack(states, -2), np.stack(controls, -2), np.stack(rewards, -1), results, thetas, env, reward)
    return rec.rewards.sum(axis=-1), rec


def rollout_backward(record: RolloutRecord, ocp: OcpDefinition, theta, cfg=None, workers=None, chunk_size=DEFAULT_CHUNK):
    """Reverse-mode gradient of the total reward with respect to ``theta``.

    Returns ``(grad_theta, grad_x_init)``.  The initial-state segment of
    ``grad_theta`` is zero since it is overwritten by the environment state
    at every step; the sensitivity to the episode's start is ``grad_x_init``.
    """
    if len(record.results) != record.H:
        raise ContractError("rollout record is incomplete")
    cfg = cfg or SqpConfig().pcg
    th = np.asarray(theta_values(theta), dtype=float)
    xs_slice = ocp.layout[INITIAL_STATE]
    stacked = record.states.ndim == 3
    batch = record.states.shape[:-2]
    grad = np.zeros(batch + th.shape[-1:])
    adj = np.zeros(record.states.shape[:-2] + record.states.shape[-1:])
    lam_t = None
    for t in range(record.H - 1, -1, -1):
        x, u, x_next = record.states[..., t, :], record.controls[..., t, :], record.states[..., t + 1, :]
        res = record.results[t]
        if res is None or res.schur is None:
            raise ContractError(f"missing cached matrices at step {t}")
        rx, ru = record.reward.grad(x_next, u)
        g_next = adj + rx
        cx, cu = record.env.vjp(x, u, g_next)
        cu = cu + ru
        dl = Trajectory(np.zeros(batch + (ocp.T + 1, ocp.n_x)), np.zeros(batch + (ocp.T, ocp.n_u)))
        dl.u[..., 0, :] = cu
        if stacked:
            br = backward_stacked(res, dl, ocp, record.thetas[t], lam_t, cfg, workers, chunk_size)
        else:
            br = backward_vjp(res, dl, lam_t, ocp, record.thetas[t], cfg)
        lam_t = br.lambda_tilde
        g = br.grad_theta
        adj = cx + g[..., xs_slice]
        g = g.copy()
        g[..., xs_slice] = 0.0
        grad = grad + g
    return grad, adj
