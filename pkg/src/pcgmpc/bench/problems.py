"""Benchmark problem generators: random linear systems, cart-pole, rigid-body attitude."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pcgmpc.batch import ModelEnv, QuadraticReward
from pcgmpc.errors import ContractError, SolverError
from pcgmpc.problem import (
    CONTROL_COST,
    INITIAL_STATE,
    STATE_COST,
    DiagonalQuadraticCost,
    ExplicitDynamics,
    OcpDefinition,
    ParameterLayout,
    affine_quadratic_ocp,
    pack_affine_theta,
)
from pcgmpc.pcg import PcgConfig
from pcgmpc.sqp import SqpConfig


@dataclass(frozen=True)
class LinearProblemSpec:
    n_x: int
    n_u: int
    T: int
    H: int
    B: int
    seed: int = 0

    def __post_init__(self):
        if min(self.n_x, self.n_u, self.T, self.H, self.B) < 1:
            raise ContractError("all problem sizes must be positive")


# (n_x, n_u, T, H, B) per preset
PRESETS = {
    "problem1": (8, 4, 40, 50, 64),
    "problem2": (8, 4, 30, 50, 16),
    "problem3": (8, 4, 30, 50, 64),
    "problem4": (8, 4, 30, 50, 256),
    "problem5": (16, 8, 30, 50, 16),
    "problem6": (16, 8, 30, 50, 64),
}


def preset(name, seed=0, **overrides) -> LinearProblemSpec:
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    sizes = dict(zip(("n_x", "n_u", "T", "H", "B"), PRESETS[name]))
    sizes.update(overrides)
    return LinearProblemSpec(seed=seed, **sizes)


@dataclass
class RlBundle:
    """Batch of closed-loop tasks: problem, stacked theta, start states, environment."""

    name: str
    ocp: OcpDefinition
    theta: np.ndarray  # [B, p]
    x0: np.ndarray  # [B, n_x]
    H: int
    env: object
    reward: object
    learn: tuple  # names of trained segments
    cfg: SqpConfig
    meta: dict = field(default_factory=dict)


@dataclass
class IlBundle:
    ocp: OcpDefinition
    theta_star: np.ndarray  # [p]
    x0: np.ndarray  # [N, n_x]
    expert_z: object  # Trajectory [N, ...]
    expert_lam: np.ndarray
    learn: tuple
    cfg: SqpConfig
    meta: dict = field(default_factory=dict)

    @property
    def demo_controls(self):
        return self.expert_z.u


# ---------------------------------------------------------------------------
# Random linear systems
# ---------------------------------------------------------------------------

SINGLE_ITERATION = SqpConfig(max_sqp_iters=1, step_candidates=(1.0,), line_search=False)


def spectral_radius(A):
    return np.abs(np.linalg.eigvals(A)).max(axis=-1)


def gen_linear(spec: LinearProblemSpec, single_iteration=True) -> RlBundle:
    """``B`` random stable affine systems with costs ``x'diag(Q)x`` and ``||u||^2``.

    ``A = I + 0.1 dA`` rescaled so its spectral radius is at most 0.99,
    ``B ~ N(0, I)``, ``b ~ N(0, 1e-4 I)``, ``x_0 ~ N(0, 25 I)``.  The learnable
    ``diag(Q)`` starts at ones; the environment is each instance's own dynamics.
    """
    rng = np.random.default_rng(spec.seed)
    n_x, n_u, B = spec.n_x, spec.n_u, spec.B
    A = np.eye(n_x) + 0.1 * rng.standard_normal((B, n_x, n_x))
    rho = spectral_radius(A)
    A = A * np.minimum(1.0, 0.99 / rho)[:, None, None]
    Bm = rng.standard_normal((B, n_x, n_u))
    b = 1e-2 * rng.standard_normal((B, n_x))
    x0 = 5.0 * rng.standard_normal((B, n_x))
    ocp = affine_quadratic_ocp(n_x, n_u, spec.T, cost_scale=1.0, name="linear")
    theta = pack_affine_theta(ocp.layout, np.ones((B, n_x)), np.ones((B, n_u)), A, Bm, b, x0).values
    return RlBundle(
        name="linear",
        ocp=ocp,
        theta=theta,
        x0=x0,
        H=spec.H,
        env=ModelEnv(ocp.dynamics, theta),
        reward=QuadraticReward(1.0, 1.0),
        learn=(STATE_COST,),
        cfg=SINGLE_ITERATION if single_iteration else SqpConfig(),
        meta={"spec": spec.__dict__, "single_iteration": single_iteration},
    )


# ---------------------------------------------------------------------------
# Cart-pole
# ---------------------------------------------------------------------------


class CartPole(ExplicitDynamics):
    """Forward-Euler cart-pole with the equations of motion as printed for this benchmark.

    Note that the printed cart acceleration carries no control term and the
    pole equation has ``x4`` where the textbook model has ``x4^2``; both are
    kept as printed.
    """

    n_x, n_u = 4, 1

    def __init__(self, dt=0.04, m_c=1.0, m_p=0.1, length=0.5, g=9.81):
        self.dt, self.m_c, self.m_p, self.L, self.g = dt, m_c, m_p, length, g
        self.M = m_c + m_p

    def rates(self, x, u):
        """Continuous-time ``xdot`` and its Jacobians."""
        mp, L, g = self.m_p, self.L, self.g
        x2, x3, x4 = x[..., 1], x[..., 2], x[..., 3]
        s, c = np.sin(x3), np.cos(x3)
        D = self.M + mp * s * s
        dD = 2 * mp * s * c
        N2 = -mp * L * s * x4**2 + mp * g * s * c
        N4 = -mp * L * s * x4 + mp * g * s * c + u[..., 0]
        xdot = np.stack([x2, N2 / (D * L), x4, N4 / D], axis=-1)

        fx = np.zeros(x.shape + (4,))
        fx[..., 0, 1] = 1.0
        fx[..., 2, 3] = 1.0
        dN2_3 = -mp * L * c * x4**2 + mp * g * (c * c - s * s)
        fx[..., 1, 2] = (dN2_3 * D - N2 * dD) / (D * D * L)
        fx[..., 1, 3] = -2 * mp * L * s * x4 / (D * L)
        dN4_3 = -mp * L * c * x4 + mp * g * (c * c - s * s)
        fx[..., 3, 2] = (dN4_3 * D - N4 * dD) / (D * D)
        fx[..., 3, 3] = -mp * L * s / D
        fu = np.zeros(x.shape + (1,))
        fu[..., 3, 0] = 1.0 / D
        return xdot, fx, fu

    def step_jacobians(self, x, u, theta):
        xdot, fx, fu = self.rates(x, u)
        return x + self.dt * xdot, np.eye(4) + self.dt * fx, self.dt * fu


CARTPOLE_THETA_STAR = np.array([1.0, 2.0, 1.5, 1.0])
CARTPOLE_R = 0.05


def cartpole_ocp(T=60, dt=0.04) -> OcpDefinition:
    layout = ParameterLayout({STATE_COST: 4, CONTROL_COST: 1, INITIAL_STATE: 4})
    return OcpDefinition(
        4, 1, T, layout,
        DiagonalQuadraticCost(layout[STATE_COST]),
        DiagonalQuadraticCost(layout[CONTROL_COST]),
        CartPole(dt),
        name="cartpole",
        meta={"dt": dt},
    )


def cartpole_theta(ocp, q, x0):
    q = np.asarray(q, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    return ocp.layout.pack(state_cost=np.broadcast_to(q, x0.shape), control_cost=np.full(x0.shape[:-1] + (1,), CARTPOLE_R), initial_state=x0)


def sample_cartpole_states(rng, n):
    lo = np.array([-0.5, -0.5, -np.pi, -1.0])
    return rng.uniform(lo, -lo, size=(n, 4))


EXPERT_CFG = SqpConfig(max_sqp_iters=50)
# Full steps at tight tolerance: near the solution the l1 merit rejects full
# steps (second-order growth of the dynamics residual) and the line search
# stalls at the smallest candidate.
POLISH_CFG = SqpConfig(max_sqp_iters=30, line_search=False, convergence_tol=1e-11, pcg=PcgConfig(epsilon=1e-24))
IL_CFG = SqpConfig(max_sqp_iters=5)


def gen_cartpole(seed=0, n_demos=32, T=60, dt=0.04, learner_cfg=IL_CFG, workers=None) -> IlBundle:
    """Expert demonstrations at ``theta* = (1, 2, 1.5, 1)``, ``R = 0.05``.

    Experts are solved with the line search and then polished with full steps
    until they are fixed points of the learner's warm-started solve at
    ``theta*``.  Initial conditions whose expert solve does not converge are
    redrawn.
    """
    from pcgmpc.batch import solve_stacked

    rng = np.random.default_rng(seed)
    ocp = cartpole_ocp(T, dt)
    x0 = np.zeros((0, 4))
    zs, lams = [], []
    for _ in range(20):
        need = n_demos - x0.shape[0]
        if need == 0:
            break
        cand = sample_cartpole_states(rng, need)
        th = cartpole_theta(ocp, CARTPOLE_THETA_STAR, cand)
        try:
            res = solve_stacked(ocp, th, cfg=EXPERT_CFG, workers=workers)
            res = solve_stacked(ocp, th, res.z, res.lam, cfg=POLISH_CFG, workers=workers)
        except SolverError as exc:
            raise SolverError(f"expert generation failed: {exc}") from exc
        ok = res.converged & (res.kkt_inf_norm <= 1e-9)
        x0 = np.concatenate([x0, cand[ok]])
        zs.append(res.z.take(ok))
        lams.append(res.lam[ok])
    if x0.shape[0] < n_demos:
        raise SolverError("could not generate enough converged expert demonstrations")
    from pcgmpc.problem import Trajectory

    z = Trajectory(np.concatenate([t.x for t in zs]), np.concatenate([t.u for t in zs]))
    return IlBundle(
        ocp=ocp,
        theta_star=CARTPOLE_THETA_STAR.copy(),
        x0=x0,
        expert_z=z,
        expert_lam=np.concatenate(lams),
        learn=(STATE_COST,),
        cfg=learner_cfg,
        meta={"seed": seed, "T": T, "dt": dt, "n_demos": n_demos, "R": CARTPOLE_R},
    )


# ---------------------------------------------------------------------------
# Rigid-body attitude rates
# ---------------------------------------------------------------------------

INERTIA = "inertia"


class Attitude(ExplicitDynamics):
    """Forward-Euler ``J wdot = J w x w + tau`` with diagonal ``J`` read from theta.

    With ``J = diag(j)`` and ``(i, k, l)`` cyclic, ``wdot_i = ((j_k - j_l) w_k w_l + tau_i) / j_i``.
    """

    n_x, n_u = 3, 3

    def __init__(self, inertia: slice, dt=0.1):
        self.inertia, self.dt = inertia, dt

    def _j(self, theta):
        return theta[..., None, self.inertia]

    def step_jacobians(self, x, u, theta):
        j = self._j(theta)
        jk, jl = np.roll(j, -1, axis=-1), np.roll(j, -2, axis=-1)
        wk, wl = np.roll(x, -1, axis=-1), np.roll(x, -2, axis=-1)
        a = (jk - jl) / j
        phi = x + self.dt * (a * wk * wl + u / j)
        batch = np.broadcast_shapes(phi.shape, j.shape)[:-1]
        fx = np.zeros(batch + (3, 3))
        i = np.arange(3)
        fx[..., i, i] = 1.0
        fx[..., i, (i + 1) % 3] = self.dt * a * wl
        fx[..., i, (i + 2) % 3] = self.dt * a * wk
        fu = np.zeros(batch + (3, 3))
        fu[..., i, i] = np.broadcast_to(self.dt / j, batch + (3,))
        return np.broadcast_to(phi, batch + (3,)), fx, fu

    def param_vjp(self, x, u, theta, w, dx, du, wt, out):
        j = self._j(theta)
        jk, jl = np.roll(j, -1, axis=-1), np.roll(j, -2, axis=-1)
        wk, wl = np.roll(x, -1, axis=-1), np.roll(x, -2, axis=-1)
        dk, dl = np.roll(dx, -1, axis=-1), np.roll(dx, -2, axis=-1)
        a = (jk - jl) / j
        P = w * (wl * dk + wk * dl) + wt * wk * wl
        E = w * du + wt * u
        own = -a * P / j - E / (j * j)  # d/dj_i
        up = P / j  # d/dj_k
        g = own + np.roll(up, 1, axis=-1) - np.roll(up, 2, axis=-1)
        out[..., self.inertia] += self.dt * g.sum(axis=-2)


def attitude_ocp(T=25, dt=0.1) -> OcpDefinition:
    layout = ParameterLayout({STATE_COST: 3, CONTROL_COST: 3, INERTIA: 3, INITIAL_STATE: 3})
    return OcpDefinition(
        3, 3, T, layout,
        DiagonalQuadraticCost(layout[STATE_COST]),
        DiagonalQuadraticCost(layout[CONTROL_COST]),
        Attitude(layout[INERTIA], dt),
        name="attitude",
        meta={"dt": dt},
    )


ATTITUDE_CFG = SqpConfig(max_sqp_iters=5)


def gen_attitude(seed=0, B=16, T=25, H=25, dt=0.1, cfg=ATTITUDE_CFG) -> RlBundle:
    """``B`` rigid bodies with ``diag(J) ~ U([0.1, 10]^3)`` and ``w_0 ~ U([-1, 1]^3)``.

    Learnable theta is ``(diag Q, diag R)`` starting at ones; reward
    ``-(0.1 ||w||^2 + ||tau||^2)``.
    """
    rng = np.random.default_rng(seed)
    ocp = attitude_ocp(T, dt)
    J = rng.uniform(0.1, 10.0, size=(B, 3))
    x0 = rng.uniform(-1.0, 1.0, size=(B, 3))
    theta = ocp.layout.pack(state_cost=np.ones((B, 3)), control_cost=np.ones((B, 3)), inertia=J, initial_state=x0)
    return RlBundle(
        name="attitude",
        ocp=ocp,
        theta=theta,
        x0=x0,
        H=H,
        env=ModelEnv(ocp.dynamics, theta),
        reward=QuadraticReward(0.1, 1.0),
        learn=(STATE_COST, CONTROL_COST),
        cfg=cfg,
        meta={"seed": seed, "B": B, "T": T, "H": H, "dt": dt},
    )
