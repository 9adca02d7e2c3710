"""Parametric optimal control problems and their local linear-quadratic models.

Every array carries optional leading batch axes.  States are stored as
``x[..., T+1, n_x]``, controls as ``u[..., T, n_u]`` and parameters as a flat
``theta[..., p]`` whose named segments are described by a :class:`ParameterLayout`.
Callbacks evaluate all stages at once, so stage-level work is vectorized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from pcgmpc.errors import ContractError, EvaluationError, NumericalError

EPS_PD = 1e-6
AFFINE_FORMAT = "pcgmpc.affine-quadratic/1"

# Canonical segment names.
STATE_COST = "state_cost"
CONTROL_COST = "control_cost"
DYNAMICS = "dynamics"
INITIAL_STATE = "initial_state"


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class ParameterLayout:
    """Ordered, disjoint named segments covering a flat parameter vector."""

    def __init__(self, sizes: Mapping[str, int]):
        self.slices: dict[str, slice] = {}
        start = 0
        for name, size in sizes.items():
            if size < 0:
                raise ContractError(f"segment {name!r} has negative size")
            self.slices[name] = slice(start, start + int(size))
            start += int(size)
        self.size = start

    def __contains__(self, name):
        return name in self.slices

    def __getitem__(self, name) -> slice:
        return self.slices[name]

    def names(self):
        return list(self.slices)

    def pack(self, **segments) -> np.ndarray:
        """Concatenate segment arrays (each ``[..., size]``) in layout order."""
        missing = set(self.slices) - set(segments)
        if missing:
            raise ContractError(f"missing segments: {sorted(missing)}")
        parts = [np.asarray(segments[name], dtype=float) for name in self.slices]
        batch = np.broadcast_shapes(*(p.shape[:-1] for p in parts))
        parts = [np.broadcast_to(p, batch + p.shape[-1:]) for p in parts]
        for name, p in zip(self.slices, parts):
            sl = self.slices[name]
            if p.shape[-1] != sl.stop - sl.start:
                raise ContractError(f"segment {name!r} expects {sl.stop - sl.start} entries, got {p.shape[-1]}")
        return np.concatenate(parts, axis=-1)

    def __eq__(self, other):
        return isinstance(other, ParameterLayout) and self.slices == other.slices

    def __repr__(self):
        inner = ", ".join(f"{k}={s.stop - s.start}" for k, s in self.slices.items())
        return f"ParameterLayout({inner})"


@dataclass(frozen=True)
class ParameterVector:
    """Flat parameter values with their segment map and log-space flags.

    ``log_mask`` marks entries that optimizers should update in log space
    (``values = exp(raw)``); such entries must be strictly positive.
    """

    values: np.ndarray
    layout: ParameterLayout
    log_mask: np.ndarray = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape[-1:] != (self.layout.size,):
            raise ContractError(f"parameter vector has {values.shape[-1:]} entries, layout needs {self.layout.size}")
        mask = np.zeros(self.layout.size, bool) if self.log_mask is None else np.asarray(self.log_mask, bool)
        if mask.shape != (self.layout.size,):
            raise ContractError("log_mask must have one flag per parameter")
        if np.any(values[..., mask] <= 0):
            raise ContractError("log-space parameters must be strictly positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "log_mask", mask)

    @classmethod
    def from_segments(cls, layout: ParameterLayout, log_space=(), **segments):
        mask = np.zeros(layout.size, bool)
        for name in log_space:
            mask[layout[name]] = True
        return cls(layout.pack(**segments), layout, mask)

    @property
    def segments(self) -> dict[str, slice]:
        return dict(self.layout.slices)

    def segment(self, name) -> np.ndarray:
        return self.values[..., self.layout[name]]

    def with_segment(self, name, value) -> "ParameterVector":
        values = np.array(np.broadcast_to(self.values, np.broadcast_shapes(self.values.shape[:-1], np.shape(value)[:-1]) + (self.layout.size,)))
        values[..., self.layout[name]] = value
        return replace(self, values=values)

    def with_values(self, values) -> "ParameterVector":
        return replace(self, values=np.asarray(values, dtype=float))

    def to_raw(self) -> np.ndarray:
        raw = self.values.copy()
        raw[..., self.log_mask] = np.log(raw[..., self.log_mask])
        return raw

    def from_raw(self, raw) -> "ParameterVector":
        values = np.array(raw, dtype=float)
        values[..., self.log_mask] = np.exp(values[..., self.log_mask])
        return replace(self, values=values)

    def raw_gradient(self, grad) -> np.ndarray:
        """Chain a natural-space gradient through the log reparameterization."""
        g = np.array(grad, dtype=float)
        g[..., self.log_mask] = g[..., self.log_mask] * self.values[..., self.log_mask]
        return g


def theta_values(theta) -> np.ndarray:
    return theta.values if isinstance(theta, ParameterVector) else np.asarray(theta, dtype=float)


# ---------------------------------------------------------------------------
# Trajectories and QP data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """States ``x[..., T+1, n_x]`` and controls ``u[..., T, n_u]``."""

    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        u = np.asarray(self.u, dtype=float)
        if x.ndim < 2 or u.ndim < 2 or x.shape[-2] != u.shape[-2] + 1:
            raise ContractError(f"inconsistent trajectory shapes x{x.shape} u{u.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)

    @property
    def T(self):
        return self.u.shape[-2]

    @property
    def batch_shape(self):
        return np.broadcast_shapes(self.x.shape[:-2], self.u.shape[:-2])

    @classmethod
    def zeros(cls, n_x, n_u, T, batch_shape=()):
        return cls(np.zeros(tuple(batch_shape) + (T + 1, n_x)), np.zeros(tuple(batch_shape) + (T, n_u)))

    def flat(self) -> np.ndarray:
        """Interleaved layout ``(x_0, u_0, ..., x_{T-1}, u_{T-1}, x_T)``."""
        batch = self.batch_shape
        x = np.broadcast_to(self.x, batch + self.x.shape[-2:])
        u = np.broadcast_to(self.u, batch + self.u.shape[-2:])
        body = np.concatenate([x[..., :-1, :], u], axis=-1).reshape(batch + (-1,))
        return np.concatenate([body, x[..., -1, :]], axis=-1)

    @classmethod
    def from_flat(cls, v, n_x, n_u, T) -> "Trajectory":
        v = np.asarray(v, dtype=float)
        n = (T + 1) * n_x + T * n_u
        if v.shape[-1] != n:
            raise ContractError(f"flat trajectory needs {n} entries, got {v.shape[-1]}")
        body = v[..., : T * (n_x + n_u)].reshape(v.shape[:-1] + (T, n_x + n_u))
        x = np.concatenate([body[..., :n_x], v[..., None, T * (n_x + n_u):]], axis=-2)
        return cls(x, body[..., n_x:].copy())

    def take(self, index) -> "Trajectory":
        return Trajectory(self.x[index], self.u[index])

    def __add__(self, other):
        return Trajectory(self.x + other.x, self.u + other.u)

    def __sub__(self, other):
        return Trajectory(self.x - other.x, self.u - other.u)

    def scaled(self, alpha) -> "Trajectory":
        a = np.asarray(alpha, dtype=float)
        return Trajectory(a[..., None, None] * self.x, a[..., None, None] * self.u)

    def inf_norm(self) -> np.ndarray:
        return np.maximum(np.abs(self.x).max(axis=(-2, -1)), np.abs(self.u).max(axis=(-2, -1), initial=0.0))

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.u)))


@dataclass(frozen=True)
class QpData:
    """One linear-quadratic model: costs ``1/2 z'Gz + b'z``, constraints ``Hz = d``.

    ``b = (q_0, r_0, ..., q_T)`` and ``d = (x_s, C_0, ..., C_{T-1})``; ``G`` and
    ``H`` are never formed.
    """

    Q: np.ndarray  # [..., T+1, n_x, n_x]
    q: np.ndarray  # [..., T+1, n_x]
    R: np.ndarray  # [..., T, n_u, n_u]
    r: np.ndarray  # [..., T, n_u]
    A_plus: np.ndarray  # [..., T, n_x, n_x]
    A: np.ndarray  # [..., T, n_x, n_x]
    B: np.ndarray  # [..., T, n_x, n_u]
    C: np.ndarray  # [..., T, n_x]
    x_s: np.ndarray  # [..., n_x]

    @property
    def T(self):
        return self.R.shape[-3]

    @property
    def n_x(self):
        return self.Q.shape[-1]

    @property
    def n_u(self):
        return self.R.shape[-1]

    @property
    def b(self) -> Trajectory:
        return Trajectory(self.q, self.r)

    @property
    def d(self) -> np.ndarray:
        return np.concatenate([self.x_s[..., None, :], self.C], axis=-2)

    def take(self, index) -> "QpData":
        return QpData(*(getattr(self, f)[index] for f in self.__dataclass_fields__))


def _mv(M, v):
    return (M @ v[..., None])[..., 0]


def _mtv(M, v):
    return (np.swapaxes(M, -1, -2) @ v[..., None])[..., 0]


# ---------------------------------------------------------------------------
# Cost and dynamics components
# ---------------------------------------------------------------------------


def _param(spec, theta):
    """A component coefficient is either a slice into theta or a fixed array."""
    if isinstance(spec, slice):
        return theta[..., spec]
    return spec


class DiagonalQuadraticCost:
    """Stage cost ``scale * sum_i w_i (v_i - ref_i)^2`` shared by all stages.

    ``weights`` is a slice into theta (learnable) or a fixed array.
    """

    def __init__(self, weights, scale=0.5, reference=None):
        self.weights = weights if isinstance(weights, slice) else np.asarray(weights, dtype=float)
        self.scale = float(scale)
        self.reference = None if reference is None else np.asarray(reference, dtype=float)

    def _w(self, theta):
        return _param(self.weights, theta)[..., None, :]

    def _dv(self, v):
        return v if self.reference is None else v - self.reference

    def value(self, v, theta):
        dv = self._dv(v)
        return self.scale * np.sum(self._w(theta) * dv * dv, axis=-1)

    def derivatives(self, v, theta):
        dv = self._dv(v)
        w = self._w(theta)
        value = self.scale * np.sum(w * dv * dv, axis=-1)
        grad = 2.0 * self.scale * w * dv
        hess = np.zeros(grad.shape + grad.shape[-1:])
        idx = np.arange(grad.shape[-1])
        hess[..., idx, idx] = np.broadcast_to(2.0 * self.scale * w, grad.shape)
        return value, grad, hess

    def theta_vjp(self, v, cot, theta, out):
        """Accumulate ``sum_t cot_t' d(grad c)/d theta`` into ``out``."""
        if isinstance(self.weights, slice):
            out[..., self.weights] += 2.0 * self.scale * np.sum(cot * self._dv(v), axis=-2)


class AffineDynamics:
    """``x_{t+1} = A x_t + B u_t + b`` with residual ``x_{t+1} - A x_t - B u_t - b``.

    Each of ``A``, ``B``, ``b`` is a slice into theta (row-major for matrices)
    or a fixed array.
    """

    def __init__(self, n_x, n_u, A, B, b):
        self.n_x, self.n_u = n_x, n_u
        self.A_spec = A if isinstance(A, slice) else np.asarray(A, dtype=float)
        self.B_spec = B if isinstance(B, slice) else np.asarray(B, dtype=float)
        self.b_spec = b if isinstance(b, slice) else np.asarray(b, dtype=float)

    def matrices(self, theta):
        A = _param(self.A_spec, theta).reshape(np.shape(theta)[:-1] + (self.n_x, self.n_x)) if isinstance(self.A_spec, slice) else self.A_spec
        B = _param(self.B_spec, theta).reshape(np.shape(theta)[:-1] + (self.n_x, self.n_u)) if isinstance(self.B_spec, slice) else self.B_spec
        return A, B, _param(self.b_spec, theta)

    def step(self, x, u, theta):
        A, B, b = self.matrices(theta)
        return _mv(A[..., None, :, :], x) + _mv(B[..., None, :, :], u) + b[..., None, :]

    def residual(self, x_next, x, u, theta):
        return x_next - self.step(x, u, theta)

    def jacobians(self, x_next, x, u, theta):
        A, B, _ = self.matrices(theta)
        f = self.residual(x_next, x, u, theta)
        batch = f.shape[:-1]
        eye = np.broadcast_to(np.eye(self.n_x), batch + (self.n_x, self.n_x))
        return f, eye, np.broadcast_to(-A[..., None, :, :], batch + (self.n_x, self.n_x)), np.broadcast_to(-B[..., None, :, :], batch + (self.n_x, self.n_u))

    def step_jacobians(self, x, u, theta):
        A, B, _ = self.matrices(theta)
        phi = self.step(x, u, theta)
        batch = phi.shape[:-1]
        return phi, np.broadcast_to(A[..., None, :, :], batch + (self.n_x, self.n_x)), np.broadcast_to(B[..., None, :, :], batch + (self.n_x, self.n_u))

    def theta_vjp(self, x, u, lam, x_t, u_t, lam_t, theta, out):
        """Accumulate ``d/dtheta [lam' J_f z_t + lam_t' f]`` into ``out``.

        ``lam``/``lam_t`` are the dynamics multipliers ``[..., T, n_x]``.
        """
        xs, us = x[..., :-1, :], u
        xts, uts = x_t[..., :-1, :], u_t
        if isinstance(self.A_spec, slice):
            gA = lam[..., :, None] * xts[..., None, :] + lam_t[..., :, None] * xs[..., None, :]
            out[..., self.A_spec] -= gA.sum(axis=-3).reshape(gA.shape[:-3] + (-1,))
        if isinstance(self.B_spec, slice):
            gB = lam[..., :, None] * uts[..., None, :] + lam_t[..., :, None] * us[..., None, :]
            out[..., self.B_spec] -= gB.sum(axis=-3).reshape(gB.shape[:-3] + (-1,))
        if isinstance(self.b_spec, slice):
            out[..., self.b_spec] -= lam_t.sum(axis=-2)


class ExplicitDynamics:
    """Base for ``x_{t+1} = phi(x_t, u_t; theta)``; residual ``x_{t+1} - phi``.

    Subclasses implement :meth:`step_jacobians` and, when theta enters the
    dynamics, :meth:`param_vjp`.
    """

    n_x: int
    n_u: int

    def step(self, x, u, theta):
        return self.step_jacobians(x, u, theta)[0]

    def step_jacobians(self, x, u, theta):  # pragma: no cover - interface
        raise NotImplementedError

    def param_vjp(self, x, u, theta, w, dx, du, wt, out):
        """Accumulate ``d/dtheta [w'(phi_x dx + phi_u du) + wt' phi]`` into ``out``.

        The default covers dynamics that do not depend on theta.
        """

    def residual(self, x_next, x, u, theta):
        return x_next - self.step(x, u, theta)

    def jacobians(self, x_next, x, u, theta):
        phi, phi_x, phi_u = self.step_jacobians(x, u, theta)
        f = x_next - phi
        eye = np.broadcast_to(np.eye(self.n_x), f.shape[:-1] + (self.n_x, self.n_x))
        return f, eye, -phi_x, -phi_u

    def theta_vjp(self, x, u, lam, x_t, u_t, lam_t, theta, out):
        tmp = np.zeros_like(out)
        self.param_vjp(x[..., :-1, :], u, theta, lam, x_t[..., :-1, :], u_t, lam_t, tmp)
        out -= tmp


# ---------------------------------------------------------------------------
# Problem definition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OcpDefinition:
    """Parametric OCP: separable costs, dynamics residual, initial state from theta.

    ``state_cost`` is evaluated on all ``T+1`` states (the terminal state
    included), ``control_cost`` on the ``T`` controls.
    """

    n_x: int
    n_u: int
    T: int
    layout: ParameterLayout
    state_cost: object
    control_cost: object
    dynamics: object
    name: str = "ocp"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.T < 1 or self.n_x < 1 or self.n_u < 1:
            raise ContractError("need T >= 1, n_x >= 1, n_u >= 1")
        if INITIAL_STATE not in self.layout:
            raise ContractError("the parameter layout must contain an initial_state segment")
        sl = self.layout[INITIAL_STATE]
        if sl.stop - sl.start != self.n_x:
            raise ContractError("initial_state segment must have n_x entries")

    @property
    def n_z(self):
        return (self.T + 1) * self.n_x + self.T * self.n_u

    @property
    def n_lambda(self):
        return (self.T + 1) * self.n_x

    def initial_state(self, theta):
        return theta_values(theta)[..., self.layout[INITIAL_STATE]]

    def zeros(self, batch_shape=()) -> Trajectory:
        return Trajectory.zeros(self.n_x, self.n_u, self.T, batch_shape)

    def check(self, z: Trajectory):
        if z.x.shape[-2:] != (self.T + 1, self.n_x) or z.u.shape[-2:] != (self.T, self.n_u):
            raise ContractError(f"trajectory shapes x{z.x.shape} u{z.u.shape} do not match the problem")

    def cost(self, z: Trajectory, theta) -> np.ndarray:
        th = theta_values(theta)
        return self.state_cost.value(z.x, th).sum(axis=-1) + self.control_cost.value(z.u, th).sum(axis=-1)

    def constraint_residual(self, z: Trajectory, theta) -> np.ndarray:
        """Stacked ``(x_0 - x_s, f_0, ..., f_{T-1})`` as ``[..., T+1, n_x]``."""
        th = theta_values(theta)
        f = self.dynamics.residual(z.x[..., 1:, :], z.x[..., :-1, :], z.u, th)
        g0 = z.x[..., 0, :] - self.initial_state(th)
        batch = np.broadcast_shapes(g0.shape[:-1], f.shape[:-2])
        return np.concatenate([np.broadcast_to(g0[..., None, :], batch + (1, self.n_x)), np.broadcast_to(f, batch + f.shape[-2:])], axis=-2)

    def rollout(self, x0, controls, theta) -> Trajectory:
        """Simulate the dynamics forward (explicit dynamics only)."""
        th = theta_values(theta)
        xs = [np.asarray(x0, dtype=float)]
        for t in range(self.T):
            xs.append(self.dynamics.step(xs[-1][..., None, :], controls[..., t : t + 1, :], th)[..., 0, :])
        return Trajectory(np.stack(xs, axis=-2), controls)

    def theta_vjp(self, z: Trajectory, lam, z_t: Trajectory, lam_t, theta) -> np.ndarray:
        """``-dF/dtheta' [z_t; lam_t]`` where ``F`` is the KKT residual map."""
        th = theta_values(theta)
        batch = np.broadcast_shapes(z.batch_shape, z_t.batch_shape, lam.shape[:-2], lam_t.shape[:-2], th.shape[:-1])
        acc = np.zeros(batch + (self.layout.size,))
        self.state_cost.theta_vjp(z.x, z_t.x, th, acc)
        self.control_cost.theta_vjp(z.u, z_t.u, th, acc)
        self.dynamics.theta_vjp(z.x, z.u, lam[..., 1:, :], z_t.x, z_t.u, lam_t[..., 1:, :], th, acc)
        # x_0 - x_s(theta) contributes -lam_t[0] to the x_s segment
        acc[..., self.layout[INITIAL_STATE]] -= lam_t[..., 0, :]
        return -acc


# ---------------------------------------------------------------------------
# Linearization
# ---------------------------------------------------------------------------


def project_pd(M, eps_pd=EPS_PD) -> np.ndarray:
    """Clamp eigenvalues of symmetric matrices (stacked on leading axes) to ``>= eps_pd``.

    Matrices that are already ``eps_pd``-definite are returned unchanged.
    """
    M = np.asarray(M, dtype=float)
    S = 0.5 * (M + np.swapaxes(M, -1, -2))
    try:
        w, V = np.linalg.eigh(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed for matrix stack of shape {S.shape}: {exc}") from exc
    ok = w.min(axis=-1) >= eps_pd
    if np.all(ok):
        return S
    clamped = (V * np.maximum(w, eps_pd)[..., None, :]) @ np.swapaxes(V, -1, -2)
    clamped = 0.5 * (clamped + np.swapaxes(clamped, -1, -2))
    return np.where(ok[..., None, None], S, clamped)


def _first_bad_stage(*pairs):
    """First stage index holding a non-finite entry; pairs are ``(array, core_ndim)``."""
    for a, core in pairs:
        bad = ~np.isfinite(a)
        if np.any(bad):
            stage_axis = a.ndim - core - 1
            per_stage = bad.any(axis=tuple(ax for ax in range(a.ndim) if ax != stage_axis))
            return int(np.argmax(per_stage))
    return None


def linearize(ocp: OcpDefinition, z: Trajectory, theta, eps_pd=EPS_PD) -> QpData:
    """Local QP at ``z``, written in absolute coordinates.

    The linear cost terms are ``q_t = grad c(x_t) - Q_t x_t`` (``Q_t`` after
    projection), so the QP solution is the next iterate itself rather than a
    step, and an exact KKT point reproduces itself.
    """
    ocp.check(z)
    th = theta_values(theta)
    _, gx, Hx = ocp.state_cost.derivatives(z.x, th)
    _, gu, Hu = ocp.control_cost.derivatives(z.u, th)
    f, A_plus, A, B = ocp.dynamics.jacobians(z.x[..., 1:, :], z.x[..., :-1, :], z.u, th)
    stage = _first_bad_stage((gx, 1), (Hx, 2))
    if stage is not None:
        raise EvaluationError("non-finite state cost derivatives", stage=stage)
    stage = _first_bad_stage((gu, 1), (Hu, 2))
    if stage is not None:
        raise EvaluationError("non-finite control cost derivatives", stage=stage)
    stage = _first_bad_stage((f, 1), (A_plus, 2), (A, 2), (B, 2))
    if stage is not None:
        raise EvaluationError("non-finite dynamics evaluation", stage=stage)
    Q = project_pd(Hx, eps_pd)
    R = project_pd(Hu, eps_pd)
    q = gx - _mv(Q, z.x)
    r = gu - _mv(R, z.u)
    C = _mv(A_plus, z.x[..., 1:, :]) + _mv(A, z.x[..., :-1, :]) + _mv(B, z.u) - f
    x_s = ocp.initial_state(th)
    batch = np.broadcast_shapes(q.shape[:-2], C.shape[:-2], x_s.shape[:-1])

    def bc(a, core):
        return np.ascontiguousarray(np.broadcast_to(a, batch + a.shape[a.ndim - core:]))

    return QpData(bc(Q, 3), bc(q, 2), bc(R, 3), bc(r, 2), bc(A_plus, 3), bc(A, 3), bc(B, 3), bc(C, 2), bc(x_s, 1))


def lagrangian_gradient(grad_x, grad_u, A_plus, A, B, lam) -> Trajectory:
    """``grad c + J_g' lam`` split into state and control parts."""
    gx = np.array(np.broadcast_to(grad_x, np.broadcast_shapes(grad_x.shape, lam.shape)))
    gx[..., 0, :] += lam[..., 0, :]
    gx[..., 1:, :] += _mtv(A_plus, lam[..., 1:, :])
    gx[..., :-1, :] += _mtv(A, lam[..., 1:, :])
    gu = grad_u + _mtv(B, lam[..., 1:, :])
    return Trajectory(gx, gu)


def kkt_residual(ocp: OcpDefinition, z: Trajectory, lam, theta) -> np.ndarray:
    """Stacked ``(grad_z L, g)`` as a flat vector ``[..., n_z + n_lambda]``."""
    ocp.check(z)
    lam = np.asarray(lam, dtype=float)
    if lam.shape[-2:] != (ocp.T + 1, ocp.n_x):
        raise ContractError(f"dual vector must be [..., {ocp.T + 1}, {ocp.n_x}], got {lam.shape}")
    th = theta_values(theta)
    _, gx, _ = ocp.state_cost.derivatives(z.x, th)
    _, gu, _ = ocp.control_cost.derivatives(z.u, th)
    _, A_plus, A, B = ocp.dynamics.jacobians(z.x[..., 1:, :], z.x[..., :-1, :], z.u, th)
    grad = lagrangian_gradient(gx, gu, A_plus, A, B, lam)
    g = ocp.constraint_residual(z, th)
    flat = grad.flat()
    batch = np.broadcast_shapes(flat.shape[:-1], g.shape[:-2])
    return np.concatenate([np.broadcast_to(flat, batch + flat.shape[-1:]), np.broadcast_to(g, batch + g.shape[-2:]).reshape(batch + (-1,))], axis=-1)


def kkt_residual_from_qp(qp: QpData, z: Trajectory, lam) -> np.ndarray:
    """KKT residual using a linearization taken at ``z`` (no callback evaluation)."""
    gx = qp.q + _mv(qp.Q, z.x)
    gu = qp.r + _mv(qp.R, z.u)
    grad = lagrangian_gradient(gx, gu, qp.A_plus, qp.A, qp.B, lam)
    g0 = z.x[..., 0, :] - qp.x_s
    gdyn = _mv(qp.A_plus, z.x[..., 1:, :]) + _mv(qp.A, z.x[..., :-1, :]) + _mv(qp.B, z.u) - qp.C
    g = np.concatenate([g0[..., None, :], gdyn], axis=-2)
    return np.concatenate([grad.flat(), g.reshape(g.shape[:-2] + (-1,))], axis=-1)


# ---------------------------------------------------------------------------
# Affine-quadratic problems and their file format
# ---------------------------------------------------------------------------


def affine_quadratic_layout(n_x, n_u) -> ParameterLayout:
    return ParameterLayout({STATE_COST: n_x, CONTROL_COST: n_u, DYNAMICS: n_x * n_x + n_x * n_u + n_x, INITIAL_STATE: n_x})


def affine_quadratic_ocp(n_x, n_u, T, cost_scale=0.5, name="affine_quadratic") -> OcpDefinition:
    """Diagonal quadratic costs and affine dynamics, all coefficients in theta.

    Stage costs are ``cost_scale * x'diag(Q)x`` and ``cost_scale * u'diag(R)u``.
    The dynamics segment stores ``vec(A), vec(B), b`` (row-major).
    """
    layout = affine_quadratic_layout(n_x, n_u)
    dyn = layout[DYNAMICS]
    a0, b0 = dyn.start, dyn.start + n_x * n_x
    c0 = b0 + n_x * n_u
    dynamics = AffineDynamics(n_x, n_u, slice(a0, b0), slice(b0, c0), slice(c0, dyn.stop))
    return OcpDefinition(
        n_x, n_u, T, layout,
        DiagonalQuadraticCost(layout[STATE_COST], cost_scale),
        DiagonalQuadraticCost(layout[CONTROL_COST], cost_scale),
        dynamics,
        name=name,
        meta={"cost_scale": cost_scale},
    )


def pack_affine_theta(layout, Q, R, A, B, b, x_s, log_space=()) -> ParameterVector:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    dyn = np.concatenate([A.reshape(A.shape[:-2] + (-1,)), B.reshape(B.shape[:-2] + (-1,)), np.asarray(b, dtype=float)], axis=-1)
    return ParameterVector.from_segments(layout, log_space, state_cost=Q, control_cost=R, dynamics=dyn, initial_state=x_s)


def unpack_affine_theta(ocp: OcpDefinition, theta) -> dict:
    th = theta_values(theta)
    A, B, b = ocp.dynamics.matrices(th)
    return {
        "Q": th[..., ocp.layout[STATE_COST]],
        "R": th[..., ocp.layout[CONTROL_COST]],
        "A": A,
        "B": B,
        "b_affine": b,
        "x_s": th[..., ocp.layout[INITIAL_STATE]],
    }


def save_problem(path, ocp: OcpDefinition, theta):
    """Write a single affine-quadratic instance as JSON."""
    th = theta_values(theta)
    if th.ndim != 1:
        raise ContractError("problem files hold a single instance")
    fields = unpack_affine_theta(ocp, th)
    doc = {
        "format": AFFINE_FORMAT,
        "n_x": ocp.n_x,
        "n_u": ocp.n_u,
        "T": ocp.T,
        "cost_scale": ocp.meta.get("cost_scale", 0.5),
    }
    doc.update({k: np.asarray(v).tolist() for k, v in fields.items()})
    Path(path).write_text(json.dumps(doc, indent=1))


def load_problem(path):
    """Read an affine-quadratic JSON problem; returns ``(ocp, ParameterVector)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ContractError(f"cannot read problem file {path}: {exc}") from exc
    return problem_from_dict(doc)


def problem_from_dict(doc):
    if doc.get("format") != AFFINE_FORMAT:
        raise ContractError(f"unsupported problem format {doc.get('format')!r}")
    try:
        n_x, n_u, T = int(doc["n_x"]), int(doc["n_u"]), int(doc["T"])
        ocp = affine_quadratic_ocp(n_x, n_u, T, float(doc.get("cost_scale", 0.5)))
        shapes = {"Q": (n_x,), "R": (n_u,), "A": (n_x, n_x), "B": (n_x, n_u), "b_affine": (n_x,), "x_s": (n_x,)}
        arrays = {}
        for key, shape in shapes.items():
            arrays[key] = np.asarray(doc[key], dtype=float)
            if arrays[key].shape != shape:
                raise ContractError(f"field {key!r} must have shape {shape}, got {arrays[key].shape}")
    except KeyError as exc:
        raise ContractError(f"problem file is missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ContractError(f"malformed problem file: {exc}") from exc
    theta = pack_affine_theta(ocp.layout, arrays["Q"], arrays["R"], arrays["A"], arrays["B"], arrays["b_affine"], arrays["x_s"])
    return ocp, theta
