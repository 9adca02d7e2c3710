import numpy as np
import pytest

from pcgmpc.problem import QpData, affine_quadratic_ocp, pack_affine_theta


def scalar_problem(x_s=1.0):
    """One step, costs x^2/2 and u^2/2, dynamics x1 = x0 + u0."""
    ocp = affine_quadratic_ocp(1, 1, 1, cost_scale=0.5, name="scalar")
    theta = pack_affine_theta(ocp.layout, [1.0], [1.0], [[1.0]], [[1.0]], [0.0], [x_s]).values
    return ocp, theta


def random_affine(rng, n_x, n_u, T, batch=(), cost_scale=0.5):
    """Random convex affine-quadratic instance(s) with stable-ish dynamics."""
    ocp = affine_quadratic_ocp(n_x, n_u, T, cost_scale=cost_scale)
    Q = rng.uniform(0.5, 2.0, batch + (n_x,))
    R = rng.uniform(0.5, 2.0, batch + (n_u,))
    A = np.eye(n_x) + 0.1 * rng.standard_normal(batch + (n_x, n_x))
    B = rng.standard_normal(batch + (n_x, n_u))
    b = 0.01 * rng.standard_normal(batch + (n_x,))
    x_s = rng.standard_normal(batch + (n_x,))
    return ocp, pack_affine_theta(ocp.layout, Q, R, A, B, b, x_s).values


def _spd(rng, shape, n):
    M = rng.standard_normal(shape + (n, n))
    return M @ np.swapaxes(M, -1, -2) / n + 0.5 * np.eye(n)


def random_qp(rng, n_x, n_u, T, implicit=False, batch=()):
    """Generic QP data: dense SPD cost blocks and, optionally, a non-identity A_plus."""
    A_plus = np.broadcast_to(np.eye(n_x), batch + (T, n_x, n_x)).copy()
    if implicit:
        A_plus += 0.2 * rng.standard_normal(A_plus.shape)
    return QpData(
        Q=_spd(rng, batch + (T + 1,), n_x),
        q=rng.standard_normal(batch + (T + 1, n_x)),
        R=_spd(rng, batch + (T,), n_u),
        r=rng.standard_normal(batch + (T, n_u)),
        A_plus=A_plus,
        A=-(np.eye(n_x) + 0.1 * rng.standard_normal(batch + (T, n_x, n_x))),
        B=-rng.standard_normal(batch + (T, n_x, n_u)),
        C=rng.standard_normal(batch + (T, n_x)),
        x_s=rng.standard_normal(batch + (n_x,)),
    )


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
