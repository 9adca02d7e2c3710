import numpy as np
import pytest

from pcgmpc.errors import ContractError, EvaluationError
from pcgmpc.oracle import dense_kkt_solve, qp_rhs, riccati_lqr
from pcgmpc.pcg import PcgConfig
from pcgmpc.problem import Trajectory, linearize
from pcgmpc.sqp import SqpConfig, constraint_violation, line_search, merit, policy_first_control, sqp_solve

from conftest import random_affine, rel_err, scalar_problem

ONE_STEP = SqpConfig(max_sqp_iters=1, step_candidates=(1.0,), line_search=False)
# Same single full step with PCG run to roundoff: isolates the pipeline from the stopping threshold.
ONE_STEP_TIGHT = SqpConfig(max_sqp_iters=1, step_candidates=(1.0,), line_search=False, pcg=PcgConfig(epsilon=1e-24))


def dense_reference(ocp, theta):
    qp = linearize(ocp, ocp.zeros(), theta)
    z, lam = dense_kkt_solve(qp, *qp_rhs(qp))
    return Trajectory.from_flat(z, ocp.n_x, ocp.n_u, ocp.T), lam.reshape(ocp.T + 1, ocp.n_x)


# -- merit -------------------------------------------------------------------


def test_merit_of_feasible_trajectory_is_cost(rng):
    ocp, theta = random_affine(rng, 3, 2, 4)
    z = ocp.rollout(ocp.initial_state(theta), rng.standard_normal((4, 2)), theta)
    assert abs(merit(ocp, z, 7.0, theta) - ocp.cost(z, theta)) <= 1e-12 * max(1.0, abs(ocp.cost(z, theta)))


def test_scalar_merit():
    ocp, theta = scalar_problem()
    assert merit(ocp, ocp.zeros(), 2.0, theta) == pytest.approx(2.0, abs=1e-15)


def test_merit_matches_direct_formula(rng):
    ocp, theta = random_affine(rng, 3, 2, 5)
    z = Trajectory(rng.standard_normal((6, 3)), rng.standard_normal((5, 2)))
    Q = theta[ocp.layout["state_cost"]]
    R = theta[ocp.layout["control_cost"]]
    cost = 0.5 * np.sum(z.x ** 2 * Q) + 0.5 * np.sum(z.u ** 2 * R)
    viol = np.abs(ocp.constraint_residual(z, theta)).sum()
    assert merit(ocp, z, 3.0, theta) == pytest.approx(cost + 3.0 * viol, rel=1e-13)
    assert constraint_violation(ocp, z, theta) == pytest.approx(viol, rel=1e-15)


def test_merit_rejects_negative_penalty_and_nonfinite():
    ocp, theta = scalar_problem()
    with pytest.raises(ContractError):
        merit(ocp, ocp.zeros(), -1.0, theta)
    bad = Trajectory(np.array([[np.inf], [0.0]]), np.array([[0.0]]))
    with pytest.raises(EvaluationError):
        merit(ocp, bad, 1.0, theta)


# -- line search -------------------------------------------------------------


def test_line_search_takes_full_step_on_convex_problem(rng):
    for _ in range(5):
        ocp, theta = random_affine(rng, 3, 2, 6)
        z_qp, lam = dense_reference(ocp, theta)
        ls = line_search(ocp, ocp.zeros(), z_qp, theta, lam_qp=lam)
        assert ls.alpha == 1.0
        assert ls.merit_new < ls.merit_old


def test_line_search_null_step_falls_back():
    ocp, theta = scalar_problem()
    z = Trajectory(np.array([[0.3], [0.2]]), np.array([[0.1]]))
    ls = line_search(ocp, z, z, theta)
    assert ls.alpha == 0.01
    assert np.array_equal(ls.z.x, z.x) and np.array_equal(ls.z.u, z.u)


def test_line_search_single_candidate_fallback():
    ocp, theta = scalar_problem()
    z = Trajectory(np.array([[0.3], [0.2]]), np.array([[0.1]]))
    ls = line_search(ocp, z, z, theta, SqpConfig(step_candidates=(1.0,)))
    assert ls.alpha == 1.0


def test_line_search_picks_largest_decreasing_candidate(rng):
    ocp, theta = random_affine(rng, 2, 1, 4)
    z_old = Trajectory(rng.standard_normal((5, 2)), rng.standard_normal((4, 1)))
    z_qp = Trajectory(rng.standard_normal((5, 2)), rng.standard_normal((4, 1)))
    cfg = SqpConfig()
    ls = line_search(ocp, z_old, z_qp, theta, cfg)
    ok = ls.decrease < 0
    expected = cfg.step_candidates[int(np.argmax(ok))] if ok.any() else cfg.step_candidates[-1]
    assert ls.alpha == expected


# -- sqp_solve on convex problems ----------------------------------------------


@pytest.mark.parametrize("size", [(4, 2, 10), (8, 4, 30)])
def test_one_iteration_matches_dense_oracle(rng, size):
    ocp, theta = random_affine(rng, *size)
    z_ref, lam_ref = dense_reference(ocp, theta)
    res = sqp_solve(ocp, theta, cfg=ONE_STEP)
    assert rel_err(res.z.flat(), z_ref.flat()) <= 1e-8
    assert rel_err(res.lam, lam_ref) <= 1e-8
    assert res.kkt_inf_norm <= 1e-6


@pytest.mark.parametrize("size", [(4, 2, 10), (8, 4, 30)])
def test_one_iteration_matches_dense_oracle_tight_pcg(rng, size):
    ocp, theta = random_affine(rng, *size)
    z_ref, lam_ref = dense_reference(ocp, theta)
    res = sqp_solve(ocp, theta, cfg=ONE_STEP_TIGHT)
    assert rel_err(res.z.flat(), z_ref.flat()) <= 1e-8
    assert rel_err(res.lam, lam_ref) <= 1e-8


def test_convex_solve_reaches_kkt_tolerance(rng):
    ocp, theta = random_affine(rng, 4, 2, 10)
    res = sqp_solve(ocp, theta)
    assert res.converged and res.kkt_inf_norm <= 1e-6


def test_exact_initial_guess_converges_immediately(rng):
    ocp, theta = random_affine(rng, 4, 2, 10)
    z_ref, lam_ref = dense_reference(ocp, theta)
    res = sqp_solve(ocp, theta, z_ref, lam_ref)
    assert res.sqp_iters == 1 and res.converged
    assert np.abs(res.z.flat() - z_ref.flat()).max() <= 1e-10


def test_solution_matches_riccati(rng):
    ocp, theta = random_affine(rng, 8, 4, 30)
    ref = riccati_lqr(linearize(ocp, ocp.zeros(), theta))
    res = sqp_solve(ocp, theta, cfg=ONE_STEP)
    assert rel_err(res.z.flat(), ref.flat()) <= 1e-8


def test_solution_matches_riccati_tight_pcg(rng):
    ocp, theta = random_affine(rng, 8, 4, 30)
    ref = riccati_lqr(linearize(ocp, ocp.zeros(), theta))
    res = sqp_solve(ocp, theta, cfg=ONE_STEP_TIGHT)
    assert rel_err(res.z.flat(), ref.flat()) <= 1e-8


def test_warm_start_from_solution_is_consistent(rng):
    ocp, theta = random_affine(rng, 4, 2, 10)
    first = sqp_solve(ocp, theta)
    again = sqp_solve(ocp, theta, first.z, first.lam)
    assert again.sqp_iters == 1
    assert np.abs(again.z.flat() - first.z.flat()).max() <= 1e-8
    assert again.pcg_iters <= first.pcg_iters


def test_merit_never_increases(rng):
    ocp, theta = random_affine(rng, 4, 2, 10)
    res = sqp_solve(ocp, theta)
    for h in res.history[:-1]:
        if h["accepted"]:
            assert h["merit_new"] <= h["merit_old"]


def test_batched_solve_matches_individual(rng):
    ocp, theta = random_affine(rng, 3, 2, 6, batch=(4,))
    res = sqp_solve(ocp, theta)
    for k in range(4):
        one = sqp_solve(ocp, theta[k])
        assert np.array_equal(one.z.flat(), res.z.take(k).flat())
        assert one.sqp_iters == res.sqp_iters[k]


def test_config_validation():
    with pytest.raises(ValueError):
        SqpConfig(step_candidates=(0.5, 1.0))
    with pytest.raises(ValueError):
        SqpConfig(eta_armijo=1.0)
    with pytest.raises(ValueError):
        SqpConfig(max_sqp_iters=0)


def test_nonfinite_initial_guess_rejected():
    ocp, theta = scalar_problem()
    with pytest.raises(ContractError):
        sqp_solve(ocp, theta, lam0=np.full((2, 1), np.nan))


def test_scalar_policy():
    ocp, theta = scalar_problem()
    res = sqp_solve(ocp, theta, cfg=ONE_STEP)
    assert policy_first_control(res) == pytest.approx([-0.5], abs=1e-12)


# -- nonlinear dynamics --------------------------------------------------------


def test_cartpole_five_iterations():
    """Warm start from the expert solution after a 10% change of the cost weights."""
    from pcgmpc.bench.problems import CARTPOLE_THETA_STAR, IL_CFG, cartpole_theta, gen_cartpole

    bundle = gen_cartpole(0, n_demos=1)
    theta = cartpole_theta(bundle.ocp, CARTPOLE_THETA_STAR * 1.1, bundle.x0)
    res = sqp_solve(bundle.ocp, theta, bundle.expert_z, bundle.expert_lam, IL_CFG)
    kkt = np.array([h["kkt_inf_norm"] for h in res.history]).reshape(len(res.history), -1)[:, 0]
    assert len(kkt) == 6
    for k, h in enumerate(res.history[:-1]):
        if np.all(h["accepted"]):
            assert kkt[k + 1] <= kkt[k]
    assert kkt[-1] <= 1e-4
