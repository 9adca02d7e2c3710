import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcgmpc.errors import ContractError, PcgBreakdown
from pcgmpc.oracle import dense_schur
from pcgmpc.pcg import PcgConfig, pcg_solve
from pcgmpc.problem import linearize
from pcgmpc.schur import BlockTridiag, SchurSystem, assemble_gamma, assemble_schur

from conftest import random_qp, rel_err, scalar_problem


def identity_system(N, n):
    eye = BlockTridiag(np.broadcast_to(np.eye(n), (N, n, n)).copy(), np.zeros((N - 1, n, n)))
    P = BlockTridiag(eye.diag, eye.sub, eye.sub)
    return SchurSystem(eye, P, None, None, None)


def unpreconditioned(system):
    N, n = system.S.n_blocks, system.S.block_size
    return SchurSystem(system.S, identity_system(N, n).precond, system.Q_inv, system.R_inv, system.qp)


def test_identity_system_one_iteration(rng):
    g = rng.standard_normal((4, 3))
    out = pcg_solve(identity_system(4, 3), g, np.zeros((4, 3)))
    assert out.iters == 1 and out.converged
    assert np.allclose(out.lam, g, rtol=0, atol=1e-15)


def test_scalar_system():
    ocp, theta = scalar_problem()
    system = assemble_schur(linearize(ocp, ocp.zeros(), theta))
    out = pcg_solve(system, np.array([[-1.0], [0.0]]), np.zeros((2, 1)))
    assert out.iters <= 2
    assert np.allclose(out.lam.ravel(), [-1.5, -0.5], rtol=0, atol=1e-12)


def test_exact_warm_start_costs_nothing(rng):
    qp = random_qp(rng, 4, 2, 10)
    system = assemble_schur(qp)
    M, gamma = dense_schur(qp)
    lam = np.linalg.solve(M, -gamma).reshape(11, 4)
    out = pcg_solve(system, assemble_gamma(system, qp.b, qp.d), lam, PcgConfig(epsilon=1e-20))
    assert out.iters == 0 and out.converged
    assert np.array_equal(out.lam, lam)


def test_random_instance_matches_dense(rng):
    qp = random_qp(rng, 8, 4, 30)
    system = assemble_schur(qp)
    M, gamma = dense_schur(qp)
    ref = np.linalg.solve(M, -gamma)
    out = pcg_solve(system, assemble_gamma(system, qp.b, qp.d), np.zeros((31, 8)), PcgConfig(epsilon=1e-12))
    assert rel_err(out.lam.ravel(), ref) <= 1e-8


def test_random_instance_matches_dense_tight_epsilon(rng):
    qp = random_qp(rng, 8, 4, 30)
    system = assemble_schur(qp)
    M, gamma = dense_schur(qp)
    ref = np.linalg.solve(M, -gamma)
    out = pcg_solve(system, assemble_gamma(system, qp.b, qp.d), np.zeros((31, 8)), PcgConfig(epsilon=1e-24))
    assert rel_err(out.lam.ravel(), ref) <= 1e-8


def test_converged_flag_matches_eta(rng):
    qp = random_qp(rng, 4, 2, 10)
    system = assemble_schur(qp)
    out = pcg_solve(system, assemble_gamma(system, qp.b, qp.d), np.zeros((11, 4)), PcgConfig(epsilon=1e-10, max_iters=2))
    assert out.iters == 2
    assert bool(out.converged) == bool(out.final_eta <= 1e-10)


def test_finite_termination(rng):
    qp = random_qp(rng, 2, 1, 3)
    system = assemble_schur(qp)
    out = pcg_solve(system, assemble_gamma(system, qp.b, qp.d), np.zeros((4, 2)), PcgConfig(epsilon=1e-24))
    assert out.converged and out.iters <= 8 + 2


def test_default_cap():
    assert PcgConfig().cap(31, 8) == 2 * 31 * 8
    assert PcgConfig(max_iters=5).cap(31, 8) == 5


def test_config_validation():
    with pytest.raises(ValueError):
        PcgConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        PcgConfig(max_iters=0)


def test_breakdown_on_indefinite_system():
    S = BlockTridiag(np.array([[[1.0]], [[-1.0]]]), np.zeros((1, 1, 1)))
    P = BlockTridiag(np.ones((2, 1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
    with pytest.raises(PcgBreakdown) as exc:
        pcg_solve(SchurSystem(S, P, None, None, None), np.array([[0.0], [1.0]]), np.zeros((2, 1)))
    assert exc.value.iteration == 1


def test_shape_and_finiteness_checks(rng):
    system = identity_system(4, 3)
    with pytest.raises(ContractError):
        pcg_solve(system, np.zeros((5, 3)), np.zeros((5, 3)))
    with pytest.raises(ContractError):
        pcg_solve(system, np.zeros((4, 3)), np.full((4, 3), np.nan))


def test_eta_nonincreasing_with_slack(rng):
    qp = random_qp(rng, 6, 3, 20)
    system = assemble_schur(qp)
    out = pcg_solve(system, assemble_gamma(system, qp.b, qp.d), np.zeros((21, 6)), PcgConfig(epsilon=1e-20), record_history=True)
    h = np.array(out.eta_history)
    # preconditioned CG is not monotone in r'Pr in general; check the envelope
    running_min = np.minimum.accumulate(h)
    assert h[-1] <= running_min[-1] * 1.1
    assert np.mean(h[1:] <= h[:-1] * 1.1) >= 0.5


def test_preconditioner_effectiveness():
    g = np.random.default_rng(7)
    with_p, without_p = [], []
    for _ in range(50):
        qp = random_qp(g, 8, 4, 30)
        system = assemble_schur(qp)
        rhs = assemble_gamma(system, qp.b, qp.d)
        cfg = PcgConfig(epsilon=1e-12)
        with_p.append(int(pcg_solve(system, rhs, np.zeros((31, 8)), cfg).iters))
        without_p.append(int(pcg_solve(unpreconditioned(system), rhs, np.zeros((31, 8)), cfg).iters))
    assert np.median(with_p) <= np.median(without_p)


def test_batched_equals_individual(rng):
    qp = random_qp(rng, 3, 2, 8, batch=(5,))
    system = assemble_schur(qp)
    rhs = assemble_gamma(system, qp.b, qp.d)
    out = pcg_solve(system, rhs, np.zeros((5, 9, 3)))
    for k in range(5):
        one = pcg_solve(system.take(k), rhs[k], np.zeros((9, 3)))
        assert np.array_equal(one.lam, out.lam[k])
        assert one.iters == out.iters[k]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_residual_consistent_with_eta(n_x, n_u, T, seed):
    g = np.random.default_rng(seed)
    qp = random_qp(g, n_x, n_u, T, implicit=bool(seed % 2))
    system = assemble_schur(qp)
    rhs = assemble_gamma(system, qp.b, qp.d)
    out = pcg_solve(system, rhs, np.zeros((T + 1, n_x)), PcgConfig(epsilon=1e-18))
    M = system.S.to_dense()
    ref = np.linalg.solve(M, rhs.ravel())
    assert out.converged
    assert rel_err(out.lam.ravel(), ref) <= 1e-5
