import json

import numpy as np
import pytest

from pcgmpc.bench import io
from pcgmpc.bench.cli import main
from pcgmpc.bench.problems import (
    CARTPOLE_THETA_STAR,
    CartPole,
    attitude_ocp,
    cartpole_ocp,
    gen_attitude,
    gen_cartpole,
    gen_linear,
    preset,
    spectral_radius,
)
from pcgmpc.bench.timing import pcg_study, time_harness
from pcgmpc.bench.train import il_loss_and_grad, train_il, train_rl
from pcgmpc.oracle import fd_jacobian
from pcgmpc.problem import load_problem

from conftest import rel_err


@pytest.fixture(scope="module")
def small_il():
    return gen_cartpole(0, n_demos=4, T=20, dt=0.05)


# -- generators --------------------------------------------------------------


def test_gen_linear_is_deterministic():
    a = gen_linear(preset("problem1", seed=3, B=4))
    b = gen_linear(preset("problem1", seed=3, B=4))
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.x0, b.x0)
    c = gen_linear(preset("problem1", seed=4, B=4))
    assert not np.array_equal(a.theta, c.theta)


def test_gen_linear_spectral_radius():
    for name in ("problem1", "problem2", "problem3"):
        bundle = gen_linear(preset(name, seed=1))
        A = bundle.theta[:, bundle.ocp.layout["dynamics"]][:, : bundle.ocp.n_x**2].reshape(-1, bundle.ocp.n_x, bundle.ocp.n_x)
        assert np.all(spectral_radius(A) <= 0.99 + 1e-12)
        assert np.array_equal(bundle.theta[:, bundle.ocp.layout["state_cost"]], np.ones((bundle.theta.shape[0], bundle.ocp.n_x)))


def test_preset_problem1_dimensions():
    s = preset("problem1")
    assert (s.n_x, s.n_u, s.T, s.H, s.B) == (8, 4, 40, 50, 64)


def test_cartpole_equilibrium_and_jacobians():
    cp = CartPole()
    xdot, _, _ = cp.rates(np.zeros(4), np.zeros(1))
    assert np.array_equal(xdot, np.zeros(4))
    ocp = cartpole_ocp(T=1)
    th = np.zeros(ocp.layout.size)
    assert np.array_equal(ocp.dynamics.residual(np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((1, 1)), th), np.zeros((1, 4)))
    rng = np.random.default_rng(0)
    for x in [np.zeros(4), rng.uniform(-1, 1, 4) * [0.5, 0.5, np.pi, 1.0]]:
        u = rng.standard_normal(1)
        _, fx, fu = cp.step_jacobians(x, u, th)
        assert rel_err(fx, fd_jacobian(lambda v: cp.step_jacobians(v, u, th)[0], x)) <= 1e-5
        assert rel_err(fu, fd_jacobian(lambda v: cp.step_jacobians(x, v, th)[0], u)) <= 1e-5


def test_cartpole_printed_equations():
    """The cart acceleration has no control term, as printed."""
    cp = CartPole()
    x = np.array([0.1, 0.2, 0.7, -0.4])
    a, _, _ = cp.rates(x, np.array([0.0]))
    b, _, _ = cp.rates(x, np.array([5.0]))
    assert a[1] == b[1] and a[3] != b[3]


def test_expert_demonstrations(small_il):
    ocp = small_il.ocp
    z = small_il.expert_z
    th = np.zeros(ocp.layout.size)
    res = ocp.dynamics.residual(z.x[:, 1:], z.x[:, :-1], z.u, th)
    assert np.abs(res).max() <= 1e-6
    assert np.array_equal(small_il.theta_star, [1.0, 2.0, 1.5, 1.0])
    assert np.abs(z.x[:, 0] - small_il.x0).max() <= 1e-9


def test_attitude_dynamics():
    ocp = attitude_ocp(T=1)
    dyn = ocp.dynamics
    th = np.zeros(ocp.layout.size)
    rng = np.random.default_rng(0)
    tau = rng.standard_normal(3)
    J = np.array([1.0, 2.0, 3.0])
    th[ocp.layout["inertia"]] = J
    # zero rate: the gyroscopic term vanishes
    step = dyn.step(np.zeros((1, 3)), tau[None], th)[0]
    assert np.allclose(step, 0.1 * tau / J, rtol=0, atol=1e-15)
    # unit inertia: w x w = 0
    th[ocp.layout["inertia"]] = 1.0
    w = rng.standard_normal(3)
    assert np.allclose(dyn.step(w[None], tau[None], th)[0], w + 0.1 * tau, rtol=0, atol=1e-15)
    # independent evaluation of J wdot = J w x w + tau
    th[ocp.layout["inertia"]] = J
    for w in [np.array([1.0, 0.0, 0.0]), rng.standard_normal(3)]:
        Jm = np.diag(J)
        ref = w + 0.1 * np.linalg.solve(Jm, np.cross(Jm @ w, w) + tau)
        assert np.allclose(dyn.step(w[None], tau[None], th)[0], ref, rtol=0, atol=1e-14)


def test_attitude_jacobians_and_param_vjp():
    ocp = attitude_ocp(T=2)
    rng = np.random.default_rng(1)
    th = ocp.layout.pack(state_cost=np.ones(3), control_cost=np.ones(3), inertia=rng.uniform(0.1, 10, 3), initial_state=rng.uniform(-1, 1, 3))
    x, u = rng.standard_normal(3), rng.standard_normal(3)
    _, fx, fu = ocp.dynamics.step_jacobians(x[None], u[None], th)
    assert rel_err(fx[0], fd_jacobian(lambda v: ocp.dynamics.step(v[None], u[None], th)[0], x)) <= 1e-5
    assert rel_err(fu[0], fd_jacobian(lambda v: ocp.dynamics.step(x[None], v[None], th)[0], u)) <= 1e-5


def test_gen_attitude():
    b = gen_attitude(0)
    assert b.theta.shape[0] == 16 and b.H == 25 and b.ocp.T == 25
    J = b.theta[:, b.ocp.layout["inertia"]]
    assert np.all((J >= 0.1) & (J <= 10)) and np.all(np.abs(b.x0) <= 1)
    assert np.array_equal(gen_attitude(0).theta, b.theta)
    assert b.reward.wx == 0.1 and b.reward.wu == 1.0


# -- training loops ----------------------------------------------------------


def test_il_at_optimum(small_il):
    loss, grad, _ = il_loss_and_grad(small_il, CARTPOLE_THETA_STAR)
    assert loss <= 1e-8
    assert np.linalg.norm(grad) <= 1e-6


def test_il_single_demo_descends():
    bundle = gen_cartpole(1, n_demos=1, T=20, dt=0.05)
    rep = train_il(bundle, epochs=10, lr=1e-3, seed=0)
    loss = rep.series("loss")
    assert not rep.failed and len(loss) == 11
    assert np.all(np.diff(loss) < 0)
    assert np.all(np.diff(rep.series("epoch")) == 1)


def test_rl_zero_learning_rate_is_constant():
    bundle = gen_linear(preset("problem2", seed=0, B=4, H=5))
    rep = train_rl(bundle, steps=3, lr=0.0)
    r = rep.series("reward")
    assert np.all(r == r[0])


@pytest.mark.slow
def test_rl_linear_improves():
    bundle = gen_linear(preset("problem2", seed=0))
    rep = train_rl(bundle, steps=50, lr=1e-2)
    r = rep.series("reward")
    assert not rep.failed and r[-1] > r[0]


# -- timing, io and cli ------------------------------------------------------


def test_time_harness_single_repeat():
    records, summary = time_harness("problem1", repeats=1, batch=2)
    assert len(records) == 1 and summary["repeats"] == 1
    again, _ = time_harness("problem1", repeats=1, batch=2)
    assert records[0]["forward_pcg_iters"] == again[0]["forward_pcg_iters"]
    assert records[0]["backward_pcg_iters"] == again[0]["backward_pcg_iters"]


def test_pcg_study_emits_speedups():
    records, summary = pcg_study(1e-4, "problem1", steps=4, batch=2)
    assert len(records) == 4
    for p in ("forward", "backward"):
        assert {"iter_speedup", "time_speedup", "share_warm_le_cold", "mean_iter_reduction"} <= set(summary[p])


def test_io_roundtrip(tmp_path):
    records = [{"a": 1, "b": 0.1 + 0.2, "c": [1, 2]}, {"a": 2, "b": 1e-300, "d": "x"}]
    path = io.emit(tmp_path, "run", {"k": np.float64(1.5), "arr": np.arange(3)}, {"series": records})
    meta, series = io.load(path)
    assert meta["k"] == 1.5 and meta["arr"] == [0, 1, 2]
    got = series["series"]
    assert got[0]["b"] == 0.1 + 0.2 and got[1]["b"] == 1e-300 and got[1]["d"] == "x" and got[0]["c"] == [1, 2]


def test_cli_make_solve_grad_check(tmp_path, capsys):
    prob = tmp_path / "p.json"
    assert main(["make-problem", str(prob), "--preset", "problem2"]) == 0
    ocp, _ = load_problem(prob)
    assert ocp.T == preset("problem2").T
    assert main(["--out", str(tmp_path), "solve", str(prob)]) == 0
    assert json.loads((tmp_path / "solve.json").read_text())["meta"]["converged"]
    small = tmp_path / "s.json"
    small.write_text(json.dumps({
        "format": "pcgmpc.affine-quadratic/1", "n_x": 2, "n_u": 1, "T": 3, "cost_scale": 1.0,
        "Q": [1.0, 2.0], "R": [0.5], "A": [[1.0, 0.1], [0.0, 1.0]], "B": [[0.0], [0.1]],
        "b_affine": [0.0, 0.01], "x_s": [1.0, -1.0],
    }))
    capsys.readouterr()
    assert main(["--out", str(tmp_path), "grad-check", str(small)]) == 0
    assert json.loads(capsys.readouterr().out)["max_rel_err"] <= 1e-5


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"format\": \"nope\"}")
    assert main(["solve", str(bad)]) == 3
    assert main(["solve", str(tmp_path / "missing.json")]) == 3
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 3
    with pytest.raises(SystemExit) as exc:
        main(["bench-linear", "--preset", "problem1", "--steps", "0"])
    assert exc.value.code == 3


def test_cli_solver_failure_exit_code(tmp_path):
    prob = tmp_path / "nan.json"
    prob.write_text(json.dumps({
        "format": "pcgmpc.affine-quadratic/1", "n_x": 1, "n_u": 1, "T": 2, "cost_scale": 1.0,
        "Q": [1.0], "R": [1.0], "A": [[1e300]], "B": [[1e300]], "b_affine": [0.0], "x_s": [1e300],
    }))
    assert main(["--out", str(tmp_path), "solve", str(prob)]) == 2
