"""Command-line entry point.

Exit codes: 0 on success, 2 when a solve fails, 3 on invalid input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict

import numpy as np

from pcgmpc.backward import FD_PCG, fd_check
from pcgmpc.batch import WORKERS_ENV, default_workers
from pcgmpc.errors import ContractError, SolverError
from pcgmpc.problem import load_problem, save_problem
from pcgmpc.sqp import SqpConfig, sqp_solve

from pcgmpc.bench import io
from pcgmpc.bench.problems import PRESETS, gen_attitude, gen_cartpole, gen_linear, preset

EXIT_OK, EXIT_SOLVER, EXIT_INPUT = 0, 2, 3

log = logging.getLogger("pcgmpc")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _finite_float(s):
    v = float(s)
    if not np.isfinite(v):
        raise argparse.ArgumentTypeError("must be finite")
    return v


def build_parser():
    p = _Parser(prog="pcgmpc", description="Differentiable optimal-control solver and benchmarks.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive_int, default=None, help=f"parallel workers (default: ${WORKERS_ENV} or 1)")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="solve an affine-quadratic problem file")
    s.add_argument("problem")
    s.add_argument("--max-iters", type=_positive_int, default=20)

    s = sub.add_parser("grad-check", help="compare backward gradients with finite differences")
    s.add_argument("problem")
    s.add_argument("--step", type=_finite_float, default=1e-6)

    s = sub.add_parser("make-problem", help="write a random affine-quadratic problem file")
    s.add_argument("path")
    s.add_argument("--preset", choices=sorted(PRESETS), default="problem1")

    s = sub.add_parser("bench-linear", help="random linear problems: RL training or timing")
    s.add_argument("--preset", choices=sorted(PRESETS), required=True)
    s.add_argument("--mode", choices=("rl", "timing"), default="rl")
    s.add_argument("--steps", type=_positive_int, default=50)
    s.add_argument("--lr", type=_finite_float, default=1e-2)
    s.add_argument("--repeats", type=_positive_int, default=10)
    s.add_argument("--batch", type=_positive_int, default=None, help="override the preset batch size")

    s = sub.add_parser("bench-cartpole-il", help="cart-pole imitation learning")
    s.add_argument("--epochs", type=_positive_int, default=200)
    s.add_argument("--lr", type=_finite_float, default=1e-2)
    s.add_argument("--demos", type=_positive_int, default=32)

    s = sub.add_parser("bench-attitude-rl", help="attitude stabilization RL")
    s.add_argument("--steps", type=_positive_int, default=50)
    s.add_argument("--lr", type=_finite_float, default=1e-2)

    s = sub.add_parser("pcg-study", help="warm- versus cold-started PCG iteration counts")
    s.add_argument("--tol", type=_finite_float, default=1e-4)
    s.add_argument("--preset", choices=sorted(PRESETS), default="problem1")
    s.add_argument("--steps", type=_positive_int, default=50)
    s.add_argument("--batch", type=_positive_int, default=None)
    return p


def _print(doc):
    print(json.dumps(doc, indent=1, sort_keys=True, default=lambda o: np.asarray(o).tolist()))


def _solve(args, workers):
    ocp, theta = load_problem(args.problem)
    res = sqp_solve(ocp, theta, cfg=SqpConfig(max_sqp_iters=args.max_iters))
    summary = {
        "converged": bool(res.converged),
        "sqp_iters": int(res.sqp_iters),
        "pcg_iters": int(res.pcg_iters),
        "kkt_inf_norm": float(res.kkt_inf_norm),
    }
    path = io.emit(args.out, "solve", {**summary, "problem": args.problem}, {
        "states": [dict(t=t, **{f"x{i}": v for i, v in enumerate(x)}) for t, x in enumerate(res.z.x)],
        "controls": [dict(t=t, **{f"u{i}": v for i, v in enumerate(u)}) for t, u in enumerate(res.z.u)],
    })
    _print({**summary, "output": str(path)})
    return EXIT_OK


def _grad_check(args, workers):
    ocp, theta = load_problem(args.problem)
    cfg = SqpConfig(pcg=FD_PCG)
    res = sqp_solve(ocp, theta, cfg=cfg)
    # Tracking loss against a seeded random reference.  A plain 0.5|z|^2 is
    # stationary in the cost weights when Q = R = I, which makes a poor check.
    ref = np.random.default_rng(args.seed).standard_normal(res.z.flat().shape)
    err, analytic, numeric = fd_check(
        res, lambda z: 0.5 * float(np.sum((z.flat() - ref) ** 2)), theta, args.step,
        ocp=ocp, sqp_cfg=cfg, loss_grad=lambda z: z.flat() - ref,
    )
    rows = [{"index": i, "analytic": a, "numeric": n} for i, (a, n) in enumerate(zip(analytic, numeric))]
    path = io.emit(args.out, "grad_check", {"max_rel_err": err, "step": args.step, "problem": args.problem}, {"gradient": rows})
    _print({"max_rel_err": err, "output": str(path)})
    return EXIT_OK


def _make_problem(args, workers):
    bundle = gen_linear(preset(args.preset, args.seed, B=1))
    save_problem(args.path, bundle.ocp, bundle.theta[0])
    _print({"written": args.path})
    return EXIT_OK


def _report_exit(report):
    if report.failed:
        log.error("%s", report.message)
        return EXIT_SOLVER
    return EXIT_OK


def _bench_linear(args, workers):
    from pcgmpc.bench.timing import time_harness
    from pcgmpc.bench.train import train_rl

    if args.mode == "timing":
        records, summary = time_harness(args.preset, args.repeats, args.seed, workers, batch=args.batch)
        path = io.emit(args.out, f"linear_timing_{args.preset}", {**summary, "seed": args.seed, "workers": workers}, {"repeats": records})
        _print({**summary, "output": str(path)})
        return EXIT_OK
    spec = preset(args.preset, args.seed, **({} if args.batch is None else {"B": args.batch}))
    report = train_rl(gen_linear(spec), args.steps, args.lr, workers)
    path = io.emit(args.out, f"linear_rl_{args.preset}", {**report.meta, "spec": asdict(spec), "failed": report.failed, "message": report.message, "workers": workers}, {"training": report.records})
    _print({"initial_reward": report.records[0]["reward"], "final_reward": report.records[-1]["reward"], "output": str(path)})
    return _report_exit(report)


def _bench_cartpole(args, workers):
    from pcgmpc.bench.train import train_il

    bundle = gen_cartpole(args.seed, n_demos=args.demos, workers=workers)
    report = train_il(bundle, args.epochs, args.lr, seed=args.seed, workers=workers)
    path = io.emit(args.out, "cartpole_il", {**report.meta, "failed": report.failed, "message": report.message, "workers": workers}, {"training": report.records})
    ml = report.series("model_loss")
    _print({"initial_model_loss": ml[0], "final_model_loss": ml[-1], "reduction": 1 - ml[-1] / ml[0], "output": str(path)})
    return _report_exit(report)


def _bench_attitude(args, workers):
    from pcgmpc.bench.train import train_rl

    report = train_rl(gen_attitude(args.seed), args.steps, args.lr, workers)
    path = io.emit(args.out, "attitude_rl", {**report.meta, "failed": report.failed, "message": report.message, "workers": workers}, {"training": report.records})
    _print({"initial_reward": report.records[0]["reward"], "final_reward": report.records[-1]["reward"], "output": str(path)})
    return _report_exit(report)


def _pcg_study(args, workers):
    from pcgmpc.bench.timing import pcg_study

    records, summary = pcg_study(args.tol, args.preset, args.steps, args.seed, args.batch, workers=workers)
    path = io.emit(args.out, f"pcg_study_{args.tol:g}", {**summary, "preset": args.preset, "seed": args.seed, "workers": workers}, {"steps": records})
    _print({**summary, "output": str(path)})
    return EXIT_OK


COMMANDS = {
    "solve": _solve,
    "grad-check": _grad_check,
    "make-problem": _make_problem,
    "bench-linear": _bench_linear,
    "bench-cartpole-il": _bench_cartpole,
    "bench-attitude-rl": _bench_attitude,
    "pcg-study": _pcg_study,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    workers = args.workers or default_workers()
    try:
        return COMMANDS[args.command](args, workers)
    except ContractError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
