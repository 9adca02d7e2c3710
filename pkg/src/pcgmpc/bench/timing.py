"""Wall-clock and iteration-count harnesses."""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from pcgmpc.batch import DEFAULT_CHUNK, backward_stacked, solve_stacked
from pcgmpc.pcg import PcgConfig
from pcgmpc.problem import Trajectory

from pcgmpc.bench.problems import PRESETS, gen_linear, preset


def _stats(values):
    v = np.asarray(values, dtype=float)
    return {"median": float(np.median(v)), "mean": float(v.mean()), "two_sigma": float(2 * v.std())}


def _tracking_loss_grad(res, rng):
    """Cotangent of a fixed random quadratic tracking loss on the trajectory."""
    ref = Trajectory(rng.standard_normal(res.z.x.shape), rng.standard_normal(res.z.u.shape))
    return res.z - ref


def time_harness(task="problem1", repeats=10, seed=0, workers=None, chunk_size=DEFAULT_CHUNK, batch=None):
    """Time one batched forward and backward pass of a linear preset, ``repeats`` times.

    Each repeat uses seed ``seed + k``.  Returns per-repeat records and a
    summary with wall-time statistics and a PCG iteration histogram.
    """
    if task not in PRESETS:
        raise ValueError(f"unknown task {task!r}")
    records = []
    fwd_iters, bwd_iters = [], []
    for k in range(repeats):
        spec = preset(task, seed + k, **({} if batch is None else {"B": batch}))
        bundle = gen_linear(spec)
        t0 = time.perf_counter()
        res = solve_stacked(bundle.ocp, bundle.theta, cfg=bundle.cfg, workers=workers, chunk_size=chunk_size)
        t1 = time.perf_counter()
        dl = _tracking_loss_grad(res, np.random.default_rng(spec.seed))
        br = backward_stacked(res, dl, bundle.ocp, bundle.theta, None, bundle.cfg.pcg, workers, chunk_size)
        t2 = time.perf_counter()
        fwd_iters.extend(res.pcg_iters.tolist())
        bwd_iters.extend(br.pcg_iters.tolist())
        records.append({
            "repeat": k, "seed": spec.seed, "forward_s": t1 - t0, "backward_s": t2 - t1,
            "sqp_iters": float(res.sqp_iters.mean()),
            "forward_pcg_iters": float(res.pcg_iters.mean()), "backward_pcg_iters": float(br.pcg_iters.mean()),
        })
    hist = {}
    for name, it in (("forward", fwd_iters), ("backward", bwd_iters)):
        counts = np.bincount(np.asarray(it, dtype=int))
        hist[name] = {int(i): int(c) for i, c in enumerate(counts) if c}
    summary = {
        "task": task,
        "repeats": repeats,
        "forward_s": _stats([r["forward_s"] for r in records]),
        "backward_s": _stats([r["backward_s"] for r in records]),
        "pcg_histogram": hist,
    }
    return records, summary


def pcg_study(tol=1e-4, preset_name="problem1", steps=50, seed=0, batch=None, perturbation=0.01, workers=None, chunk_size=DEFAULT_CHUNK):
    """Warm- versus cold-started PCG over a slowly drifting sequence of instances.

    Every coefficient is multiplied by ``1 + perturbation * U(-1, 1)`` at each
    step.  The warm forward solve starts from the previous step's ``(z, lam)``
    and the warm backward solve from the previous ``lam~``; cold solves start
    from zeros.  Records per-step iteration counts and times for both passes.
    """
    spec = preset(preset_name, seed, **({} if batch is None else {"B": batch}))
    bundle = gen_linear(spec)
    cfg = replace(bundle.cfg, pcg=PcgConfig(epsilon=tol))
    rng = np.random.default_rng(seed + 1)
    ocp, theta = bundle.ocp, bundle.theta.copy()
    loss_rng_seed = seed + 2
    prev = prev_lt = None
    records = []
    for k in range(steps):
        if k:
            theta = theta * (1.0 + perturbation * rng.uniform(-1.0, 1.0, size=theta.shape))
        row = {"step": k}
        out = {}
        for mode in ("cold", "warm"):
            warm = mode == "warm" and prev is not None
            t0 = time.perf_counter()
            res = solve_stacked(ocp, theta, prev.z if warm else None, prev.lam if warm else None, cfg, workers, chunk_size)
            t1 = time.perf_counter()
            dl = _tracking_loss_grad(res, np.random.default_rng(loss_rng_seed))
            br = backward_stacked(res, dl, ocp, theta, prev_lt if warm else None, cfg.pcg, workers, chunk_size)
            t2 = time.perf_counter()
            out[mode] = (res, br)
            row[f"{mode}_forward_iters"] = res.pcg_iters.tolist()
            row[f"{mode}_backward_iters"] = br.pcg_iters.tolist()
            row[f"{mode}_forward_s"] = t1 - t0
            row[f"{mode}_backward_s"] = t2 - t1
        records.append(row)
        prev, prev_lt = out["warm"][0], out["warm"][1].lambda_tilde
    return records, summarize_pcg_study(records, tol)


def summarize_pcg_study(records, tol):
    """Speedup ratios ``(cold - warm) / cold`` and the share of solves where warm <= cold.

    Step 0 has no previous solution and is excluded.
    """
    rows = records[1:]
    summary = {"tol": tol, "steps": len(records)}
    for p in ("forward", "backward"):
        cold = np.array([r[f"cold_{p}_iters"] for r in rows], dtype=float)
        warm = np.array([r[f"warm_{p}_iters"] for r in rows], dtype=float)
        ct = np.array([r[f"cold_{p}_s"] for r in rows])
        wt = np.array([r[f"warm_{p}_s"] for r in rows])
        summary[p] = {
            "share_warm_le_cold": float(np.mean(warm <= cold)) if cold.size else float("nan"),
            "mean_iter_reduction": float(np.mean(cold - warm)) if cold.size else float("nan"),
            "iter_speedup": float((cold.sum() - warm.sum()) / cold.sum()) if cold.sum() else 0.0,
            "time_speedup": float((ct.sum() - wt.sum()) / ct.sum()) if ct.sum() else 0.0,
            "mean_cold_iters": float(cold.mean()) if cold.size else float("nan"),
            "mean_warm_iters": float(warm.mean()) if warm.size else float("nan"),
        }
    return summary
