"""Compiled vs numpy kernels: displacement error batches and vectorised env steps.

    python3 benchmarks/bench_kernels.py [--repeats 5]

Both backends are timed in the same process by swapping ``kernels.backend``,
and their outputs are compared so a speedup never hides a divergence.
"""
import argparse
import time

import numpy as np

from ballista import kernels
from ballista.ballistics import BallisticModel, displacement_error_batch, random_cases
from ballista.config import RunConfig
from ballista.env import ACT_DIM, VecThrowEnv


def _best_of(fn, repeats):
    times = []
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def bench_error(n, model, repeats):
    pos, vel, tgt, _ = random_cases(n, np.random.default_rng(0))
    tgt[:, 2] = np.abs(tgt[:, 2])
    return _best_of(lambda: displacement_error_batch(pos, vel, tgt, model), repeats)


def bench_env(num_envs, steps, repeats):
    cfg = RunConfig(env_count=num_envs)
    rng = np.random.default_rng(1)
    actions = rng.uniform(-1.0, 1.0, (steps, num_envs, ACT_DIM))

    def run():
        env = VecThrowEnv(num_envs, cfg.plant_config(), cfg.reward_config(), cfg.env_config(),
                          cfg.curriculum(), seeds=0)
        env.reset()
        total = np.zeros(num_envs)
        for a in actions:
            _, r, _, _ = env.step(a)
            total += r
        return total

    return _best_of(run, repeats)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--cases", type=int, default=2048)
    ap.add_argument("--envs", type=int, default=256)
    ap.add_argument("--steps", type=int, default=100)
    args = ap.parse_args()
    if kernels.compiled_backend is None:
        raise SystemExit("compiled extension not available; build with "
                         "`pip install -e . --no-build-isolation`")

    jobs = [
        (f"displacement error, vacuum, {args.cases} cases",
         lambda: bench_error(args.cases, BallisticModel.vacuum(), args.repeats),
         args.cases, "cases"),
        (f"displacement error, drag, {args.cases} cases",
         lambda: bench_error(args.cases, BallisticModel.newtonian_drag(0.02), args.repeats),
         args.cases, "cases"),
        (f"env step, {args.envs} envs x {args.steps} steps",
         lambda: bench_env(args.envs, args.steps, args.repeats),
         args.envs * args.steps, "env-steps"),
    ]
    print(f"{'benchmark':<46}{'compiled':>14}{'python':>14}{'speedup':>10}  max |diff|")
    saved = kernels.backend
    try:
        for name, job, count, unit in jobs:
            kernels.backend = kernels.compiled_backend
            t_c, out_c = job()
            kernels.backend = kernels.python_backend
            t_p, out_p = job()
            diff = float(np.max(np.abs(out_c - out_p)))
            print(f"{name:<46}{count / t_c:>11.0f}/s {count / t_p:>11.0f}/s "
                  f"{t_p / t_c:>9.1f}x  {diff:.2e}  ({unit})")
    finally:
        kernels.backend = saved


if __name__ == "__main__":
    main()
