"""``ballista`` command line: train, eval, sweep, ballistics-check, init-config, plot-data.

Exit codes: 0 success, 1 usage or invalid input, 2 numerical fault, 3 tolerance failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from typing import List, Optional

from ballista.config import MODES, PROFILES, TASKS, RunConfig
from ballista.errors import BallistaError, InvalidArgumentError, NumericalFault

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_TOLERANCE = 0, 1, 2, 3
BALLISTICS_TOLERANCE = 1e-4
ZERO_DRAG_TOLERANCE = 1e-9

log = logging.getLogger("ballista")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_flags(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="run config JSON (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="seed; replaces the config's seed list")
    p.add_argument("--out", help=out_help)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--profile", choices=PROFILES)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--iterations", type=int)
    p.add_argument("--envs", type=int, help="number of parallel environments")


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides(robot_profile=args.profile, task=args.task, mode=args.mode,
                              iterations=args.iterations, env_count=args.envs,
                              seeds=None if args.seed is None else [args.seed],
                              out_dir=args.out)


# ------------------------------------------------------------------ train

def cmd_train(args) -> int:
    from ballista.trainer import train
    cfg = resolve_config(args)
    every = max(1, args.log_every)

    def progress(row):
        it = int(row["iteration"])
        if (it + 1) % every == 0 or it + 1 == cfg.iterations:
            log.info("iter %d reward %.3f accuracy %.3f stability %.3f level %.2f",
                     it, row["mean_reward"], row["accuracy"], row["stability_rate"], row["level"])

    multi = len(cfg.seeds) > 1
    for seed in cfg.seeds:
        out = os.path.join(cfg.out_dir, f"seed_{seed}") if multi else cfg.out_dir
        cfg.ensure_out_dir(out)
        cfg.save(os.path.join(out, "config.json"))
        result = train(cfg, seed=seed, out_dir=out, trace_path=args.trace, log=progress)
        print(f"seed {seed}: checkpoint {result.checkpoint}")
    return EXIT_OK


# ------------------------------------------------------------------ eval

def cmd_eval(args) -> int:
    from ballista.evaluate import evaluate_checkpoint
    if not os.path.exists(args.checkpoint):
        raise InvalidArgumentError(f"checkpoint not found: {args.checkpoint}")
    cfg = None
    if args.config or any(getattr(args, k) is not None
                          for k in ("profile", "task", "mode", "iterations", "envs")):
        meta_path = args.checkpoint + ".json"
        if args.config:
            cfg = RunConfig.load(args.config)
        elif os.path.exists(meta_path):
            with open(meta_path) as fh:
                cfg = RunConfig.from_dict(json.load(fh)["config"])
        else:
            cfg = RunConfig()
        cfg = cfg.with_overrides(robot_profile=args.profile, task=args.task, mode=args.mode,
                                 iterations=args.iterations, env_count=args.envs)
    n = args.episodes
    if n is None:
        n = (cfg or _sidecar_config(args.checkpoint)).sections["eval"]["episodes"]
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval")
    report = evaluate_checkpoint(args.checkpoint, n, args.seed or 0, cfg)
    report.write(out)
    s = report.summary
    print(f"{s['n_episodes']} episodes: error {s['mean_error']:.4f} +- {s['std_error']:.4f} m, "
          f"stability {s['stability_rate']:.3f}, written to {out}")
    return EXIT_OK


def _sidecar_config(path: str) -> RunConfig:
    meta_path = path + ".json"
    if not os.path.exists(meta_path):
        raise InvalidArgumentError(f"no config given and no metadata next to {path}")
    with open(meta_path) as fh:
        return RunConfig.from_dict(json.load(fh)["config"])


# ------------------------------------------------------------------ sweep

def apply_trial_params(cfg: RunConfig, params: dict) -> RunConfig:
    """Run config for one sweep trial."""
    from ballista.task import RewardConfig
    if params.get("gru", False):
        raise InvalidArgumentError("recurrent policies are not supported")
    data = cfg.to_dict()
    shape = {k: v for k, v in data["reward"].items()
             if k not in ("lambda1", "lambda2", "lambda3", "reward_scale")}
    data["reward"] = RewardConfig.from_weights(params["reward_scale"],
                                               params["stability_reward_pct"],
                                               params["roll_reward_pct"], **shape).to_dict()
    data["curriculum"]["accuracy_threshold"] = params["accuracy_threshold"]
    data["curriculum"]["stability_threshold"] = params["stability_threshold"]
    data["ppo"]["desired_kl"] = params["desired_kl"]
    data["ppo"]["value_loss_coef"] = params["value_loss_coef"]
    data["env"]["observe_estimate"] = bool(params["estimate_displacement_state"])
    data["env"]["observe_released"] = bool(params["ball_released_state"])
    tuner = data["tuner"]
    data["iterations"] = tuner["iterations"]
    data["env_count"] = tuner["env_count"]
    data["checkpoint_every"] = 0
    return RunConfig.from_dict(data)


class TrainEvalTrial:
    """Sweep trial runner: train with the trial's parameters, evaluate, score."""

    def __init__(self, cfg_dict: dict, seed: int, out_dir: str):
        self.cfg_dict, self.seed, self.out_dir = cfg_dict, seed, out_dir

    def __call__(self, params: dict) -> float:
        from ballista.evaluate import evaluate
        from ballista.learner import load_checkpoint
        from ballista.env import ACT_DIM, OBS_DIM
        from ballista.trainer import train
        from ballista.tuner import objective
        cfg = apply_trial_params(RunConfig.from_dict(self.cfg_dict), params)
        tag = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:10]
        out = os.path.join(self.out_dir, "trials", tag)
        result = train(cfg, seed=self.seed, out_dir=out)
        policy = load_checkpoint(result.checkpoint, OBS_DIM, ACT_DIM)
        report = evaluate(policy, cfg, cfg.sections["tuner"]["eval_episodes"], self.seed,
                          result.estimate_stats, cfg.iterations)
        report.write(out)
        s = report.summary
        return objective(min(max(s["accuracy"], 0.0), 1.0), s["stability_rate"])


def cmd_sweep(args) -> int:
    from ballista import tuner
    cfg = resolve_config(args)
    t = dict(cfg.sections["tuner"])
    for key in ("budget", "workers"):
        if getattr(args, key) is not None:
            t[key] = getattr(args, key)
    if args.synthetic:
        t["synthetic"] = True
    out = cfg.ensure_out_dir()
    tpe = tuner.TPEConfig(t["quantile"], t["n_candidates"], t["n_startup"])
    if t["synthetic"]:
        fn = tuner.synthetic_throwing_objective
    else:
        fn = TrainEvalTrial(cfg.to_dict(), cfg.seeds[0], out)
    best, history = tuner.run_sweep(tuner.default_space(), int(t["budget"]), fn,
                                    os.path.join(out, "history.jsonl"), int(t["workers"]), tpe,
                                    seed=cfg.seeds[0])
    n_done = sum(r.status == "complete" for r in history)
    if best is None:
        print(f"no trial completed ({len(history)} failed)")
        return EXIT_NUMERICAL
    print(f"{n_done} complete trials; best objective {best.objective:.4f} (trial {best.trial_id})")
    return EXIT_OK


# ------------------------------------------------------------------ ballistics check

def cmd_ballistics_check(args) -> int:
    from ballista.ballistics import oracle_check
    rep = oracle_check(args.cases, args.seed or 0, args.inject_error)
    print(f"cases {rep['n_cases']}: max |dE| = {rep['max_abs_error_diff']:.3e} m "
          f"(tolerance {BALLISTICS_TOLERANCE:g}); zero-drag vs vacuum max diff "
          f"{rep['max_zero_drag_diff']:.3e} m")
    ok = (rep["max_abs_error_diff"] <= BALLISTICS_TOLERANCE
          and rep["max_zero_drag_diff"] <= ZERO_DRAG_TOLERANCE)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_TOLERANCE


# ------------------------------------------------------------------ init-config

def cmd_init_config(args) -> int:
    cfg = RunConfig(robot_profile=args.profile or "humanoid", task=args.task or "general",
                    mode=args.mode or "full_body")
    text = json.dumps(cfg.to_dict(), indent=2) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ plot-data

def cmd_plot_data(args) -> int:
    from ballista.evaluate import polar_difference
    os.makedirs(args.out, exist_ok=True)
    if args.polar:
        a, b = (os.path.join(d, "polar_grid.csv") for d in args.polar)
        path = os.path.join(args.out, "error_difference.csv")
        polar_difference(a, b, path)
        print(f"wrote {path}")
    if args.curves:
        path = os.path.join(args.out, "curves_long.csv")
        write_curves_long(args.curves, path)
        print(f"wrote {path}")
    if not args.polar and not args.curves:
        raise InvalidArgumentError("nothing to export: pass --polar and/or --curves")
    return EXIT_OK


def write_curves_long(run_dirs: List[str], path: str) -> None:
    """Stack the curves of several runs into one CSV with a leading ``run`` column."""
    from ballista.trainer import CURVE_COLUMNS
    with open(path, "w", newline="") as out:
        w = csv.writer(out)
        w.writerow(("run",) + CURVE_COLUMNS)
        for d in run_dirs:
            src = os.path.join(d, "curves.csv")
            if not os.path.exists(src):
                raise InvalidArgumentError(f"no curves.csv in {d}")
            with open(src, newline="") as fh:
                for row in csv.DictReader(fh):
                    w.writerow([d] + [row[c] for c in CURVE_COLUMNS])


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ballista", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a throwing policy")
    _run_flags(p, "output directory")
    p.add_argument("--trace", help="write a JSONL step trace to this path")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    _run_flags(p, "report directory (default: <checkpoint dir>/eval)")
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="hyperparameter search")
    _run_flags(p, "sweep directory (history.jsonl, best.json)")
    p.add_argument("--budget", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--synthetic", action="store_true",
                   help="score trials with a closed-form stand-in instead of training")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ballistics-check", help="verify displacement errors against the oracle")
    p.add_argument("--cases", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--inject-error", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_ballistics_check)

    p = sub.add_parser("init-config", help="write a config with every default filled in")
    p.add_argument("--out", help="file to write (default: stdout)")
    p.add_argument("--profile", choices=PROFILES)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--mode", choices=MODES)
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("plot-data", help="export plot-ready data files")
    p.add_argument("--polar", nargs=2, metavar=("REPORT_A", "REPORT_B"),
                   help="two eval report directories; writes A minus B per polar cell")
    p.add_argument("--curves", nargs="+", metavar="RUN_DIR", help="training run directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericalFault as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (BallistaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
