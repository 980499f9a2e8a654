"""Command-line entry point.

    safeplan train --config PATH [--seed N] [--out DIR] [--set key=value ...]
    safeplan eval --checkpoint PATH --episodes N
    safeplan gradcheck
    safeplan plan-debug --checkpoint PATH

Exit codes: 0 success, 1 usage error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="safeplan", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--resume", help="checkpoint directory to continue from")

    e = sub.add_parser("eval", help="evaluate a checkpoint with mean actions")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--no-planner", action="store_true", help="always act with the control actor")
    e.add_argument("--dump", help="directory for per-episode trajectory CSVs")

    sub.add_parser("gradcheck", help="finite-difference checks of every trainable module")

    d = sub.add_parser("plan-debug", help="print planner diagnostics for a few steps")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--steps", type=int, default=10)
    d.add_argument("--seed", type=int, default=0)
    return p


def _train(args) -> int:
    from safeplan.config import load_config
    from safeplan.trainer import Trainer

    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["output_dir"] = args.out
    try:
        cfg = load_config(args.config, overrides)
    except (KeyError, ValueError) as e:
        raise UsageError(f"bad config: {e}") from e
    out = Path(cfg.output_dir)
    if args.resume:
        trainer = Trainer.load(args.resume, out)
        trainer.cfg = cfg
    else:
        trainer = Trainer(cfg, out)
    trainer.run()
    trainer.save(out / "checkpoint")
    print(json.dumps({"env_step": trainer.env_step, "grad_steps": trainer.grad_steps,
                      "metrics": str(out / "metrics.csv"), "checkpoint": str(out / "checkpoint")}))
    return EXIT_OK


def _eval(args) -> int:
    from safeplan.trainer import evaluate, load_agent

    agent, cfg = load_agent(args.checkpoint)
    summary = evaluate(agent, cfg, args.episodes, use_planner=not args.no_planner, dump_dir=args.dump)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _gradcheck(args) -> int:
    from safeplan.gradcheck import run_all

    results = run_all(verbose=True)
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def _plan_debug(args) -> int:
    import numpy as np

    from safeplan import env as circle
    from safeplan.planner import plan_action, planner_budget
    from safeplan.trainer import load_agent

    agent, cfg = load_agent(args.checkpoint)
    b_s = planner_budget(cfg.budget, cfg.plan_horizon, cfg.env.episode_length, cfg.bs_scale)
    rng = np.random.default_rng(args.seed)
    state, obs = circle.reset(args.seed, cfg.env)
    latent = agent.wm.initial_state(1)
    prev = np.zeros((1, cfg.wm.act_dim), np.float32)
    print(f"b_s = {b_s:.4f}")
    for t in range(args.steps):
        latent, _ = agent.wm.observe_step(latent, prev, obs[None], rng)
        action, diag = plan_action(latent, agent.wm, agent.actor_c, agent.actor_s, cfg.plan_horizon, b_s, rng,
                                   mode="mean")
        print(json.dumps({"t": t, "x": float(state.position[0]), "y": float(state.position[1]),
                          "c_obs": round(diag.c_obs, 4), "c_sum": round(diag.c_sum, 4),
                          "chose_safe": diag.chose_safe,
                          "c_imagined": [round(c, 4) for c in diag.c_imagined]}))
        prev = np.asarray(action, np.float32).reshape(1, -1)
        state, res = circle.step(state, prev[0], cfg.env)
        obs = res.observation
    return EXIT_OK


COMMANDS = {"train": _train, "eval": _eval, "gradcheck": _gradcheck, "plan-debug": _plan_debug}


def main(argv=None) -> int:
    from safeplan.errors import CheckpointFormatError, NumericError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointFormatError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
