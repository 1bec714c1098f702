"""Command line entry point: ``rfsearch {run,summarize,train,demo}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import MalformedRow, OutputNotWritable, RfSearchError

log = logging.getLogger("rfsearch")


def _cmd_run(args) -> int:
    from .sim.harness import ExperimentConfig, run_experiment
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    if args.jobs:
        cfg.jobs = args.jobs
    if args.system:
        cfg.systems = tuple(args.system)
    if args.policy:
        cfg.policy = args.policy
    cfg.__post_init__()

    def progress(row):
        log.info("%s M=%d N=%d seed=%d success=%d distance=%.3f", row["system"], row["M"],
                 row["N"], row["seed"], row["success"], row["distance"])

    paths = run_experiment(cfg, progress=progress)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def _cmd_summarize(args) -> int:
    from .sim.harness import COMPARISON_COLUMNS, SUMMARY_COLUMNS, fmt, summarize
    summary, comparison = summarize(args.episodes, args.out)
    print(",".join(SUMMARY_COLUMNS))
    for r in summary:
        print(",".join(fmt(r[c]) for c in SUMMARY_COLUMNS))
    if comparison:
        print()
        print(",".join(COMPARISON_COLUMNS))
        for r in comparison:
            print(",".join(fmt(r[c]) for c in COMPARISON_COLUMNS))
    return 0


def _cmd_train(args) -> int:
    from .grasp.learning import TrainConfig, save_params, train_policy, write_learning_curve
    cfg = TrainConfig(iterations=args.iterations, seed=args.seed or 0)
    out = Path(args.out or "policy.bin")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputNotWritable(str(exc)) from exc

    def progress(it, loss, r):
        if it % 50 == 0:
            log.info("iteration %d loss %.5f reward %.3f", it, loss, r)

    result = train_policy(cfg, progress=progress)
    try:
        last = result.curve[-1] if result.curve else (None, None, None)
        save_params(result.params, out, {"seed": cfg.seed, "iterations": cfg.iterations,
                                         "iteration": last[0], "loss": last[1]})
        write_learning_curve(result.curve, out.with_suffix(".curve.csv"))
    except OSError as exc:
        raise OutputNotWritable(str(exc)) from exc
    print(f"policy: {out}")
    return 0


def _cmd_demo(args) -> int:
    from . import servo, world
    from .sim.episode import run_episode, write_episode_log
    from .sim.harness import load_policy, scenario_with_retries
    from .sim.scenario import save_scenario
    out = Path(args.out or "demo")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputNotWritable(str(exc)) from exc
    scn, _ = scenario_with_retries(args.M, args.N, args.seed or 0)
    system = (args.system or ["RfGuided"])[0]
    records, trace, artifacts = [], [], {}
    m = run_episode(scn, system, load_policy(args.policy or "scripted"), log=records,
                    planner_trace=trace, artifacts=artifacts)
    save_scenario(scn, out / "scenario.json")
    write_episode_log(records, out / "episode.jsonl")
    servo.write_trace(trace, out / "planner_trace.jsonl")
    world.save_snapshot(artifacts["grid"], out / "grid.vxg")
    for r in records:
        if r["event"] != "step":
            print(json.dumps(r, sort_keys=True))
    print(json.dumps({k: (float(v) if isinstance(v, float) else v)
                      for k, v in m.as_row().items()}, sort_keys=True, default=float))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfsearch", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--system", action="append", choices=["RfGuided", "Baseline"])
        sp.add_argument("--policy", help="scripted, random, or a checkpoint path")

    sp = sub.add_parser("run", help="run an experiment matrix")
    common(sp)
    sp.set_defaults(func=_cmd_run)

    sp = sub.add_parser("summarize", help="aggregate an episode CSV")
    sp.add_argument("episodes")
    sp.add_argument("--out")
    sp.set_defaults(func=_cmd_summarize)

    sp = sub.add_parser("train", help="train the grasp policy")
    common(sp)
    sp.add_argument("--iterations", type=int, default=500)
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("demo", help="one verbose episode with logs and a grid snapshot")
    common(sp)
    sp.add_argument("--M", type=int, default=3)
    sp.add_argument("--N", type=int, default=10)
    sp.set_defaults(func=_cmd_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OutputNotWritable, MalformedRow) as exc:
        print(f"rfsearch: {exc}", file=sys.stderr)
        return exc.exit_code
    except (RfSearchError, ValueError, FileNotFoundError) as exc:
        print(f"rfsearch: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
