"""Command-line entry point: ``tabletop-lifelong <subcommand> ...``.

Every subcommand exits with status 0 on success, 1 on a module error
(bad config, unsatisfiable suite, failed run) and 2 on bad arguments.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness, taskgen, world
from .task_dsl import ParseError


def _load_config(args) -> harness.ExperimentConfig:
    d = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    if getattr(args, "regime", None):
        d["regime"] = args.regime
    if getattr(args, "seeds", None):
        d["seeds"] = args.seeds
    if getattr(args, "paper_protocol", False):
        d["paper_protocol"] = True
    return harness.ExperimentConfig.from_dict(d)


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_gen_suite(args) -> int:
    if args.kind == "INTERFERENCE":
        specs = taskgen.interference_suite(args.seed)
    else:
        specs = taskgen.build_suite(taskgen.SuiteRecipe(args.kind, args.tasks, args.seed))
    path = taskgen.write_suite(args.out, specs, args.kind, args.seed)
    for i, s in enumerate(specs):
        print(f"{i:3d}  {s.language}")
    print(f"wrote {path}")
    return 0


def cmd_collect_demos(args) -> int:
    suite = taskgen.load_suite(args.suite)
    cfg = harness.ExperimentConfig(suite={"dir": str(args.suite)}, demo_noise=args.noise, demos_per_task=args.n)
    ctx = harness.build_context(cfg, suite)
    out = Path(args.out)
    tasks = args.tasks if args.tasks else range(len(suite))
    for t in tasks:
        demos = harness.load_or_collect(ctx, t, args.n, args.noise, out)
        steps = sum(len(d) for d in demos)
        print(f"task {t}: {len(demos)} demos, {steps} steps -> {out / f'task_{t:03d}.jsonl'}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    result = harness.run_lifelong(cfg, args.out)
    for r in result.records:
        print(f"seed {r.seed}: FWT={r.report.FWT:.3f} NBT={r.report.NBT:.3f} AUC={r.report.AUC:.3f}  ({r.directory})")
    _print(result.aggregate_dict())
    if args.audit:
        bad = 0
        for r in result.records:
            for p in harness.audit_protocol(r):
                print(f"audit seed {r.seed}: {p}", file=sys.stderr)
                bad += 1
        return 1 if bad else 0
    return 0


def cmd_ordering_study(args) -> int:
    cfg = _load_config(args)
    perms = [[int(i) for i in p.split(",")] for p in args.perm] if args.perm else None
    study = harness.run_ordering_study(cfg, args.out, perms)
    _print(study.summary())
    return 0


def cmd_pretrain_study(args) -> int:
    cfg = _load_config(args)
    study = harness.run_pretrain_study(cfg, args.out)
    _print(study.summary())
    return 0


def cmd_report(args) -> int:
    records = []
    for d in args.runs:
        d = Path(d)
        found = [d] if (d / "record.json").exists() else sorted(p.parent for p in d.glob("*/record.json"))
        records += [harness.RunRecord.load(p) for p in found]
    if not records:
        print("no run records found", file=sys.stderr)
        return 1
    for p in harness.write_report(records, args.out):
        print(p)
    if args.audit:
        problems = [(r.seed, p) for r in records for p in harness.audit_protocol(r)]
        for seed, p in problems:
            print(f"audit seed {seed}: {p}", file=sys.stderr)
        return 1 if problems else 0
    return 0


def cmd_replay(args) -> int:
    suite = taskgen.load_suite(args.suite)
    spec = suite.specs[args.task]
    _, demos = world.load_demos(args.demos)
    traj = demos[args.index]
    prev = None
    for t, state, preds in world.replay(spec, traj):
        if preds != prev or args.every_step:
            gx, gy = state.gripper
            names = " ".join(sorted(f"({p.name} {' '.join(p.args)})" for p in preds))
            print(f"t={t:4d} gripper=({gx:.3f},{gy:.3f}) ap={state.aperture:.2f} held={state.held_object}  {names}")
            prev = preds
    ok = world.goal_satisfied(spec.goal, state, spec)
    print(f"goal {'satisfied' if ok else 'NOT satisfied'} after {len(traj.actions)} steps")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tabletop-lifelong", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-suite", help="generate a task suite directory")
    p.add_argument("--kind", required=True, choices=taskgen.SUITE_KINDS + ("INTERFERENCE",))
    p.add_argument("--tasks", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_suite)

    p = sub.add_parser("collect-demos", help="collect scripted-expert demos for a suite")
    p.add_argument("--suite", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--tasks", type=int, nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_collect_demos)

    def experiment(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--regime", choices=harness.lifelong.REGIMES)
        p.add_argument("--seeds", type=int, nargs="+")
        p.add_argument("--paper-protocol", action="store_true", help="50 demos, 20 rollouts, learning rate 1e-4 to 1e-5")
        p.add_argument("--out", default="runs")

    p = sub.add_parser("run", help="lifelong run over all configured seeds")
    experiment(p)
    p.add_argument("--audit", action="store_true", help="fail unless every record has 11 checkpoints per task and 20 rollouts per evaluation")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ordering-study", help="one lifelong run per task ordering")
    experiment(p)
    p.add_argument("--perm", action="append", help="comma-separated permutation; repeat for each ordering")
    p.set_defaults(func=cmd_ordering_study)

    p = sub.add_parser("pretrain-study", help="scratch vs pretrained lifelong runs")
    experiment(p)
    p.set_defaults(func=cmd_pretrain_study)

    p = sub.add_parser("report", help="tables and curves from finished runs")
    p.add_argument("runs", nargs="+", help="run directories or roots containing them")
    p.add_argument("--out", required=True)
    p.add_argument("--audit", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="re-simulate a stored demo and print predicate changes")
    p.add_argument("--suite", required=True)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--demos", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--every-step", action="store_true", help="print every step, not only predicate changes")
    p.set_defaults(func=cmd_replay)
    return ap


MODULE_ERRORS = (harness.ConfigError, harness.RunError, taskgen.TaskGenError, world.WorldError, ParseError,
                 ValueError, KeyError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MODULE_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
