"""``kgrl`` command line: train, eval, transfer, compose, trace, sweep."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from kgrl.harness import runner
from kgrl.harness.config import ConfigError, ExperimentConfig
from kgrl.knowledge import PackError

DEFAULT_SCALES = (0.1, 0.2, 0.4, 0.6, 0.8, 1.0)


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.freeze_keys:
        changes["actor"] = {**cfg.actor, "freeze_keys": True}
    if getattr(args, "knowledge", None):
        changes["knowledge"] = [_knowledge_item(k) for k in args.knowledge]
        if "name" not in changes:
            changes["name"] = f"{cfg.name}-composed"
    return cfg.with_overrides(**changes) if changes else cfg


def _knowledge_item(text: str):
    """``KG3`` is a scripted rule; anything that names a file (``*.json``) is a pack."""
    if text.endswith(".json") or Path(text).exists() or Path(f"{text}.json").exists():
        return {"pack": str(Path(text).resolve())}
    return text


def _train(args) -> int:
    cfg = _config(args)
    summary = runner.run_experiment(cfg, force=args.force, echo=None if args.quiet else print)
    print(json.dumps(summary, indent=2))
    return 0


def _eval(args) -> int:
    result = runner.eval_run(args.run, args.env, args.episodes, args.drop or (), seed=args.seed or 0)
    _emit(result, args.out, "eval.json")
    return 0


def _transfer(args) -> int:
    result = runner.transfer(args.run, args.env, args.episodes, seed=args.seed or 0)
    _emit(result, args.out, "transfer.json")
    return 0


def _trace(args) -> int:
    rows = runner.trace(args.run, args.env, episode_seed=args.seed or 0, out=args.out, drop=args.drop or ())
    switches = runner.dominant_switches(rows) if rows else []
    print(json.dumps({"steps": len(rows), "switches": switches}, indent=2))
    return 0


def _sweep(args) -> int:
    rows = runner.sweep(args.run, args.scales, args.episodes, seed=args.seed or 0, out=args.out)
    print("scale  success  mean_return")
    for r in rows:
        print(f"{r['scale']:5.2f}  {r['success_rate']:7.2f}  {r['mean_return']:11.3f}")
    return 0


def _emit(result: dict, out: str | None, name: str) -> None:
    text = json.dumps(result, indent=2)
    print(text)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgrl", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    for verb, fn, help_ in (
        ("train", _train, "train every seed of a config"),
        ("compose", _train, "train with a knowledge list built from packs and scripted rules"),
    ):
        p = sub.add_parser(verb, help=help_)
        p.add_argument("--config", required=True, help="experiment config JSON (or a name under harness/configs)")
        p.add_argument("--freeze-keys", action="store_true", help="keep knowledge keys fixed")
        p.add_argument("--force", action="store_true", help="ignore cached runs")
        p.add_argument("--quiet", action="store_true")
        common(p)
        if verb == "compose":
            p.add_argument(
                "--knowledge", nargs="+", required=True, metavar="ITEM", help="scripted rule ids and/or pack paths, in order"
            )
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", help="greedy evaluation of a run directory or a pack")
    p.add_argument("run")
    p.add_argument("--env", default=None, help="grid preset or point variant; defaults to the training env")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--drop", nargs="+", metavar="NAME", help="components to remove (inner, KG1, ...)")
    common(p)
    p.set_defaults(fn=_eval)

    p = sub.add_parser("transfer", help="zero-shot evaluation on another env")
    p.add_argument("run")
    p.add_argument("--env", required=True)
    p.add_argument("--episodes", type=int, default=100)
    common(p)
    p.set_defaults(fn=_transfer)

    p = sub.add_parser("trace", help="per-step attention weights for one greedy episode")
    p.add_argument("run")
    p.add_argument("--env", default=None)
    p.add_argument("--drop", nargs="+", metavar="NAME")
    common(p)
    p.set_defaults(fn=_trace)

    p = sub.add_parser("sweep", help="success rate across goal range scales")
    p.add_argument("run")
    p.add_argument("--scales", type=float, nargs="+", default=list(DEFAULT_SCALES))
    p.add_argument("--episodes", type=int, default=100)
    common(p)
    p.set_defaults(fn=_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (PackError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
