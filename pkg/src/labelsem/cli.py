"""Command-line entry point: ``labelsem <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_config
from .data import gen_synthetic, parse_synth_spec
from .gradcheck import MODULES, run_suite
from .train import (
    error_rate_reduction,
    evaluate,
    export_embeddings,
    load_checkpoint,
    load_eval_examples,
    train,
)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _accuracy(text: str) -> float:
    """Accept 0.903, 90.3 or 90.3%."""
    value = float(text.rstrip("%"))
    return value / 100.0 if text.endswith("%") or value > 1.0 else value


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    summary = []
    for seed in seeds:
        run_cfg = cfg if seed == cfg.seed else cfg.replace(seed=seed)
        if len(seeds) > 1 and run_cfg.checkpoint_path:
            stem = Path(run_cfg.checkpoint_path)
            run_cfg = run_cfg.replace(checkpoint_path=str(stem.with_name(f"{stem.stem}-seed{seed}{stem.suffix}")))
        result = train(run_cfg, emit=lambda e, s=seed: _emit({"seed": s, **e}))
        record = {"seed": seed, "best_dev_accuracy": max(h["dev"]["accuracy"] for h in result.history)}
        if result.test is not None:
            record["test"] = result.test
            _emit({"seed": seed, "split": "test", **result.test})
        if result.checkpoint:
            record["checkpoint"] = str(result.checkpoint)
        summary.append(record)
    if len(seeds) > 1:
        best = max(summary, key=lambda r: r["best_dev_accuracy"])
        _emit({"summary": summary, "best_seed": best["seed"]})
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    _emit(evaluate(model, load_eval_examples(model, args.data)))
    return 0


def cmd_gradcheck(args) -> int:
    failed = 0
    for r in run_suite(args.module):
        failed += not r.passed
        _emit({"module": r.module, "check": r.name, "seed": r.seed,
               "max_relative_error": float(r.error), "tolerance": r.tol, "passed": bool(r.passed)})
    if failed:
        raise RuntimeError(f"{failed} gradient checks exceeded tolerance")
    return 0


def cmd_synth(args) -> int:
    spec = parse_synth_spec(Path(args.spec).read_text())
    paths = gen_synthetic(spec, args.out)
    _emit({k: str(v) for k, v in paths.items()})
    return 0


def cmd_export(args) -> int:
    model = load_checkpoint(args.checkpoint)
    path = export_embeddings(model, load_eval_examples(model, args.data), args.out)
    _emit({"written": str(path)})
    return 0


def cmd_metric(args) -> int:
    value = error_rate_reduction(_accuracy(args.backbone), _accuracy(args.model))
    print(f"{value:+.2f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="labelsem", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", help="comma-separated seeds; reports every run and the best")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a JSON Lines dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--module", choices=MODULES)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-embeddings", help="write per-example vectors to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("metric", help="metric conventions")
    msub = p.add_subparsers(dest="metric", required=True)
    q = msub.add_parser("err-reduction", help="relative error-rate reduction in percent")
    q.add_argument("--backbone", required=True)
    q.add_argument("--model", required=True)
    q.set_defaults(func=cmd_metric)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line reason, nonzero exit
        reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"labelsem {args.command}: error: {reason}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
