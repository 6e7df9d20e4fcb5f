"""Command-line entry point.

Subcommands:
  run      full experiment from a config file
  dataset  build and save a dataset from a dataset config file
  eval     evaluate one checkpoint against a suite on a saved dataset
  project  batch latent projection of a dataset's natural images

Relative output paths are resolved under $DMATLAB_OUT_ROOT when it is set.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .harness import (
    OUT_ROOT_ENV,
    _resolve_out_dir,
    emit_report,
    evaluate,
    run_experiment,
    RobustnessReport,
)
from .manifold import (
    DatasetConfig,
    ProjSolverConfig,
    build_dataset,
    load_dataset,
    project_to_manifold,
    save_dataset,
)
from .models import load_checkpoint, make_generator, make_teacher
from .attacks import load_suite
from .harness import GENERATOR_SEED, TEACHER_SEED


def _cmd_run(args) -> int:
    return run_experiment(args.config, out_dir=args.out)


def _cmd_dataset(args) -> int:
    with open(args.config) as fh:
        cfg = DatasetConfig.from_dict(json.load(fh))
    gen = make_generator(GENERATOR_SEED)
    teacher = make_teacher(TEACHER_SEED, gen)
    train_set, test_set = build_dataset(cfg, gen, teacher)
    out = _resolve_out_dir(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, train_set, test_set, cfg)
    print(f"wrote {len(train_set)} train / {len(test_set)} test records to {out}")
    return 0


def _cmd_eval(args) -> int:
    params, _, _ = load_checkpoint(args.checkpoint)
    specs, worst_over = load_suite(args.suite)
    _, test_set, _ = load_dataset(args.data)
    gen = make_generator(GENERATOR_SEED)
    if args.eval_set == "natural":
        specs = [s for s in specs if s.space != "latent"]
    frag = evaluate(
        params, test_set, specs, args.eval_set,
        gen=gen, worst_case_over=worst_over, regime=args.regime,
    )
    report = RobustnessReport()
    report.worst_case_over = worst_over
    report.add_fragment(frag)
    out = _resolve_out_dir(args.out)
    emit_report(report, out)
    print(f"standard accuracy {frag.standard:.4f}; report written to {out}")
    return 0 if frag.budget_violations == 0 and frag.pixel_violations == 0 else 1


def _cmd_project(args) -> int:
    train_set, test_set, _ = load_dataset(args.data)
    records = test_set if args.split == "test" else train_set
    solver = ProjSolverConfig(steps=args.steps)
    w_hat, losses = project_to_manifold(records.x_nat, make_generator(GENERATOR_SEED), solver)
    lines = ["sample,recon_loss," + ",".join(f"w{j}" for j in range(w_hat.shape[1]))]
    for i in range(w_hat.shape[0]):
        lines.append(
            f"{i},{losses[i]!r}," + ",".join(repr(v) for v in w_hat[i])
        )
    if args.out:
        out = _resolve_out_dir(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text("\n".join(lines) + "\n")
        print(f"projected {len(records)} {args.split} images; wrote {out}")
    else:
        print("\n".join(lines))
    print(f"mean reconstruction loss {float(np.mean(losses)):.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmatlab",
        description="Dual-manifold adversarial robustness laboratory.",
        epilog=f"Relative outputs are placed under ${OUT_ROOT_ENV} when set.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a full experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config's output directory")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("dataset", help="build and save a dataset")
    p.add_argument("--config", required=True, help="JSON dataset config")
    p.add_argument("--out", required=True, help="output dataset file")
    p.set_defaults(fn=_cmd_dataset)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a suite")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-set", default="on_manifold", choices=["on_manifold", "natural"])
    p.add_argument("--regime", default="model", help="row label for the report")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("project", help="batch latent projection of natural images")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--out", default=None, help="CSV output path (stdout if omitted)")
    p.set_defaults(fn=_cmd_project)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
