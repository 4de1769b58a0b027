"""Command line entry point.

Subcommands: pretrain-zoo, meta-train, evaluate, dump-images, plot, ablate.
Exit codes: 0 success, 2 configuration error, 3 numeric error.
"""

import argparse
import sys

from . import runner
from .errors import ConfigError, DataIOError, DfmlError, NumericError, ScenarioError


def _load_cfg(args) -> runner.ExperimentConfig:
    cfg = runner.ExperimentConfig()
    if args.config:
        cfg = runner.load_config_file(args.config, cfg)
    overrides = []
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides.append(item)
    if args.output:
        overrides.append(f"output_dir = {args.output}")
    if getattr(args, "parallel_eval", None):
        overrides.append(f"parallel_eval = {args.parallel_eval}")
    if overrides:
        cfg = runner.parse_config("\n".join(overrides), cfg)
    cfg.validate()
    return cfg


def _add_common(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")
    p.add_argument("--output", help="override output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfml",
        description="Data-free meta-learning: curriculum model inversion, "
                    "episodic meta-training and calibrated meta-testing.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-zoo", help="pre-train the frozen model collection")
    _add_common(p)

    p = sub.add_parser("meta-train", help="run the full meta-training loop")
    _add_common(p)
    p.add_argument("--resume", help="run-state checkpoint (.pt) to resume from")

    p = sub.add_parser("evaluate", help="evaluate an initialization on target tasks")
    _add_common(p)
    p.add_argument("--theta-source", choices=("purer", "random", "average"),
                   default="purer")
    p.add_argument("--parallel-eval", type=int, default=0, metavar="N",
                   help="evaluate tasks with N worker threads")

    p = sub.add_parser("dump-images", help="write per-class PNG grids of the pseudo images")
    _add_common(p)
    p.add_argument("--run-state", help="run-state checkpoint; default <output>/run_final.pt")

    p = sub.add_parser("plot", help="emit figures from a training metrics CSV")
    _add_common(p)
    p.add_argument("--metrics", help="metrics CSV; default <output>/train_metrics.csv")

    p = sub.add_parser("ablate", help="run the 2x2 curriculum x ICFIL ablation matrix")
    _add_common(p)
    return parser


def _dispatch(args) -> int:
    import os
    cfg = _load_cfg(args)
    if args.command == "pretrain-zoo":
        z = runner.get_or_build_zoo(cfg)
        print(f"zoo ready: {len(z.entries)} models, {z.num_global_classes} pseudo-classes "
              f"-> {os.path.join(cfg.output_dir, 'zoo')}")
    elif args.command == "meta-train":
        state, csv_path = runner.run_meta_training(cfg, resume_from=args.resume)
        print(f"trained {state.iteration} iterations; metrics at {csv_path}")
    elif args.command == "evaluate":
        report = runner.run_evaluation(cfg, args.theta_source)
        print(f"{args.theta_source}: mean={report.mean:.4f} std={report.std:.4f} "
              f"ci95={report.ci95:.4f} over {report.num_tasks} tasks")
    elif args.command == "dump-images":
        from . import inversion
        path = args.run_state or os.path.join(cfg.output_dir, "run_final.pt")
        _, dd, _ = runner._load_run_state(path, cfg.hp)
        paths = inversion.dump_images(dd, os.path.join(cfg.output_dir, "pseudo_images"))
        print(f"wrote {len(paths)} class grids")
    elif args.command == "plot":
        metrics = args.metrics or os.path.join(cfg.output_dir, "train_metrics.csv")
        paths = runner.emit_plots(metrics, os.path.join(cfg.output_dir, "plots"))
        print("wrote " + ", ".join(paths))
    elif args.command == "ablate":
        results = runner.run_ablation(cfg)
        for k, v in results.items():
            print(f"{k}: {v:.4f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, DataIOError, ScenarioError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except DfmlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
