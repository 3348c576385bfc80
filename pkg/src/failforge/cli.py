"""Stage-oriented command-line front end.

    failforge {mine|generate|images|filter|cluster|mix|export|report|resume}
        -c <config> [--run-dir d] [--benchmark b] [--method m1|m2]
        [--diversity similar|cross] [--n-syn N] [--seed S] [--dry-run]

One JSON config file drives the whole pipeline (sections per module); secrets
come from FAILFORGE_<BACKEND>_KEY environment variables. Exit codes: 0 ok,
1 usage/config, 2 missing dependency, 3 runtime.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline, schema

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MISSING_DEP = 2
EXIT_RUNTIME = 3

_DIVERSITY_BY_FLAG = {"similar": "similar_domain", "cross": "cross_domain"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="failforge", description="Failure-grounded synthetic data pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*pipeline.STAGE_ORDER, "report", "resume"):
        stage_parser = sub.add_parser(name)
        stage_parser.add_argument("-c", "--config", required=name != "resume", help="pipeline config JSON")
        stage_parser.add_argument("--run-dir", default=None, help="run directory (default: config run_dir or ./run)")
        stage_parser.add_argument("--benchmark", default=None, help="restrict to one configured benchmark")
        stage_parser.add_argument("--method", choices=("m1", "m2"), default=None, help="override method routing")
        stage_parser.add_argument("--diversity", choices=("similar", "cross"), default=None)
        stage_parser.add_argument("--n-syn", type=int, default=None, help="override mixer.n_syn")
        stage_parser.add_argument("--seed", type=int, default=None, help="override mixer/taxonomy seeds")
        stage_parser.add_argument("--dry-run", action="store_true")
        if name == "resume":
            stage_parser.add_argument("run_dir_pos", nargs="?", default=None, metavar="run_dir")
    return parser


def _apply_overrides(config: dict, args) -> dict:
    if args.method:
        for entry in config["benchmarks"]:
            entry["methods"] = [args.method]
    if args.diversity:
        config["generation"]["diversity_mode"] = _DIVERSITY_BY_FLAG[args.diversity]
    if args.n_syn is not None:
        config["mixer"]["n_syn"] = args.n_syn
    if args.seed is not None:
        config["mixer"]["seed"] = args.seed
        config["taxonomy"]["seed"] = args.seed
    return config


def _resolve_run_dir(config: dict, args) -> Path:
    explicit = getattr(args, "run_dir_pos", None) or args.run_dir
    return Path(explicit or config.get("run_dir") or "run")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "resume" and not args.config:
            run_dir = Path(args.run_dir_pos or args.run_dir or "run")
            config_path = run_dir / "config.json"
            if not config_path.exists():
                print(f"error: no run directory at {run_dir} (missing {config_path})", file=sys.stderr)
                return EXIT_RUNTIME
        else:
            config_path = Path(args.config)
        config = pipeline.load_config(config_path)
        config = _apply_overrides(config, args)
        run_dir = _resolve_run_dir(config, args)
    except pipeline.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "resume":
            if not run_dir.exists() or not pipeline.checkpoint_path(run_dir).exists():
                print(f"error: {run_dir} does not contain a checkpoint log", file=sys.stderr)
                return EXIT_RUNTIME
        ctx = pipeline.make_context(config, run_dir, benchmark=args.benchmark)
        if args.command != "resume":
            _persist_config(config_path, run_dir)

        if args.command == "report":
            print(pipeline.render_report(ctx))
            return EXIT_OK

        if args.dry_run:
            return _dry_run(ctx, args.command)

        with pipeline.RunLock(run_dir):
            if args.command == "resume":
                results = pipeline.resume(ctx)
                for result in results:
                    print(f"{result.stage}: {'ran' if result.ran else 'up to date'}")
            else:
                result = pipeline.run_stage(ctx, args.command)
                if result.ran:
                    for name in sorted(result.outputs):
                        print(f"{args.command}: wrote {name}")
                else:
                    print(f"{args.command}: up to date")
        return EXIT_OK
    except pipeline.MissingInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_DEP
    except pipeline.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (pipeline.CheckpointError, pipeline.LockedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except schema.SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures map to exit 3
        logger.exception("stage failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _persist_config(config_path: Path, run_dir: Path) -> None:
    """Keep a copy of the config beside the run so `resume <run_dir>` works."""
    target = run_dir / "config.json"
    run_dir.mkdir(parents=True, exist_ok=True)
    data = Path(config_path).read_text(encoding="utf-8")
    if not target.exists() or target.read_text(encoding="utf-8") != data:
        target.write_text(data, encoding="utf-8")


def _dry_run(ctx: pipeline.StageContext, command: str) -> int:
    stages = pipeline.STAGE_ORDER if command == "resume" else (command,)
    for stage in stages:
        try:
            plan = pipeline.stage_plan(ctx, stage)
        except pipeline.MissingInputError as exc:
            print(f"{stage}: blocked ({exc})")
            continue
        state = "up to date" if pipeline.stage_up_to_date(ctx, plan) else "would run"
        print(f"{stage}: {state} ({len(plan.inputs)} inputs, config {plan.config_digest[:12]})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
