from __future__ import annotations

import argparse
import sys
from typing import Callable, List, Optional

import yaml

from .config import LoadedConfig, get_settings, load_experiment_config
from .errors import ConfigValidationError, OpenTTAError
from .experiment import pretrain_from_config, run_adaptation, run_sweep
from .reporting import build_report
from .utils.logger import get_logger

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


def _load(args: argparse.Namespace) -> LoadedConfig:
    return load_experiment_config(args.config, overrides=args.set or [], seed=args.seed, out=args.out)


def cmd_pretrain(args: argparse.Namespace) -> None:
    settings = get_settings()
    loaded = _load(args)
    result = pretrain_from_config(loaded.config, settings, progress=not args.no_progress and settings.show_progress)
    acc = "n/a" if result.accuracy is None else f"{result.accuracy:.4f}"
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"sha256: {result.checkpoint_sha256}")
    print(f"held-out accuracy: {acc}")


def cmd_adapt(args: argparse.Namespace) -> None:
    settings = get_settings()
    loaded = _load(args)
    bundle = run_adaptation(
        loaded,
        settings,
        progress=not args.no_progress and settings.show_progress,
        auto_pretrain=args.pretrain_if_missing,
    )
    err = bundle.metrics.get("error", {})
    logger.info(f"Summary: round_1_error={err.get('round_1')} final_error={err.get('final_round')} steps={bundle.metrics.get('num_steps')}")
    print(f"bundle: {bundle.directory}")


def _parse_values(raw: List[str]) -> List[object]:
    out: List[object] = []
    for item in raw:
        try:
            out.append(yaml.safe_load(item))
        except yaml.YAMLError as e:
            raise ConfigValidationError(f"sweep value is not valid YAML: {e}", value=item)
    return out


def cmd_sweep(args: argparse.Namespace) -> None:
    settings = get_settings()
    loaded = _load(args)
    result = run_sweep(
        loaded,
        args.axis,
        _parse_values(args.values),
        methods=_parse_values(args.methods or []),
        settings=settings,
        workers=args.workers,
        progress=not args.no_progress and settings.show_progress,
    )
    print(result.summary.to_string(index=False))
    print(f"cells: {result.cells_path}")
    print(f"summary: {result.summary_path}")
    if (result.cells["status"] != "completed").any():
        raise OpenTTAError("some sweep cells failed", failed=int((result.cells["status"] != "completed").sum()))


def cmd_report(args: argparse.Namespace) -> None:
    report = build_report(args.bundles, out_dir=args.out)
    print(report.text)
    for name, path in report.paths.items():
        print(f"{name}: {path}")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="Experiment config YAML (defaults when omitted)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config key, e.g. adaptation.learning_rate=1e-4")
    p.add_argument("--seed", type=int, default=None, help="Seed for every stochastic component")
    p.add_argument("--out", default=None, help="Output directory")
    p.add_argument("--no-progress", action="store_true", help="Disable progress bars")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="open-tta", description="Open-set test-time adaptation experiments")
    sub = p.add_subparsers(dest="command")

    pt = sub.add_parser("pretrain", help="Train the source model and write its checkpoint")
    _add_config_args(pt)
    pt.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", help="Run a scenario online and write a result bundle")
    _add_config_args(a)
    a.add_argument("--pretrain-if-missing", action="store_true", help="Pretrain when the checkpoint does not exist")
    a.set_defaults(func=cmd_adapt)

    s = sub.add_parser("sweep", help="Run one bundle per axis value and aggregate")
    _add_config_args(s)
    s.add_argument("--axis", required=True, choices=["strategy", "lr", "batch_size"])
    s.add_argument("--values", nargs="*", default=[], help="Axis values (YAML scalars or mappings)")
    s.add_argument("--methods", nargs="*", default=None, help="Strategies crossed with lr / batch_size axes")
    s.add_argument("--workers", type=int, default=None, help="Parallel cells (default SWEEP_WORKERS)")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="Summarize bundles and write plot-ready CSVs")
    r.add_argument("bundles", nargs="+", help="Bundle directories or bundle.json files")
    r.add_argument("--out", default=None, help="Directory for CSV tables")
    r.set_defaults(func=cmd_report)

    return p


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_VALIDATION
    func: Callable[[argparse.Namespace], None] = args.func
    try:
        func(args)
    except ConfigValidationError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OpenTTAError, OSError) as e:
        logger.exception(f"{args.command} failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
