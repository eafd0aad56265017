"""Command-line entry point.

    surveyalloc simulate --config exp1.json [--out results/]
    surveyalloc replay --data answers.csv [--modules modules.csv] --config replay.json
    surveyalloc mnl --config mnl.json
    surveyalloc sweep --axis h --config exp3.json [--values 0.5 1 1.5 2]
    surveyalloc gen-surrogate --out answers.csv [--modules-out modules.csv]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import __version__
from .environments import DataError
from .harness import SWEEP_AXES, ExperimentConfig, emit_results, results_csv, run_experiment
from .policies import ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("surveyalloc")


def _common(p: argparse.ArgumentParser, config_required=True):
    p.add_argument("--config", required=config_required, help="experiment JSON file")
    p.add_argument("--out", default=None, help="output directory (default: print CSV only)")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--replications", type=int, default=None, help="override the replication count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surveyalloc", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s v{__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("simulate", help="synthetic experiments"))
    rp = sub.add_parser("replay", help="bootstrap replay of a paired answer table")
    rp.add_argument("--data", required=True, help="CSV with question_id,respondent_id,human,llm")
    rp.add_argument("--modules", default=None, help="CSV with question_id,module_id")
    _common(rp)
    _common(sub.add_parser("mnl", help="multinomial-logit extension"))
    sp = sub.add_parser("sweep", help="sweep one parameter")
    sp.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sp.add_argument("--values", type=float, nargs="+", default=None)
    sp.add_argument("--data", default=None, help="replay data (replay configs only)")
    sp.add_argument("--modules", default=None)
    _common(sp)
    gp = sub.add_parser("gen-surrogate", help="write the surrogate paired dataset")
    gp.add_argument("--out", required=True)
    gp.add_argument("--modules-out", default=None)
    gp.add_argument("--seed", type=int, default=0)
    return parser


def _load(args, expect_kind=None) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.load(args.config)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc}") from None
    env = dict(cfg.environment)
    if getattr(args, "data", None):
        env["data"] = args.data
    if getattr(args, "modules", None):
        env["modules"] = args.modules
    cfg = replace(cfg, environment=env)
    if expect_kind and env["kind"] != expect_kind:
        raise ConfigurationError(f"'{args.command}' needs a {expect_kind} environment, got {env['kind']}")
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.replications is not None:
        cfg = replace(cfg, replications=args.replications)
    return cfg


def _run(cfg: ExperimentConfig, out):
    result = run_experiment(cfg)
    sys.stdout.write(results_csv(result))
    if out:
        for kind, path in emit_results(result, out).items():
            log.info("wrote %s: %s", kind, path)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "gen-surrogate":
            from .surrogate import write_surrogate

            write_surrogate(args.out, args.modules_out, seed=args.seed)
            return EXIT_OK
        if args.command == "sweep":
            cfg = _load(args)
            cfg = cfg.with_sweep(args.axis, args.values)
        else:
            kind = {"simulate": "synthetic", "replay": "replay", "mnl": "mnl"}[args.command]
            cfg = _load(args, kind)
        _run(cfg, args.out)
        return EXIT_OK
    except ConfigurationError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.error("runtime error: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
