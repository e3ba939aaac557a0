"""
Main entry point for the ST-SparseGCN toolkit.

This module parses the command line, sets up logging and dispatches to the
verbs: convert, train, attack, defend, sweep, report and gradcheck.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from stsparse.controllers.experiment_controller import ExperimentController
from stsparse.errors import ConfigError, DataIntegrityError, ParseError, StSparseError
from stsparse.models.config import Arch, AttackKind
from stsparse.models.sparsity import SparseConfig
from stsparse.services import attacks, datasets, defenses, networks
from stsparse.services.graph_ops import apply_flips
from stsparse.services.registry import resolve_defender
from stsparse.services.settings import Settings

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INTEGRITY = 3
EXIT_INCOMPLETE = 4


def setup_logging(log_dir=None, verbose: bool = False):
    """Setup logging to a file in the output directory and to the console."""
    level = logging.DEBUG if verbose else logging.INFO
    log_dir = log_dir or os.getcwd()
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    log_file = os.path.join(log_dir, "stsparse.log")
    try:
        os.makedirs(log_dir, exist_ok=True)
        handlers.insert(0, logging.FileHandler(log_file, mode="a", encoding="utf-8"))
    except OSError as e:
        # Fallback: console only
        log_file = None
        print(f"Failed to open log file in {log_dir}: {e}", file=sys.stderr)

    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )
    logging.info("=" * 50)
    logging.info("ST-SparseGCN toolkit started")
    logging.info(f"Log file: {log_file}")
    logging.info(f"Python version: {sys.version.split()[0]}, numpy {np.__version__}")
    logging.info(f"Output directory: {log_dir}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stsparse",
        description="Train, attack and evaluate GCN and ST-SparseGCN models on citation graphs.",
    )
    parser.add_argument("--seed", type=int, default=None, help="override train and attack seeds")
    parser.add_argument("--config", default=None, help="TOML configuration file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="verb", required=True)

    convert = sub.add_parser("convert", help="convert a public dataset into a bundle")
    convert.add_argument("--format", choices=["linqs", "npz"], required=True)
    convert.add_argument("--name", required=True, help="dataset name, e.g. cora")
    convert.add_argument("--content", help="LINQS .content file")
    convert.add_argument("--cites", help="LINQS .cites file")
    convert.add_argument("--npz", help="npz archive")

    def add_dataset(p):
        p.add_argument("--dataset", required=True, help="bundle name or fixture:<name>")
        p.add_argument("--data-dir", default=None, help="directory holding dataset bundles")

    train = sub.add_parser("train", help="train one model on a clean dataset")
    add_dataset(train)
    train.add_argument("--defender", default=None, help="registry name; defaults to the [model] config")
    train.add_argument("--checkpoint", default=None, help="checkpoint path (default <out>/model.npz)")

    attack = sub.add_parser("attack", help="generate poisoning flips")
    add_dataset(attack)
    attack.add_argument("--attacker", choices=[k.value for k in AttackKind], default=None)
    attack.add_argument("--rate", type=float, default=None)
    attack.add_argument("--flips", default=None, help="output flip file (default <out>/flips.txt)")

    defend = sub.add_parser("defend", help="train and evaluate a defender, optionally on a poisoned graph")
    add_dataset(defend)
    defend.add_argument("--defender", required=True)
    defend.add_argument("--flips", default=None, help="flip file to apply before the defense")

    sub.add_parser("sweep", help="run the [plan] of the configuration")

    report = sub.add_parser("report", help="regenerate reports from <out>/records.db")
    report.add_argument("--conventional-dr", action="store_true", help="DR = (clean - acc) / clean")

    gradcheck = sub.add_parser("gradcheck", help="finite-difference check of both architectures")
    gradcheck.add_argument("--dataset", default="fixture:toy4")
    gradcheck.add_argument("--h", type=float, default=1e-5)
    gradcheck.add_argument("--tol", type=float, default=1e-4)
    return parser


def _data_dir(args, settings: Settings) -> Optional[str]:
    return args.data_dir or settings.get("plan", "data_dir", "data")


def cmd_convert(args, settings: Settings) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.format == "linqs":
        if not args.content or not args.cites:
            raise ConfigError("convert --format linqs needs --content and --cites", key="convert")
        graph, identity = datasets.convert_linqs(args.content, args.cites, args.name, seed), False
    else:
        if not args.npz:
            raise ConfigError("convert --format npz needs --npz", key="convert")
        graph, identity = datasets.convert_npz(args.npz, args.name, seed)
    manifest = datasets.write_bundle(Path(args.out) / args.name, graph, args.name, identity)
    print(f"{manifest.name}: n={manifest.n} edges={manifest.edges} d={manifest.d} C={manifest.n_classes}")
    return EXIT_OK


def cmd_train(args, settings: Settings) -> int:
    bundle = datasets.resolve_dataset(args.dataset, _data_dir(args, settings))
    mcfg = settings.model_config()
    graph = bundle.graph
    if args.defender:
        spec = resolve_defender(args.defender, mcfg, settings.sparse_config(), settings.defense_spec())
        mcfg = spec.model
        graph = defenses.apply_defense(graph, spec.defense)
    tcfg = settings.train_config(args.seed)
    model = networks.train(graph, mcfg, tcfg)
    checkpoint = args.checkpoint or Path(args.out) / "model.npz"
    networks.save_checkpoint(model, checkpoint)
    acc = networks.evaluate(model, graph, graph.test_mask, use_best=settings.report_option("use_best"))
    print(f"{bundle.name} {mcfg.arch.value} seed={tcfg.seed} test_acc={acc:.4f}")
    return EXIT_OK


def cmd_attack(args, settings: Settings) -> int:
    bundle = datasets.resolve_dataset(args.dataset, _data_dir(args, settings))
    spec = settings.attack_spec(args.seed)
    if args.attacker is not None:
        spec = replace(spec, kind=AttackKind(args.attacker))
    if args.rate is not None:
        spec = replace(spec, rate=args.rate)
    flips = attacks.run_attack(bundle.graph, spec, settings.model_config(), settings.train_config(args.seed))
    path = attacks.write_flips(args.flips or Path(args.out) / "flips.txt", flips)
    print(f"{spec.kind.value} rate={spec.rate:g}: {len(flips)} flips written to {path}")
    return EXIT_OK


def cmd_defend(args, settings: Settings) -> int:
    bundle = datasets.resolve_dataset(args.dataset, _data_dir(args, settings))
    graph = bundle.graph
    if args.flips:
        flips = attacks.read_flips(args.flips)
        graph = apply_flips(graph, flips)
        logging.info(f"Applied {len(flips)} flips from {args.flips}")
    spec = resolve_defender(args.defender, settings.model_config(), settings.sparse_config(), settings.defense_spec())
    defended = defenses.apply_defense(graph, spec.defense)
    tcfg = settings.train_config(args.seed)
    model = networks.train(defended, spec.model, tcfg)
    acc = networks.evaluate(model, defended, defended.test_mask, use_best=settings.report_option("use_best"))
    print(f"{bundle.name} {spec.name} seed={tcfg.seed} test_acc={acc:.4f}")
    return EXIT_OK


def cmd_sweep(args, settings: Settings) -> int:
    plan = settings.plan()
    if args.seed is not None:
        plan = replace(plan, seeds=[args.seed])
    controller = ExperimentController(
        args.out,
        conventional_dr=settings.report_option("conventional_dr"),
        use_best=settings.report_option("use_best"),
    )
    result = controller.run_plan(plan)
    print(f"{result.executed} cells run, {result.skipped} skipped, {len(result.failed)} failed")
    return EXIT_OK if result.complete else EXIT_INCOMPLETE


def cmd_report(args, settings: Settings) -> int:
    conventional = args.conventional_dr or settings.report_option("conventional_dr")
    records_db = Path(args.out) / "records.db"
    if not records_db.exists():
        raise ConfigError(f"no records database at {records_db}", key="out")
    plan = settings.plan() if settings.table("plan") else None
    ExperimentController(args.out, conventional_dr=conventional).write_reports(plan)
    print(f"reports written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args, settings: Settings) -> int:
    graph = datasets.resolve_dataset(args.dataset, settings.get("plan", "data_dir", "data")).graph
    seed = args.seed if args.seed is not None else 0
    gcn = replace(settings.model_config(), arch=Arch.GCN, hidden=8, dropout_p=0.0)
    sparse = replace(
        settings.model_config(),
        arch=Arch.ST_SPARSE_GCN,
        dropout_p=0.0,
        sparse=SparseConfig(d_h=16, alpha=0.25),
    )
    passed = True
    for config in (gcn, sparse):
        report = networks.loss_gradient_check(graph, config, seed=seed, h=args.h, tol=args.tol)
        print(f"{config.arch.value}: max_rel_error={report.max_rel_error:.3e} passed={report.passed}")
        passed = passed and report.passed
    return EXIT_OK if passed else EXIT_FAILURE


COMMANDS = {
    "convert": cmd_convert,
    "train": cmd_train,
    "attack": cmd_attack,
    "defend": cmd_defend,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point for the command line.

    Returns the process exit status: 0 success, 1 other failure, 2 config
    error, 3 data integrity error, 4 plan incomplete.
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.out, args.verbose)
    try:
        settings = Settings.load(args.config)
        return COMMANDS[args.verb](args, settings)
    except ConfigError as e:
        logging.error(f"Configuration error: {e}", exc_info=True)
        return EXIT_CONFIG
    except (DataIntegrityError, ParseError) as e:
        logging.error(f"Data integrity error: {e}", exc_info=True)
        return EXIT_INTEGRITY
    except StSparseError as e:
        logging.error(f"{args.verb} failed: {e}", exc_info=True)
        return EXIT_FAILURE
    except Exception as e:
        logging.error(f"Unexpected error in {args.verb}: {e}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
