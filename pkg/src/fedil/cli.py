"""Command-line entry point.

``fedil run --config cfg.txt`` runs one experiment. ``--promote-t`` and
``--gate-threshold`` (and ``--seed``) accept comma-separated lists; each
combination then gets its own sub-directory with its own metrics file, and
``sweep.csv`` collects one summary line per setting.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError, FedILError
from .harness import MODES, ExperimentConfig, run_experiment

log = logging.getLogger("fedil")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2

# config fields whose CLI flags accept comma-separated lists
SWEEPABLE = ("seed", "promote_t", "gate_threshold")


def _number_list(kind):
    def parse(text):
        try:
            values = [kind(v) for v in str(text).split(",") if v.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
        if not values:
            raise argparse.ArgumentTypeError("empty list")
        return values
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment or a sweep")
    run.add_argument("--config", required=True, type=Path, help="key = value config file")
    run.add_argument("--mode", choices=MODES)
    run.add_argument("--seed", type=_number_list(int))
    run.add_argument("--out", type=Path, help="output directory (default runs/<config hash>)")
    run.add_argument("--rounds", type=int, dest="total_rounds")
    run.add_argument("--tau", type=float)
    run.add_argument("--promote-t", type=_number_list(float))
    run.add_argument("--gate-threshold", type=_number_list(float))
    run.add_argument("--clients-per-round", type=int)
    run.add_argument("--local-epochs", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _format(value) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def expand(base: ExperimentConfig, args: argparse.Namespace) -> list:
    """``(label, config)`` for every combination of the swept values."""
    scalar = {k: getattr(args, k) for k in ("mode", "total_rounds", "tau", "clients_per_round",
                                            "local_epochs", "workers")
              if getattr(args, k) is not None}
    base = base.replace(**scalar)
    axes = {k: getattr(args, k) for k in SWEEPABLE if getattr(args, k) is not None}
    swept = [k for k, v in axes.items() if len(v) > 1]
    out = []
    for combo in itertools.product(*axes.values()):
        changes = dict(zip(axes, combo))
        if "seed" in changes:
            changes["seed"] = int(changes["seed"])
        config = base.replace(**changes)
        config.validate()
        label = "_".join(f"{k}={_format(changes[k])}" for k in swept)
        out.append((label, config))
    return out


def run_command(args: argparse.Namespace) -> int:
    base = ExperimentConfig.from_file(args.config)
    settings = expand(base, args)
    root = args.out or Path("runs") / settings[0][1].config_hash()
    rows = []
    for label, config in settings:
        target = root / label if label else root
        log.info("running %s -> %s", label or config.mode, target)
        result = run_experiment(config, out_dir=target)
        summary = result.summary()
        rows.append({"setting": label or "-", "path": str(target), **summary})
        print(json.dumps({"setting": label or None, "out": str(target),
                          "final_accuracy": summary["final_accuracy"],
                          "pseudo_total": summary["pseudo_total"]}))
    if len(settings) > 1:
        with open(root / "sweep.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run_command(args)
    except ConfigurationError as exc:
        print(f"fedil: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FedILError as exc:
        print(f"fedil: aborted: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"fedil: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
