"""Command-line entry point: ``snnfault {train,sweep,mitigate,report}``."""
import argparse
import json
import logging
import sys

from .errors import ConfigurationError
from .harness import ExperimentConfig, emit_report, load_records, run_experiment

SUBCOMMAND_MODES = {
    "train": ("train",),
    "sweep": ("sweep-bit", "sweep-count", "sweep-size"),
    "mitigate": ("mitigate", "threshold-sweep"),
}


def _config(args, command):
    with open(args.config) as f:
        raw = json.load(f)
    if args.out:
        raw["output_dir"] = args.out
    if args.seed is not None:
        raw["seed"] = args.seed
        raw["init_seed"] = args.seed
    if args.trials is not None:
        raw["trials"] = args.trials
    if args.checkpoint:
        raw["checkpoint"] = args.checkpoint
    if args.long_run:
        raw["long_run"] = True
    cfg = ExperimentConfig.from_dict(raw)
    if cfg.mode not in SUBCOMMAND_MODES[command]:
        raise ConfigurationError(f"'{command}' cannot run mode {cfg.mode!r}; expected one of {SUBCOMMAND_MODES[command]}")
    return cfg


def build_parser():
    p = argparse.ArgumentParser(prog="snnfault", description="Fault injection and mitigation experiments for "
                                "spiking networks on a systolic array.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMAND_MODES:
        s = sub.add_parser(name, help=f"run a {name} experiment from a JSON config")
        s.add_argument("--config", required=True, help="experiment config (JSON)")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--seed", type=int, help="master seed (overrides the config)")
        s.add_argument("--trials", type=int, help="trials per sweep point")
        s.add_argument("--checkpoint", help="pretrained model file")
        s.add_argument("--long-run", action="store_true", help="allow full-scale (e.g. 256x256) grids")
    r = sub.add_parser("report", help="turn records.json files into one CSV table per experiment type")
    r.add_argument("inputs", nargs="+", help="run directories or records.json files")
    r.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            for path in emit_report(load_records(args.inputs), args.out):
                print(path)
            return 0
        cfg = _config(args, args.command)
        records, ok = run_experiment(cfg)
    except (ConfigurationError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    for r in records:
        line = f"{r.series:>14} {r.sweep_value!s:>8}  mean_acc={r.mean_accuracy:.4f}  n={len(r.trial_accuracies)}"
        if r.failures:
            line += f"  failures={len(r.failures)}"
        print(line)
    print(f"results in {cfg.output_dir}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
