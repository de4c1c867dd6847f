"""Command-line runner: ``feddiffuse run ...`` and ``feddiffuse sweep ...``."""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigurationError, IngestionError, NumericError
from .experiment import SWEEP_AXES, load_config, run_experiment, sweep

FLAG_FIELDS = {
    "method": ("federation", "method"),
    "clients": ("federation", "clients"),
    "rounds": ("federation", "rounds"),
    "epochs": ("federation", "epochs"),
    "batch": ("federation", "batch"),
    "lr": ("federation", "lr"),
    "optimizer": ("federation", "optimizer"),
    "partition": ("partition", "kind"),
    "dirichlet_beta": ("partition", "dirichlet_beta"),
    "timesteps": ("diffusion", "timesteps"),
    "seed": ("run", "seed"),
    "out": ("run", "out"),
    "samples": ("evaluation", "samples"),
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--method", choices=["full", "usplit", "ulatdec", "udec"])
    p.add_argument("--clients", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--partition", choices=["iid", "label-skew", "quantity-skew"])
    p.add_argument("--dirichlet-beta", type=float)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--samples", type=int)
    p.add_argument("--desk-scale", action="store_true",
                   help="2,000-image subset, 3 rounds, 1 local epoch, batch 32, lr 1e-3, 128 evaluation samples")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddiffuse", description="Federated DDPM training simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train, evaluate and write artifacts")
    _common(run)
    sw = sub.add_parser("sweep", help="compare settings along one axis over several seeds")
    _common(sw)
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma-separated values for the axis")
    sw.add_argument("--seeds", type=int, default=3)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in ("run", "sweep", "-h", "--help"):
        argv.insert(0, "run")
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {field: getattr(args, name) for name, field in FLAG_FIELDS.items()}
    if args.partition:
        overrides[FLAG_FIELDS["partition"]] = args.partition.replace("-", "_")
    try:
        parser = load_config(args.config, overrides, args.desk_scale)
        if args.command == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            sweep(parser, args.axis, values, args.seeds)
        else:
            run_experiment(parser)
    except (ConfigurationError, IngestionError) as exc:
        print(f"feddiffuse: error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"feddiffuse: numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
