"""Command line: ``dskd {pretrain,run,grid,export-weights}``.

Every configuration key is also a flag (``--alpha 1``, ``--seeds 0,1,2``)
that overrides the ``--config`` file. Failures exit nonzero with a single
``error: <kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from .config import ConfigError, config_keys, parse_config
from .experiment import GRID_KINDS, export_weight_distribution, run_grid, run_method
from .trainer import pretrain_teacher


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    group = p.add_argument_group("config overrides")
    for key in config_keys():
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="VALUE")


def _config_from_args(args):
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return parse_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dskd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the teacher with cross-entropy and save teacher.ckpt")
    _add_config_flags(p)

    p = sub.add_parser("run", help="train one method over all seeds")
    _add_config_flags(p)

    p = sub.add_parser("grid", help="run a comparison grid")
    p.add_argument("--kind", choices=GRID_KINDS, default="methods")
    _add_config_flags(p)

    p = sub.add_parser("export-weights", help="export per-sample shallow-layer weights of a finished run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if args.command == "pretrain":
            cfg = _config_from_args(args)
            print(pretrain_teacher(cfg))
        elif args.command == "run":
            result = run_method(_config_from_args(args))
            print(f"{result.method}\t{result.formatted()}")
        elif args.command == "grid":
            for name, r in run_grid(_config_from_args(args), args.kind).items():
                print(f"{name}\t{r.formatted()}")
        elif args.command == "export-weights":
            print(export_weight_distribution(args.run_dir, args.layer, args.out, args.seed))
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - one-line report for any failure
        print(f"error: {type(e).__name__}: {' '.join(str(e).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
