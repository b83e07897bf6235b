"""Command-line entry point: ``kernelscope {generate,learn,evaluate,reproduce}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from . import io
from .errors import KernelscopeError
from .pipeline import RunConfig, cmd_evaluate, cmd_generate, cmd_learn, cmd_reproduce

COMMANDS = {
    "generate": cmd_generate,
    "learn": cmd_learn,
    "evaluate": cmd_evaluate,
    "reproduce": cmd_reproduce,
}

# flag dest -> RunConfig field
_FIELDS = {
    "system": "system", "M": "M", "M_transfer": "M_transfer", "L": "L", "T": "T",
    "dprime": "dprime", "seed": "seed", "trials": "trials", "jobs": "jobs", "basis": "basis",
    "degree": "degree", "n_override": "n_override", "split_seed": "split_seed",
    "M_eval": "M_eval", "out": "out",
}
_MPLS = {"mpls_k": "K", "mpls_lambda": "lam"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="kernelscope",
        description="Learn interaction kernels and their reduced variables from trajectories.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("system_pos", nargs="?", metavar="SYSTEM",
                   help="benchmark system (od, pl, plwdc); same as --system")
    p.add_argument("--system", help="benchmark system (default pl)")
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--M", type=int, help="training trajectories (default 50000)")
    p.add_argument("--M-transfer", dest="M_transfer", type=int,
                   help="transfer trajectories with N=20 agents (default 500)")
    p.add_argument("--M-eval", dest="M_eval", type=int,
                   help="fresh two-agent runs for the trajectory error (default 500)")
    p.add_argument("--L", type=int, help="observations per trajectory (default 5)")
    p.add_argument("--T", type=float, help="final time (default 1)")
    p.add_argument("--dprime", type=int, help="reduced dimension (default: the system's)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--trials", type=int, help="independent trials for reproduce (default 10)")
    p.add_argument("--jobs", type=int, help="parallel trial processes (default 1)")
    p.add_argument("--basis", choices=["clamped_bspline", "piecewise_polynomial"],
                   help="basis family (default: the system's)")
    p.add_argument("--degree", type=int, help="basis degree (default: the system's)")
    p.add_argument("--n-override", dest="n_override", type=int,
                   help="total basis size instead of the optimal count")
    p.add_argument("--mpls-k", dest="mpls_k", type=int, help="perturbation centers (default 50)")
    p.add_argument("--mpls-lambda", dest="mpls_lambda", type=float,
                   help="perturbation bandwidth (default 1/D)")
    p.add_argument("--split-seed", dest="split_seed", type=int,
                   help="fixed MPLS split seed (default: derived per trial)")
    p.add_argument("--oracle-only", action="store_true", default=None,
                   help="fit only on the true reduction map; skip MPLS")
    p.add_argument("--out", help="output directory; KERNELSCOPE_OUT overrides it")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def config_from_args(args: argparse.Namespace) -> RunConfig:
    if args.system_pos and args.system and args.system_pos != args.system:
        raise KernelscopeError(f"conflicting systems {args.system_pos!r} and {args.system!r}")
    overrides = {field: getattr(args, dest) for dest, field in _FIELDS.items()}
    overrides["system"] = args.system or args.system_pos
    overrides["oracle_only"] = args.oracle_only
    if os.environ.get("KERNELSCOPE_OUT"):
        overrides["out"] = os.environ["KERNELSCOPE_OUT"]
    overrides = {k: v for k, v in overrides.items() if v is not None}
    mpls = {field: getattr(args, dest) for dest, field in _MPLS.items()
            if getattr(args, dest) is not None}
    if args.config:
        cfg = RunConfig.from_file(args.config, **overrides)
    else:
        cfg = RunConfig(**overrides)
    if mpls:
        cfg = dataclasses.replace(cfg, mpls=dataclasses.replace(cfg.mpls, **mpls))
    if cfg.mpls.K < 1:
        raise KernelscopeError("--mpls-k must be positive")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        paths = COMMANDS[args.command](cfg)
    except (KernelscopeError, ValueError, OSError) as err:
        print(f"kernelscope {args.command}: error: {err}", file=sys.stderr)
        return 2
    for path in paths:
        print(f"{io.checksum(path)}  {path}")
    if args.command in ("evaluate", "reproduce"):
        table = next(p for p in paths if p.suffix == ".txt")
        print(table.read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())

