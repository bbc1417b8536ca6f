"""Command-line entry point.

Subcommands: ``run`` (scenario through the fusion pipeline), ``metrics``
(uncertainty means of one grid snapshot), ``fuse`` (offline single-pair
fusion), ``version``.  Exit codes: 0 success, 1 configuration error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .errors import GridFusionError
from .fusion import FusionConfig, fuse_measurement
from .gridio import read_dogma, write_dogma
from .metrics import grid_metrics
from .runner import run_scenario

_MODES = {"integrate": "integrate", "center": "center_approx"}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridfusion",
        description="Evidential occupancy-grid fusion for connected vehicles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario through the fusion pipeline")
    run.add_argument("--config", required=True, help="scenario config file (key = value)")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument(
        "--mode",
        choices=sorted(_MODES),
        default=None,
        help="mass redistribution mode",
    )
    run.add_argument("--steps", type=int, default=None, help="override the step count")

    metrics = sub.add_parser("metrics", help="print uncertainty means of one snapshot")
    metrics.add_argument("--in", dest="path", required=True, help="grid snapshot file")

    fuse = sub.add_parser("fuse", help="fuse snapshot B into snapshot A")
    fuse.add_argument("--a", required=True, help="base grid snapshot")
    fuse.add_argument("--b", required=True, help="measurement grid snapshot")
    fuse.add_argument("--out", required=True, help="where to write the fused grid")

    sub.add_parser("version", help="print the package version")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    if args.command == "version":
        print(__version__)
        return 0

    if args.command == "run":
        mode = _MODES[args.mode] if args.mode else None
        return run_scenario(
            args.config, args.out, seed=args.seed, mode=mode, steps=args.steps
        )

    if args.command == "metrics":
        try:
            grid = read_dogma(args.path)
        except (OSError, ValueError) as exc:
            print(f"cannot read grid: {exc}", file=sys.stderr)
            return 1
        mean_h, mean_ns, mean_mf = grid_metrics(grid)
        print(f"mean_H={mean_h:.9g} mean_NS={mean_ns:.9g} mean_mF={mean_mf:.9g}")
        return 0

    if args.command == "fuse":
        try:
            base = read_dogma(args.a)
            measurement = read_dogma(args.b)
        except (OSError, ValueError) as exc:
            print(f"cannot read grid: {exc}", file=sys.stderr)
            return 1
        try:
            fused = base.copy()
            stats = fuse_measurement(fused, measurement, FusionConfig())
            write_dogma(fused, args.out)
        except (GridFusionError, OSError) as exc:
            print(f"fusion failed: {exc}", file=sys.stderr)
            return 2
        print(
            f"cells_fused={stats.cells_fused} cells_conflict={stats.cells_conflict}"
            f" mean_K={stats.mean_conflict:.9g}"
        )
        return 0

    return 2


if __name__ == "__main__":
    raise SystemExit(main())
