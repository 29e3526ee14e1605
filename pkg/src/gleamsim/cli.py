"""Command line entry points: run, sweep, validate.

Exit codes: 0 success, 2 scenario error, 3 deadlock detected.
GLEAMSIM_LOG sets the stderr log level (DEBUG/INFO/WARNING/ERROR).
"""

import argparse
import logging
import os
import sys

from .harness import Scenario, ScenarioError, run, sweep
from .netsim import DeadlockError

log = logging.getLogger("gleamsim")

EXIT_OK = 0
EXIT_SCENARIO = 2
EXIT_DEADLOCK = 3


def _setup_logging() -> None:
    level = os.environ.get("GLEAMSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load(path: str, seed) -> Scenario:
    sc = Scenario.from_file(path)
    if seed is not None:
        sc.seed = seed
    return sc


def main(argv=None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(prog="gleamsim")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("--scenario", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--trace", default=None,
                       help="write a JSON-lines event trace to this path")

    p_sweep = sub.add_parser("sweep", help="run a loss-rate sweep")
    p_sweep.add_argument("--scenario", required=True)
    p_sweep.add_argument("--loss", required=True,
                         help="comma-separated loss rates, e.g. 0,1e-6,1e-4")
    p_sweep.add_argument("--seeds", type=int, default=5)
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", default=None)

    p_val = sub.add_parser("validate", help="check a scenario file")
    p_val.add_argument("--scenario", required=True)

    args = parser.parse_args(argv)
    try:
        if args.cmd == "validate":
            _load(args.scenario, None).validate()
            print("ok")
            return EXIT_OK
        if args.cmd == "run":
            sc = _load(args.scenario, args.seed)
            rep = run(sc, out_dir=args.out, trace_path=args.trace)
            for _, _, metric, value in rep.rows():
                print(f"{metric}={value}")
            return EXIT_OK
        if args.cmd == "sweep":
            sc = _load(args.scenario, args.seed)
            rates = [float(x) for x in args.loss.split(",") if x != ""]
            reports = sweep(sc, rates, seeds=args.seeds, out_dir=args.out)
            for rep in reports:
                ng = rep.normalized_goodput
                print(f"{rep.scenario} seed={rep.seed} goodput={rep.goodput_bps:.4g} "
                      f"normalized={ng if ng is None else round(ng, 6)}")
            return EXIT_OK
    except (ScenarioError, FileNotFoundError, ValueError) as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except DeadlockError as exc:
        print(f"deadlock: {exc}", file=sys.stderr)
        return EXIT_DEADLOCK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
