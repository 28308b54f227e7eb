"""Command line front end for the benchmark and containment suites."""

from __future__ import annotations

import argparse
import json
import sys

from ..errors import DevmuxError, VerifyFail
from .attacks import CASES, run_attacks
from .config import BenchConfig, DRIVERS, IOMMUS, WORKLOAD_KINDS, WorkloadSpec
from .schedule import measure_switch, run_schedule
from .workloads import run_workload


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="devmux-bench",
        description="Run workloads, scheduling, switch timing, and "
                    "containment checks on the simulated device.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one workload and report costs")
    run_p.add_argument("--driver", choices=DRIVERS, default="library")
    run_p.add_argument("--workload", choices=WORKLOAD_KINDS, default="matmul")
    run_p.add_argument("--size", type=int, default=4)
    run_p.add_argument("--iters", type=int, default=10)
    run_p.add_argument("--iommu", choices=IOMMUS, default="builtin")
    run_p.add_argument("--format", choices=("json", "csv"), default="json")
    run_p.add_argument("--config", metavar="FILE")

    sched_p = sub.add_parser("schedule",
                             help="interleave several library workloads")
    sched_p.add_argument("--libs", type=int, default=2)
    sched_p.add_argument("--epoch", type=int, default=2000,
                         help="device cycles per scheduling epoch")
    sched_p.add_argument("--workload", choices=WORKLOAD_KINDS, default="matmul")
    sched_p.add_argument("--size", type=int, default=4)
    sched_p.add_argument("--iters", type=int, default=3)
    sched_p.add_argument("--iommu", choices=IOMMUS, default="builtin")
    sched_p.add_argument("--config", metavar="FILE")

    switch_p = sub.add_parser("switch-time",
                              help="measure bare revoke+bind round-trips")
    switch_p.add_argument("--cycles", type=int, default=100)
    switch_p.add_argument("--pool-pages", type=int, default=None)
    switch_p.add_argument("--config", metavar="FILE")

    attack_p = sub.add_parser("attack", help="run the containment suite")
    attack_p.add_argument("--case", choices=sorted(CASES), default=None)
    attack_p.add_argument("--config", metavar="FILE")
    return parser


def _load_config(path) -> BenchConfig:
    return BenchConfig.from_file(path) if path else BenchConfig()


def _cmd_run(args) -> int:
    spec = WorkloadSpec(kind=args.workload, size=args.size, iters=args.iters,
                        driver=args.driver, iommu=args.iommu)
    report = run_workload(spec, _load_config(args.config))
    print(report.render(args.format))
    return 0


def _cmd_schedule(args) -> int:
    spec = WorkloadSpec(kind=args.workload, size=args.size, iters=args.iters,
                        driver="library", iommu=args.iommu)
    specs = [spec] * args.libs
    reports = run_schedule(specs, args.epoch, _load_config(args.config))
    print(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    return 0


def _cmd_switch(args) -> int:
    config = _load_config(args.config)
    report = measure_switch(config, pool_pages=args.pool_pages,
                            cycles=args.cycles)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0 if report.stdev == 0.0 else 1


def _cmd_attack(args) -> int:
    outcomes = run_attacks(_load_config(args.config), case=args.case)
    for outcome in outcomes:
        print(outcome.line())
    return 0 if all(o.passed for o in outcomes) else 1


_COMMANDS = {"run": _cmd_run, "schedule": _cmd_schedule,
             "switch-time": _cmd_switch, "attack": _cmd_attack}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except VerifyFail as e:
        print(f"VERIFY_FAIL: {e}", file=sys.stderr)
        return 1
    except DevmuxError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
