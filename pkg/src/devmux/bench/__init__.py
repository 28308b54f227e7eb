"""Benchmark and adversarial harness over the two driver stacks."""

from devmux.bench.config import BenchConfig, WorkloadSpec
from devmux.bench.world import World, build_world
from devmux.bench.workloads import make_program, run_workload
from devmux.bench.schedule import measure_switch, run_schedule
from devmux.bench.attacks import run_attacks

__all__ = ["BenchConfig", "WorkloadSpec", "World", "build_world",
           "make_program", "run_workload", "measure_switch", "run_schedule",
           "run_attacks"]
