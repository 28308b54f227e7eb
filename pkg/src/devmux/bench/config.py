"""Benchmark configuration: cost constants and world sizing.

Config files are flat ``key = value`` lines (``#`` comments allowed); keys
match the BenchConfig field names.  Integer fields accept 0x-prefixed hex.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from devmux.errors import InvalError

WORKLOAD_KINDS = ("matmul", "vertex-array", "display-list")
DRIVERS = ("library", "legacy")
IOMMUS = ("system", "builtin")


@dataclass
class BenchConfig:
    # cost-model constants
    crossing_cost: float = 1000.0
    byte_cost: float = 0.25
    validated_cost: float = 2.0
    cycle_cost: float = 1.0
    core_call_cost: float = 10.0
    # world sizing
    pool_pages: int = 256
    legacy_pool_pages: int = 64
    segment_bytes: int = 1 << 20
    vram_bytes: int = 16 << 20
    sysmem_pages: int = 4096

    @classmethod
    def from_file(cls, path: str) -> "BenchConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InvalError(f"{path}:{lineno}: expected key = value")
                key, _, text = line.partition("=")
                key = key.strip()
                text = text.strip()
                if key not in types:
                    raise InvalError(f"{path}:{lineno}: unknown key {key!r}")
                try:
                    if types[key] in ("int", int):
                        values[key] = int(text, 0)
                    else:
                        values[key] = float(text)
                except ValueError as exc:
                    raise InvalError(f"{path}:{lineno}: bad value for {key}: {exc}")
        return cls(**values)


@dataclass
class WorkloadSpec:
    kind: str = "matmul"
    size: int = 4
    iters: int = 10
    driver: str = "library"
    iommu: str = "builtin"

    def __post_init__(self):
        if self.kind not in WORKLOAD_KINDS:
            raise InvalError(f"unknown workload {self.kind!r}")
        if self.driver not in DRIVERS:
            raise InvalError(f"unknown driver {self.driver!r}")
        if self.iommu not in IOMMUS:
            raise InvalError(f"unknown iommu {self.iommu!r}")
        if self.size < 1 or self.iters < 1:
            raise InvalError("size and iters must be at least 1")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)
