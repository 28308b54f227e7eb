"""Run reports: per-iteration cost samples, final counters, result digests."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field

ITERATION_COLUMNS = ("simulated_time", "crossings", "bytes_copied",
                     "instructions_validated", "device_cycles", "core_calls")


@dataclass
class RunReport:
    spec: dict
    per_iteration: list = field(default_factory=list)
    ledger: dict = field(default_factory=dict)
    digests: dict = field(default_factory=dict)

    @property
    def first_iteration_time(self) -> float:
        return self.per_iteration[0]["simulated_time"] if self.per_iteration else 0.0

    def steady_times(self) -> list:
        """Per-iteration cost with the launch iteration discarded."""
        return [d["simulated_time"] for d in self.per_iteration[1:]]

    @property
    def steady_mean(self) -> float:
        steady = self.steady_times()
        return statistics.fmean(steady) if steady else 0.0

    def to_dict(self) -> dict:
        return {"spec": self.spec,
                "per_iteration": self.per_iteration,
                "ledger": self.ledger,
                "digests": self.digests,
                "first_iteration_time": self.first_iteration_time,
                "steady_mean": self.steady_mean}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        for key, value in sorted(self.spec.items()):
            writer.writerow([f"# spec.{key}", value])
        for key, value in sorted(self.digests.items()):
            writer.writerow([f"# digest.{key}", value])
        for key, value in sorted(self.ledger.items()):
            writer.writerow([f"# ledger.{key}", value])
        writer.writerow(("iteration",) + ITERATION_COLUMNS)
        for i, delta in enumerate(self.per_iteration, 1):
            writer.writerow([i] + [delta[c] for c in ITERATION_COLUMNS])
        return out.getvalue()

    def render(self, fmt: str = "json") -> str:
        return self.to_csv() if fmt == "csv" else self.to_json()
