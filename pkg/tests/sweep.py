"""Seeded benchmark cells shared by the acceptance and sweep tests.

Each cell (seed, regime, strategy, dt) is computed once and stored in a JSON
file whose name hashes every package source file, so any code change starts
a fresh cache.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import ondevice_ft
from ondevice_ft import benchmark as B

ROOT = Path(__file__).resolve().parents[1]
SEEDS = tuple(range(5))
CONFIG = B.BenchmarkConfig(cache_dir=str(ROOT / ".ondevice_ft_cache"))


def _source_hash() -> str:
    h = hashlib.sha256()
    pkg = Path(ondevice_ft.__file__).parent
    for path in sorted(pkg.rglob("*")):
        if path.suffix in (".py", ".ttck"):
            h.update(path.relative_to(pkg).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()[:16]


class CellStore:
    def __init__(self, path: Path | None = None):
        self.path = path or Path(CONFIG.cache_dir) / f"cells-{_source_hash()}.json"
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {"cells": {}, "flights": {}}
        self._baseline = None
        self._flights = {}

    def _save(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=1, sort_keys=True))
        os.replace(tmp, self.path)

    def flight(self, seed: int):
        if seed not in self._flights:
            t = time.perf_counter()
            self._flights[seed] = B.target_flight(seed, CONFIG)
            self.data["flights"].setdefault(str(seed), time.perf_counter() - t)
        return self._flights[seed]

    def cell(self, seed: int, regime: str, strategy: str = "all", dt: float = 2.0) -> dict:
        key = f"{seed}/{regime}/{strategy}/{dt}"
        if key not in self.data["cells"]:
            if self._baseline is None:
                self._baseline = B.pretrained_baseline(CONFIG)
            flight = self.flight(seed)
            t = time.perf_counter()
            r = B.run_cell(self._baseline, flight, seed, regime, strategy, dt, CONFIG)
            self.data["cells"][key] = {
                "before": r.before.mae,
                "after": r.after.mae,
                "after_int8": r.after_int8.mae,
                "r2_after": r.after.r2_mean,
                "seconds": time.perf_counter() - t,
            }
            self._save()
        return self.data["cells"][key]

    def flight_seconds(self, seed: int) -> float:
        if str(seed) not in self.data["flights"]:
            self.flight(seed)
            self._save()
        return self.data["flights"][str(seed)]
