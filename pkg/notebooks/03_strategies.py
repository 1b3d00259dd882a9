"""Accuracy of each sparse-update strategy under full supervision.

Run: python3 notebooks/03_strategies.py [seed]
"""
import sys

from ondevice_ft import benchmark as B
from ondevice_ft import costmodel as C

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
config = B.BenchmarkConfig()
baseline = B.pretrained_baseline(config)
flight = B.target_flight(seed, config)
costs = {r.strategy: r for r in C.cost_table()}

for strategy in ("all", "bn", "bias", "fc"):
    r = B.run_cell(baseline, flight, seed, "t_a", strategy, config=config)
    c = costs[strategy]
    print(f"{strategy:5} MAE {r.before.mae:.3f} -> {r.after.mae:.3f}  ({c.total_kib:7.1f} KiB, {c.total_mmac:6.2f} MMAC per frame)")
