"""Fine-tune the deployed int8 baseline on one simulated target flight.

Compares supervised fine-tuning against the self-supervised state-consistency
regimes on a single seed. Takes a few minutes on one core.

Run: python3 notebooks/02_fine_tune_one_flight.py [seed]
"""
import sys

from ondevice_ft import benchmark as B

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
config = B.BenchmarkConfig()
baseline = B.pretrained_baseline(config)
flight = B.target_flight(seed, config)

for regime in ("t_a", "sc_dm_sm", "sc_do_sm", "sc_do_si", "t_r32_sc"):
    r = B.run_cell(baseline, flight, seed, regime, "all", config=config)
    print(f"{regime:9} MAE before {r.before.mae:.3f}  after {r.after.mae:.3f}  after int8 {r.after_int8.mae:.3f}")
