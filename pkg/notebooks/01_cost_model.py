"""Per-frame memory and compute of each sparse-update strategy.

Run: python3 notebooks/01_cost_model.py
"""
from ondevice_ft import costmodel as C
from ondevice_ft import model as M

arch = M.build_reference_architecture()
print(f"{'strategy':8} {'params k':>9} {'memory KiB':>11} {'FW':>7} {'BW-IG':>7} {'BW-WG':>7} {'MMAC':>7}")
for r in C.cost_table(arch):
    print(f"{r.strategy:8} {r.params_k:9.1f} {r.total_kib:11.1f} {r.fw_mmac:7.2f} {r.bw_ig_mmac:7.2f} {r.bw_wg_mmac:7.2f} {r.total_mmac:7.3f}")

# the analytic count equals what the instrumented kernels actually execute
measured = C.empirical_mac_counter(arch, "all")
print(f"\nmeasured all-step MACs {measured.total / 1e6:.3f} M, inference {C.empirical_mac_counter(arch).fw / 1e6:.3f} M")
