"""Walk through the analytical cycle model for the default network.

Reproduces the per-layer prime/compute/requant breakdown, then shows how the
derived latency, throughput, and energy figures follow from it, and how the
two requantization accounting conventions differ.
"""

from scgaccel.cyclemodel import RequantConvention, network_report, peak_mmacs
from scgaccel.qnn import NetworkSpec

net = NetworkSpec.default()

print("=== Per-layer cycle breakdown (table convention) ===")
report = network_report(net)
print(report.to_text())
print()

print("=== Derived figures with the measured 95.5 ms latency ===")
measured = network_report(net, measured_latency_s=0.0955)
print(f"MACs per inference : {measured.total_macs:,} "
      f"(6 lanes x {measured.total_compute:,} compute cycles)")
print(f"Throughput         : {measured.mmacs_per_s:.1f} MMAC/s "
      f"= {measured.mops_per_s:.1f} MOps/s")
print(f"Peak (all lanes)   : {peak_mmacs():.0f} MMAC/s at 24 MHz")
print(f"Utilization        : {measured.mmacs_per_s / peak_mmacs():.1%}")
print(f"Energy/inference   : {measured.energy_uj:.1f} uJ at "
      f"{measured.avg_power_mw} mW")
print()

print("=== Requant accounting conventions ===")
formula = network_report(net, convention=RequantConvention.FORMULA)
print(f"table convention  : {report.total_requant:>8,} requant cycles "
      f"(6 per pooled output)")
print(f"formula convention: {formula.total_requant:>8,} requant cycles "
      f"(9 per pooled output)")
print(f"difference on the total: {formula.total_cycles - report.total_cycles:,} "
      f"cycles ({(formula.total_cycles / report.total_cycles - 1):.2%})")
print()

print("=== Clock scaling (cycle counts are frequency independent) ===")
for mhz in (12, 24, 48):
    r = network_report(net, clock_hz=mhz * 1e6)
    print(f"{mhz:>3} MHz: {r.latency_s * 1e3:7.2f} ms  {r.fps:6.2f} FPS")
