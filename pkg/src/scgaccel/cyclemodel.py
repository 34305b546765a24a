"""Analytical performance model of the accelerator's layer execution.

Per-layer cycle decomposition is total = prime + compute + requant with

    prime   = c_out * n_batches * c_in * 7
    compute = c_out * n_batches * c_in * K
    requant = n_outputs * cycles_per_output

where n_batches = ceil(w_in / 6).  Two requant conventions exist: the
published per-layer table reconciles with 6 cycles per pooled output
(counting batch-padding overhang positions), while the accompanying formula
text states 9 cycles per output.  Both are exposed; the table convention is
the default because it reproduces the published numbers exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from enum import Enum

from .errors import ConfigError
from .qnn import LayerSpec, NetworkSpec, PoolMode

PE_COUNT = 6          # systolic lanes, one spatial batch per pass
PRIME_CYCLES = 7      # pipeline fill latency per channel group
REQUANT_CYCLES_TABLE = 6    # 4 serial-multiplier stages + 2 overhead
REQUANT_CYCLES_FORMULA = 9  # 6 multiplier + 3 FSM/pack per the formula text

DEFAULT_CLOCK_HZ = 24_000_000
DEFAULT_POWER_MW = 8.55


class RequantConvention(str, Enum):
    TABLE1 = "table1"
    FORMULA = "formula"


@dataclass
class LayerCycles:
    prime: int
    compute: int
    requant: int
    n_batches: int
    n_outputs: int  # pooled outputs over all batches, padding positions included
    array_eff: float
    sys_eff: float

    @property
    def total(self) -> int:
        return self.prime + self.compute + self.requant


def array_efficiency(kernel: int) -> float:
    """Fraction of array cycles doing arithmetic: K / (K + 7)."""
    return kernel / (kernel + PRIME_CYCLES)


def system_efficiency(cycles: LayerCycles) -> float:
    """Useful compute relative to total layer time."""
    if cycles.compute == 0:
        return 0.0
    return cycles.compute / cycles.total


def pooled_outputs(layer: LayerSpec, w_in: int, n_batches: int) -> int:
    """Requantized outputs per layer, counting batch-padding overhang."""
    if layer.pool_mode == PoolMode.MAXPOOL2:
        return layer.c_out * n_batches * (PE_COUNT // 2)
    if layer.pool_mode == PoolMode.GLOBAL_AVG:
        # GAP collapses each channel to one value
        return layer.c_out
    return layer.c_out * w_in


def layer_cycles(layer: LayerSpec, w_in: int,
                 convention: RequantConvention = RequantConvention.TABLE1) -> LayerCycles:
    if w_in < 1:
        raise ConfigError("input length must be >= 1")
    n_batches = math.ceil(w_in / PE_COUNT)
    prime = layer.c_out * n_batches * layer.c_in * PRIME_CYCLES
    compute = layer.c_out * n_batches * layer.c_in * layer.kernel
    n_outputs = pooled_outputs(layer, w_in, n_batches)
    per_output = (REQUANT_CYCLES_TABLE if convention == RequantConvention.TABLE1
                  else REQUANT_CYCLES_FORMULA)
    requant = n_outputs * per_output
    lc = LayerCycles(prime=prime, compute=compute, requant=requant,
                     n_batches=n_batches, n_outputs=n_outputs,
                     array_eff=array_efficiency(layer.kernel), sys_eff=0.0)
    lc.sys_eff = system_efficiency(lc)
    return lc


@dataclass
class CycleReport:
    layers: list[LayerCycles]
    convention: RequantConvention
    clock_hz: float
    specs: list[LayerSpec] | None = None
    avg_power_mw: float | None = None
    measured_latency_s: float | None = None
    total_prime: int = field(init=False)
    total_compute: int = field(init=False)
    total_requant: int = field(init=False)

    def __post_init__(self):
        self.total_prime = sum(l.prime for l in self.layers)
        self.total_compute = sum(l.compute for l in self.layers)
        self.total_requant = sum(l.requant for l in self.layers)

    @property
    def total_cycles(self) -> int:
        return self.total_prime + self.total_compute + self.total_requant

    @property
    def latency_s(self) -> float:
        return self.total_cycles / self.clock_hz

    @property
    def fps(self) -> float:
        return self.clock_hz / self.total_cycles

    @property
    def total_macs(self) -> int:
        # every compute cycle drives all six lanes
        return PE_COUNT * self.total_compute

    @property
    def throughput_latency_s(self) -> float:
        """Latency used for throughput: the measured one when supplied."""
        return self.measured_latency_s if self.measured_latency_s else self.latency_s

    @property
    def mmacs_per_s(self) -> float:
        return self.total_macs / self.throughput_latency_s / 1e6

    @property
    def mops_per_s(self) -> float:
        return 2.0 * self.mmacs_per_s

    @property
    def energy_uj(self) -> float | None:
        if self.avg_power_mw is None:
            return None
        return self.avg_power_mw * self.throughput_latency_s * 1e3

    def to_dict(self) -> dict:
        return {
            "convention": self.convention.value,
            "clock_hz": self.clock_hz,
            "layers": [asdict(l) | {"total": l.total} for l in self.layers],
            "totals": {
                "prime": self.total_prime,
                "compute": self.total_compute,
                "requant": self.total_requant,
                "cycles": self.total_cycles,
            },
            "latency_s": self.latency_s,
            "fps": self.fps,
            "total_macs": self.total_macs,
            "measured_latency_s": self.measured_latency_s,
            "mmacs_per_s": self.mmacs_per_s,
            "mops_per_s": self.mops_per_s,
            "avg_power_mw": self.avg_power_mw,
            "energy_uj": self.energy_uj,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_text(self) -> str:
        """Aligned table mirroring the per-layer cycle breakdown."""
        header = (f"{'Layer':<6}{'Cin->Cout':>11}{'K':>4}{'Prime':>12}"
                  f"{'Compute':>12}{'Requant':>10}{'ArrayEff':>10}{'SysEff':>9}")
        lines = [header, "-" * len(header)]
        for i, lc in enumerate(self.layers):
            if self.specs is not None:
                spec = self.specs[i]
                chans, k = f"{spec.c_in}->{spec.c_out}", str(spec.kernel)
            else:
                chans, k = "", ""
            lines.append(
                f"L{i:<5}{chans:>11}{k:>4}{lc.prime:>12,}{lc.compute:>12,}"
                f"{lc.requant:>10,}{lc.array_eff:>9.1%}{lc.sys_eff:>9.1%}")
        lines.append("-" * len(header))
        lines.append(f"{'Total':<21}{self.total_prime:>12,}{self.total_compute:>12,}"
                     f"{self.total_requant:>10,}")
        lines.append(f"Cycles {self.total_cycles:,} | latency {self.latency_s * 1e3:.2f} ms"
                     f" | {self.fps:.2f} FPS @ {self.clock_hz / 1e6:.1f} MHz")
        lines.append(f"Throughput {self.mmacs_per_s:.1f} MMAC/s ({self.mops_per_s:.1f} MOps/s)"
                     + (f" | energy {self.energy_uj:.1f} uJ" if self.energy_uj else ""))
        return "\n".join(lines)


def network_report(net: NetworkSpec,
                   clock_hz: float = DEFAULT_CLOCK_HZ,
                   avg_power_mw: float | None = DEFAULT_POWER_MW,
                   measured_latency_s: float | None = None,
                   convention: RequantConvention = RequantConvention.TABLE1) -> CycleReport:
    if clock_hz <= 0:
        raise ConfigError("clock_hz must be positive")
    layers = [layer_cycles(layer, w_in, convention)
              for layer, w_in in zip(net.layers, net.layer_input_lengths())]
    return CycleReport(layers=layers, convention=convention, clock_hz=clock_hz,
                       specs=list(net.layers), avg_power_mw=avg_power_mw,
                       measured_latency_s=measured_latency_s)


def peak_mmacs(clock_hz: float = DEFAULT_CLOCK_HZ) -> float:
    """Theoretical peak: all six lanes MAC every cycle."""
    return PE_COUNT * clock_hz / 1e6
