"""
Gate and allocation costs
=========================

The cost model charges cycles per primitive. Measuring an empty
cross-compartment call and a function with a few shared locals shows how
the backends and sharing strategies compare, and how the numbers move when
one primitive gets more expensive.
"""
from dataclasses import replace

from flexsim import CostModel, Mechanism, Sharing
from flexsim.machine import measure_alloc_latency, measure_gate_latency

costs = CostModel()
light = measure_gate_latency(Mechanism.MPK_LIGHT, costs)
for mechanism in Mechanism:
    cycles = measure_gate_latency(mechanism, costs)
    print(f"{mechanism.value:<16} {cycles:>4} cycles  {cycles / light:5.2f}x light gate")

for strategy in Sharing:
    print(f"{strategy.value:<16}", [measure_alloc_latency(strategy, n, costs) for n in (1, 2, 3)])

# a slower key-switch instruction only moves the MPK gates
slow = replace(costs, wrpkru=2 * costs.wrpkru)
print({m.value: measure_gate_latency(m, slow) for m in Mechanism})
