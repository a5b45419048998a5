"""
Component specs and co-location checks
======================================

Each component states what it does to memory and control flow, and what it
is willing to tolerate from anything placed in the same compartment. Here we
load three specs, check two placements against them and ask for the
smallest placement that satisfies every requirement.
"""
from pathlib import Path

from flexsim import check_requires, parse_config, parse_mspec, parse_program, serialize_mspec
from flexsim.mspec import partition_config, suggest_partition

DATA = Path(__file__).parent / "data"

specs = parse_mspec((DATA / "components.mspec").read_text())
program = parse_program((DATA / "netstack.flexc").read_text())
for spec in specs:
    print(f"{spec.name:<8} memory={spec.effective_memory.value:<3} calls={spec.effective_call.value:<3} "
          f"requires={len(spec.requires_mem) + len(spec.requires_call)}")

# the canonical text form parses back to the same specs
assert parse_mspec(serialize_mspec(specs)) == specs

# lwip sits alone in the shipped configuration, so nothing conflicts
split = parse_config((DATA / "split.conf").read_text())
print("split placement:", check_requires(specs, split, program) or "no findings")

# putting everything together violates lwip's read-only requirement
together = partition_config([["lwip", "app", "kvstore"]])
for v in check_requires(specs, together, program):
    print(f"together: {v.kind}: {v.message}")

# the smallest valid placement
print("suggested blocks:", suggest_partition(specs, max_compartments=15))
