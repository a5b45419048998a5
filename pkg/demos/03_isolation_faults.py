"""
Watching isolation hold
=======================

Two small attacks run on the abstract machine: reading another library's
global, and a forged control transfer that lands in the victim's code while
keeping the attacker's rights. Both succeed in a single unprotected domain
and fault as soon as the libraries sit in separate compartments.
"""
from flexsim import CompartmentDecl, ImageConfig, Mechanism, Sharing, instantiate, parse_program, run

SNOOP = """
library app { fn main() { return vault.secret } }
library vault { var secret = 1234 }
"""

FORGE = """
library app {
  fn main() {
    var r = call vault_entry()
    return r
  }
  fn leak() { return app_key }
  var app_key = 77
}
library vault {
  fn vault_entry() {
    var r = forge leak()
    return r
  }
}
"""


def config(mechanism, split):
    sharing = Sharing.SHARED_STACK if mechanism in (Mechanism.FUNC_CALL, Mechanism.MPK_LIGHT) else Sharing.DSS
    comps = [CompartmentDecl("comp1", mechanism, default=True)]
    if split:
        comps.append(CompartmentDecl("comp2", mechanism))
    return ImageConfig.build(comps, {"app": "comp1", "vault": "comp2" if split else "comp1"}, sharing)


for name, text in [("snoop", SNOOP), ("forge", FORGE)]:
    program = parse_program(text)
    for mechanism in Mechanism:
        for split in (False, True):
            trace = run(instantiate(program, config(mechanism, split)))
            where = "split" if split else "together"
            if trace.fault:
                f = trace.fault
                outcome = f"fault in {f.compartment} touching key {f.owner_key} ({f.reason})"
            else:
                outcome = f"returned {trace.return_value}"
            print(f"{name:<6} {mechanism.value:<16} {where:<9} {outcome}")
