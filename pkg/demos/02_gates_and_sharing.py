"""
Gates and data sharing
======================

A FlexC program is written once with cross-library calls left abstract.
Instantiating it for a configuration turns each of those calls into a plain
call or a gate, and moves shared locals to wherever the chosen sharing
strategy keeps them.
"""
from pathlib import Path

from flexsim import (
    CompartmentDecl,
    ImageConfig,
    Mechanism,
    Sharing,
    format_program,
    insert_gate_placeholders,
    instantiate,
    layout_report,
    parse_program,
)
from flexsim.source import format_function

DATA = Path(__file__).parent / "data"
program = parse_program((DATA / "netstack.flexc").read_text())

# cross-library calls become placeholders, printed as gate?(library, function, args)
print(format_program(insert_gate_placeholders(program)))


def config(mechanism, sharing):
    comps = [CompartmentDecl("comp1", mechanism, default=True), CompartmentDecl("comp2", mechanism)]
    return ImageConfig.build(comps, {"app": "comp1", "kvstore": "comp1", "lwip": "comp2"}, sharing)


# the same source bound three ways; only main is shown
for mechanism, sharing in [(Mechanism.FUNC_CALL, Sharing.SHARED_STACK),
                           (Mechanism.MPK_DSS, Sharing.DSS),
                           (Mechanism.EPT, Sharing.HEAP_CONVERSION)]:
    image = instantiate(program, config(mechanism, sharing))
    main = image.function_map["main"]
    print(f"--- {mechanism.value} / {sharing.value}")
    print(format_function(main))

# the linker-script view of the protected image
print(layout_report(instantiate(program, config(Mechanism.MPK_DSS, Sharing.DSS))))
