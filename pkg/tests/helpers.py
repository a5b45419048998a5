"""Fixtures, generators and independent oracles shared by the test modules."""
from __future__ import annotations

import itertools
import random
from dataclasses import dataclass
from pathlib import Path

from flexsim.config import CompartmentDecl, ImageConfig, Mechanism, Sharing
from flexsim.source import parse_program

FIXTURES = Path(__file__).parent / "fixtures"
FLEXC = sorted((FIXTURES / "flexc").glob("*.flexc"))
GOLDEN = Path(__file__).parent / "golden"


def load_program(name: str):
    return parse_program((FIXTURES / "flexc" / name).read_text())


def default_sharing(mechanism: Mechanism) -> Sharing:
    return Sharing.SHARED_STACK if mechanism in (Mechanism.MPK_LIGHT, Mechanism.FUNC_CALL) else Sharing.DSS


def split_config(program, mechanism: Mechanism, sharing: Sharing | None = None) -> ImageConfig:
    """One compartment per library, the first one default."""
    libs = program.library_names
    comps = [CompartmentDecl(f"c{i}", mechanism, default=(i == 0)) for i in range(len(libs))]
    return ImageConfig.build(comps, {lib: f"c{i}" for i, lib in enumerate(libs)},
                             sharing or default_sharing(mechanism))


def single_config(program, mechanism: Mechanism = Mechanism.MPK_DSS) -> ImageConfig:
    return ImageConfig.build([CompartmentDecl("main", mechanism, default=True)],
                             {lib: "main" for lib in program.library_names}, default_sharing(mechanism))


# ---------------------------------------------------------------------------
# safety dominance restated from first principles

MECH_RANK = {Mechanism.FUNC_CALL: 0, Mechanism.MPK_LIGHT: 1, Mechanism.MPK_DSS: 2, Mechanism.EPT: 3}
SHARING_RANK = {Sharing.SHARED_STACK: 0, Sharing.DSS: 1, Sharing.HEAP_CONVERSION: 2}


def oracle_dominates(a: ImageConfig, b: ImageConfig) -> bool:
    blocks_a = [{lib for lib, c in a.libraries if c == comp.name} for comp in a.compartments]
    blocks_b = [{lib for lib, c in b.libraries if c == comp.name} for comp in b.compartments]
    refined = all(any(x <= y for y in blocks_b if y) for x in blocks_a if x)
    hard = all(a.hardening_of(lib) >= b.hardening_of(lib) for lib, _ in a.libraries)
    mech = min(MECH_RANK[c.mechanism] for c in a.compartments) >= min(MECH_RANK[c.mechanism] for c in b.compartments)
    return refined and hard and mech and SHARING_RANK[a.sharing] >= SHARING_RANK[b.sharing]


# ---------------------------------------------------------------------------
# set partitions, independent of the library code

def set_partitions(items: list):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


# ---------------------------------------------------------------------------
# isolation cases: two libraries, app in c0 (default) and lib in c1

ISOLATING = (Mechanism.MPK_LIGHT, Mechanism.MPK_DSS, Mechanism.EPT)


@dataclass
class IsolationCase:
    kind: str
    text: str
    config: ImageConfig
    expect_fault: bool
    fault_key: int | None = None  # domain that owns the touched data
    value: int | None = None


def _noise(rng: random.Random, prefix: str) -> tuple[list[str], str]:
    """A few private locals folded into an expression that evaluates to 0."""
    names = [f"{prefix}{i}" for i in range(rng.randint(0, 3))]
    lines = [f"var {n} = {rng.randint(0, 50)}" for n in names]
    lines += [f"{n} = {n} + {rng.randint(1, 9)}" for n in names if rng.random() < 0.5]
    return lines, "0"


def isolation_case(rng: random.Random, mechanism: Mechanism, kind: str | None = None) -> IsolationCase:
    if mechanism is Mechanism.MPK_LIGHT:
        sharing = Sharing.SHARED_STACK
    else:
        sharing = rng.choice([Sharing.DSS, Sharing.HEAP_CONVERSION, Sharing.SHARED_STACK])
    config = ImageConfig.build(
        [CompartmentDecl("c0", mechanism, default=True), CompartmentDecl("c1", mechanism)],
        {"app": "c0", "lib": "c1"}, sharing)
    kinds = ["read_foreign_global", "write_foreign_global", "callee_reads_caller_global",
             "callee_reads_private_stack", "callee_writes_private_stack", "callee_reads_private_heap",
             "shared_stack_var", "shared_heap_var", "shared_lib_global", "shared_app_global"]
    kind = kind or rng.choice(kinds)
    v, k = rng.randint(1, 10_000), rng.randint(1, 1000)
    noise, _ = _noise(rng, "t")
    lib_noise, _ = _noise(rng, "u")
    stack_private = sharing is not Sharing.SHARED_STACK
    app_globals, lib_globals, app_body, lib_fns = [], [], list(noise), []
    expect_fault, fault_key, value = False, None, None

    if kind == "read_foreign_global":
        lib_globals.append(f"var g = {v}")
        app_body.append("return lib.g")
        expect_fault, fault_key = True, 2
    elif kind == "write_foreign_global":
        lib_globals.append(f"var g = {v}")
        app_body += [f"lib.g = {k}", "return 0"]
        expect_fault, fault_key = True, 2
    elif kind == "callee_reads_caller_global":
        app_globals.append(f"var g = {v}")
        app_body += ["var r = call peek()", "return r"]
        lib_fns.append(("peek", "", lib_noise + ["return app.g"]))
        expect_fault, fault_key = True, 1
    elif kind == "callee_reads_private_stack":
        app_body += [f"var x = {v}", "var r = call rd(&x)", "return r"]
        lib_fns.append(("rd", "p", lib_noise + ["return *p"]))
        expect_fault, fault_key, value = stack_private, 1, v
    elif kind == "callee_writes_private_stack":
        app_body += [f"var x = {v}", f"call wr(&x, {k})", "return x"]
        lib_fns.append(("wr", "p, k", lib_noise + ["*p = k"]))
        expect_fault, fault_key, value = stack_private, 1, k
    elif kind == "callee_reads_private_heap":
        app_body += [f"var x storage=heap = {v}", "var r = call rd(&x)", "return r"]
        lib_fns.append(("rd", "p", lib_noise + ["return *p"]))
        expect_fault, fault_key = True, 1
    elif kind in ("shared_stack_var", "shared_heap_var"):
        storage = " storage=heap" if kind == "shared_heap_var" else ""
        app_body += [f"var x shared(lib){storage} = {v}", f"var r = call upd(&x, {k})", "return x + r"]
        lib_fns.append(("upd", "p, k", lib_noise + ["*p = *p + k", "return *p"]))
        value = 2 * (v + k)
    elif kind == "shared_lib_global":
        lib_globals.append(f"var g shared(app) = {v}")
        app_body += [f"lib.g = lib.g + {k}", "var r = call get()", "return r"]
        lib_fns.append(("get", "", lib_noise + ["return g"]))
        value = v + k
    elif kind == "shared_app_global":
        app_globals.append(f"var g shared(lib) = {v}")
        app_body += [f"call add({k})", "return g"]
        lib_fns.append(("add", "k", lib_noise + ["app.g = app.g + k"]))
        value = v + k
    else:
        raise ValueError(kind)
    if not lib_fns:
        lib_fns.append(("idle", "", ["return 0"]))

    def block(lines):
        return "\n".join("    " + line for line in lines)

    text = "library app {\n" + "".join(f"  {g}\n" for g in app_globals)
    text += "  fn main() {\n" + block(app_body) + "\n  }\n}\n"
    text += "library lib {\n" + "".join(f"  {g}\n" for g in lib_globals)
    for name, params, body in lib_fns:
        text += f"  fn {name}({params}) {{\n" + block(body) + "\n  }\n"
    text += "}\n"
    return IsolationCase(kind, text, config, expect_fault, fault_key if expect_fault else None,
                         None if expect_fault else value)


# ---------------------------------------------------------------------------
# MSpec documents sampling the whole grammar

ACCESS = ["U", "R", "W", "R*", "W*"]
EXEC = ["U", "X", "X*"]


def _designator(rng: random.Random, names: list[str]) -> tuple[str, str]:
    if rng.random() < 0.6:
        return rng.choice(names), "symbol"
    n = rng.randint(0, 0xFFFF)
    return (hex(n) if rng.random() < 0.5 else str(n)), "number"


def mspec_document(rng: random.Random, coverage: set) -> str:
    names = ["netbuf", "heap_base", "rx_ring", "lwip_recv", "vfs_open", "sched_yield", "x.y"]
    comps = []
    for ci in range(rng.randint(1, 3)):
        parts = [f"component comp_{ci}_{rng.randint(0, 99)} {{"]

        def mem_rules():
            out = []
            for _ in range(rng.randint(0, 3)):
                target, how = _designator(rng, names)
                access = rng.choice(["R", "W"])
                size = rng.randint(1, 65536)
                if rng.random() < 0.5:
                    memtype = f"SEG:{rng.choice(['shbufs', 'data', 'bss.sec'])}"
                    coverage.add("memtype:segment")
                else:
                    memtype = "ADDR"
                    coverage.add("memtype:address")
                coverage.add(f"designator:{how}")
                out.append(f"({target}, {access}, {size}, {memtype})")
            return "{ " + " ".join(out) + " }"

        def exec_rules():
            out = []
            for _ in range(rng.randint(0, 3)):
                if rng.random() < 0.5:
                    out.append(f"({rng.choice(names[:6])}, SYMB)")
                    coverage.add("exec:SYMB")
                else:
                    out.append(f"({hex(rng.randint(0, 4096))}, ADDR)")
                    coverage.add("exec:ADDR")
            return "{ " + " ".join(out) + " }"

        def maybe(mods, tag):
            if rng.random() < 0.8:
                m = rng.choice(mods)
                coverage.add(f"{tag}:{m}")
                return m + " "
            return ""

        if rng.random() < 0.8:
            parts.append("  [Memory Access] " + maybe(ACCESS, "access") + mem_rules())
        if rng.random() < 0.8:
            parts.append("  [Call] " + maybe(EXEC, "exec") + exec_rules())
        if rng.random() < 0.7:
            parts.append("  [API] " + exec_rules())
        n_req = rng.choice([0, 1, 2, 3])
        if n_req >= 2:
            coverage.add("requires:repeated")
        for _ in range(n_req):
            form = rng.random()
            if form < 0.4:
                parts.append("  [Requires] " + maybe(ACCESS, "access") + mem_rules())
                coverage.add("requires:memory")
            elif form < 0.7:
                clauses = " ".join(maybe(EXEC, "exec") + exec_rules() for _ in range(rng.randint(1, 2)))
                parts.append("  [Requires] { " + clauses + " }")
                coverage.add("requires:call-group")
            else:
                m = rng.choice(["X", "X*"])
                coverage.add(f"exec:{m}")
                parts.append(f"  [Requires] {m} " + exec_rules())
                coverage.add("requires:call")
        if rng.random() < 0.2:
            parts.append("  # trailing comment")
        parts.append("}")
        comps.append("\n".join(parts))
    return "\n".join(comps) + "\n"


GRAMMAR_PRODUCTIONS = (
    {f"access:{a}" for a in ACCESS} | {f"exec:{e}" for e in EXEC}
    | {"exec:SYMB", "exec:ADDR", "memtype:segment", "memtype:address", "designator:symbol",
       "designator:number", "requires:repeated", "requires:memory", "requires:call", "requires:call-group"}
)


def all_pairs(items):
    return itertools.permutations(items, 2)
