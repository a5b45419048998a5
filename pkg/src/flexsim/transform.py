"""Build-time instantiation of abstract gates and shared-data annotations.

``insert_gate_placeholders`` marks every cross-library call; ``instantiate``
then binds each placeholder to a concrete gate for the configured backend,
rewrites shared variables for the chosen sharing strategy and lays out
memory. The result is an :class:`Image` that the machine can execute.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Mapping

from .config import (
    ImageConfig,
    Mechanism,
    Sharing,
    config_from_json,
    config_to_json,
    validate_config,
)
from .errors import FlexError
from .source import (
    Add,
    AddrOf,
    Assign,
    Call,
    Deref,
    Forge,
    FunctionDef,
    GateCall,
    GatePlaceholder,
    IndirectCall,
    Lit,
    Program,
    Reg,
    Return,
    Storage,
    VarDecl,
    VarRef,
    from_json,
    to_json,
)

PAGE_SIZE = 4096
DEFAULT_STACK_SIZE = 8 * PAGE_SIZE
BASE_ADDRESS = 0x10000
HEAP_SIZE = 16 * PAGE_SIZE
RPC_AREA_SIZE = PAGE_SIZE
CODE_BASE = 0x1000
CODE_STRIDE = 16
WORD = 8
MAX_GATE_ARGS = 6

GATE_KINDS = {
    Mechanism.MPK_LIGHT: "mpk-light",
    Mechanism.MPK_DSS: "mpk-full",
    Mechanism.EPT: "ept-rpc",
}


class TransformError(FlexError):
    pass


class ConfigInvalid(TransformError):
    pass


class UnsupportedCombination(ConfigInvalid):
    pass


class GateArityError(TransformError):
    pass


class Role(enum.Enum):
    DATA = "data"
    HEAP = "heap"
    STACK = "stack"
    DSS_UPPER = "dss"
    SHARED_HEAP = "shared-heap"
    RPC_AREA = "rpc"


@dataclass(frozen=True)
class Region:
    name: str
    start: int
    size: int
    owner: str | None  # compartment, None for the common shared heap
    shared_with: frozenset[str]
    role: Role
    key: int  # protection key; 0 is the shared domain

    @property
    def end(self) -> int:
        return self.start + self.size

    def contains(self, address: int) -> bool:
        return self.start <= address < self.end

    def accessible_from(self, compartment: str) -> bool:
        return (self.owner == compartment and self.key != 0) or compartment in self.shared_with

    @property
    def is_private(self) -> bool:
        return not self.shared_with


@dataclass(frozen=True)
class MemoryLayout:
    regions: tuple[Region, ...]

    def find(self, address: int) -> Region | None:
        for r in self.regions:
            if r.contains(address):
                return r
        return None

    def select(self, role: Role, owner: str | None = None) -> list[Region]:
        return [r for r in self.regions if r.role is role and (owner is None or r.owner == owner)]

    def one(self, role: Role, owner: str | None = None) -> Region:
        found = self.select(role, owner)
        if len(found) != 1:
            raise KeyError(f"{len(found)} {role.value} regions for {owner}")
        return found[0]

    def address_space(self, compartment: str) -> list[Region]:
        """Regions mapped in a compartment's view of memory."""
        return [r for r in self.regions if r.accessible_from(compartment)]

    def is_disjoint(self) -> bool:
        ordered = sorted(self.regions, key=lambda r: r.start)
        return all(a.end <= b.start for a, b in zip(ordered, ordered[1:]))


@dataclass(frozen=True)
class GlobalSlot:
    library: str
    name: str
    address: int
    init: int
    placement: str  # "global" | "shared_global"


@dataclass(frozen=True)
class Image:
    config: ImageConfig
    functions: tuple[FunctionDef, ...]
    globals: tuple[GlobalSlot, ...]
    layout: MemoryLayout
    stack_size: int
    entry: str = "main"
    legal_entries: tuple[tuple[str, frozenset[str]], ...] = ()
    code_addresses: tuple[tuple[str, int], ...] = ()

    @cached_property
    def function_map(self) -> dict[str, FunctionDef]:
        return {fn.name: fn for fn in self.functions}

    @cached_property
    def global_map(self) -> dict[tuple[str, str], GlobalSlot]:
        return {(g.library, g.name): g for g in self.globals}

    @cached_property
    def code_address_map(self) -> dict[str, int]:
        return dict(self.code_addresses)

    @cached_property
    def legal_entry_map(self) -> dict[str, frozenset[str]]:
        return dict(self.legal_entries)

    @property
    def mechanism(self) -> Mechanism:
        return self.config.mechanism

    @property
    def isolated(self) -> bool:
        return _is_isolated(self.config)

    def compartment_of(self, function: str) -> str:
        return self.config.compartment_of(self.function_map[function].library)

    @property
    def code_units(self) -> dict[str, list[str]]:
        units: dict[str, list[str]] = {c: [] for c in self.config.compartment_names}
        for fn in self.functions:
            units[self.config.compartment_of(fn.library)].append(fn.name)
        return units


def check_stack_size(stack_size: int) -> int:
    if stack_size < PAGE_SIZE or stack_size & (stack_size - 1):
        raise ValueError(f"stack size must be a power of two >= {PAGE_SIZE}, got {stack_size}")
    return stack_size


def _is_isolated(config: ImageConfig) -> bool:
    return config.mechanism not in (None, Mechanism.FUNC_CALL) and len(config.compartments) > 1


def _align(n: int) -> int:
    return max(PAGE_SIZE, -(-n // PAGE_SIZE) * PAGE_SIZE)


# ---------------------------------------------------------------------------
# gate placeholders

def wrapper_name(caller_library: str, target: str) -> str:
    return f"__wrap_{caller_library}__{target}"


def insert_gate_placeholders(program: Program) -> Program:
    """Replace cross-library calls with gate placeholders.

    Indirect calls whose target set spans libraries dispatch cross-library
    targets through generated wrappers that hold the placeholder. Running
    this on an already annotated program changes nothing.
    """
    funcs = program.functions()
    owner = {name: fn.library for name, fn in funcs.items()}
    wrappers: dict[str, list[FunctionDef]] = {}
    made: set[str] = set()
    libs = []
    for lib in program.libraries:
        new_fns = []
        for fn in lib.functions:
            body = []
            for s in fn.body:
                if isinstance(s, Call) and owner[s.callee] != lib.name:
                    s = GatePlaceholder(lib.name, owner[s.callee], s.callee, s.args, s.dest)
                elif isinstance(s, IndirectCall) and not s.wrappers:
                    pairs = []
                    for t in s.targets:
                        if owner[t] == lib.name:
                            continue
                        w = wrapper_name(lib.name, t)
                        pairs.append((t, w))
                        if w not in made and w not in funcs:
                            made.add(w)
                            params = tuple(f"a{i}" for i in range(len(funcs[t].params)))
                            # the return value travels through %r0 so the wrapper allocates nothing
                            wbody = (
                                GatePlaceholder(lib.name, owner[t], t, tuple(VarRef(p) for p in params), Reg(0)),
                                Return(Reg(0)),
                            )
                            wrappers.setdefault(lib.name, []).append(FunctionDef(w, lib.name, params, wbody))
                    if pairs:
                        s = replace(s, wrappers=tuple(pairs))
                body.append(s)
            new_fns.append(replace(fn, body=tuple(body)))
        libs.append((lib, new_fns))
    return Program(tuple(
        replace(lib, functions=tuple(fns) + tuple(wrappers.get(lib.name, ())))
        for lib, fns in libs
    ))


# ---------------------------------------------------------------------------
# data-sharing rewrites

def shadow_ref(name: str, stack_size: int) -> Deref:
    """``*(&name + STACK_SIZE)``: the variable's slot in the data shadow stack."""
    return Deref(Add(AddrOf(VarRef(name)), Lit(stack_size)))


def _shadow_expr(e, shadowed: set[str], size: int):
    if isinstance(e, VarRef) and e.name in shadowed:
        return shadow_ref(e.name, size)
    if isinstance(e, AddrOf) and isinstance(e.target, VarRef) and e.target.name in shadowed:
        return Add(e, Lit(size))
    if isinstance(e, Deref):
        return Deref(_shadow_expr(e.pointer, shadowed, size))
    if isinstance(e, Add):
        return Add(_shadow_expr(e.left, shadowed, size), _shadow_expr(e.right, shadowed, size))
    return e


def _shadow_stmt(s, shadowed: set[str], size: int):
    def rw(e):
        return None if e is None else _shadow_expr(e, shadowed, size)

    if isinstance(s, VarDecl):
        return replace(s, init=rw(s.init))
    if isinstance(s, Assign):
        return Assign(rw(s.target), rw(s.value))
    if isinstance(s, Return):
        return Return(rw(s.value))
    if isinstance(s, IndirectCall):
        return replace(s, pointer=rw(s.pointer), args=tuple(rw(a) for a in s.args), dest=rw(s.dest))
    if isinstance(s, (Call, Forge, GatePlaceholder, GateCall)):
        return replace(s, args=tuple(rw(a) for a in s.args), dest=rw(s.dest))
    return s


# ---------------------------------------------------------------------------
# instantiation

def _needs_sharing(decl: VarDecl, home: str, config: ImageConfig) -> bool:
    libmap = config.library_map
    return any(lib in libmap and libmap[lib] != home for lib in decl.shared_with or ())


def _bind_function(fn: FunctionDef, config: ImageConfig, isolated: bool, stack_size: int) -> FunctionDef:
    libmap = config.library_map
    home = libmap[fn.library]
    sharing = config.sharing
    shadowed: set[str] = set()
    body = []
    for s in fn.body:
        if isinstance(s, VarDecl):
            shared = isolated and _needs_sharing(s, home, config)
            if s.storage is Storage.HEAP:
                placement = "shared_heap" if shared else "heap"
            elif shared and sharing is Sharing.DSS:
                placement = "dss"
            elif shared and sharing is Sharing.HEAP_CONVERSION:
                placement = "shared_heap"
            else:
                placement = "stack"
            if placement == "dss":
                init = _shadow_expr(s.init, shadowed, stack_size) if s.init is not None else None
                shadowed.add(s.name)
                body.append(replace(s, init=None, placement=placement))
                if init is not None:
                    body.append(Assign(shadow_ref(s.name, stack_size), init))
                continue
            s = replace(s, placement=placement)
        s = _shadow_stmt(s, shadowed, stack_size) if shadowed else s
        if isinstance(s, GatePlaceholder):
            target = libmap[s.callee_library]
            if not isolated or target == home:
                s = Call(s.callee, s.args, s.dest)
            else:
                if len(s.args) > MAX_GATE_ARGS:
                    raise GateArityError(
                        f"{fn.name}: gate to {s.callee} passes {len(s.args)} arguments (at most {MAX_GATE_ARGS})")
                s = GateCall(GATE_KINDS[config.mechanism], s.callee, s.args, s.dest, home, target)
        body.append(s)
    return replace(fn, body=tuple(body))


def _drop_local_wrappers(fn: FunctionDef, owner: dict[str, str], libmap: dict[str, str], isolated: bool) -> FunctionDef:
    home = libmap[fn.library]
    body = []
    for s in fn.body:
        if isinstance(s, IndirectCall) and s.wrappers:
            kept = tuple((t, w) for t, w in s.wrappers if isolated and libmap[owner[t]] != home)
            s = replace(s, wrappers=kept)
        body.append(s)
    return replace(fn, body=tuple(body))


def _build(
    program: Program,
    config: ImageConfig,
    stack_size: int,
    exports: Mapping[str, Iterable[str]] | None,
    entry: str,
) -> Image:
    check_stack_size(stack_size)
    mech = config.mechanism
    if mech is Mechanism.MPK_LIGHT and config.sharing is not Sharing.SHARED_STACK:
        raise UnsupportedCombination(
            f"light MPK gates share the stack and cannot be combined with sharing={config.sharing.value}")
    report = validate_config(config)
    if report.errors:
        raise ConfigInvalid("; ".join(v.message for v in report.errors))
    # libraries the config does not mention live in the default compartment
    missing = [lib for lib in program.library_names if lib not in config.library_map]
    if missing:
        home = config.default_compartment
        config = replace(config, libraries=config.libraries + tuple((lib, home) for lib in missing))
    libmap = config.library_map

    isolated = _is_isolated(config)
    owner = {name: fn.library for name, fn in program.functions().items()}

    # functions; wrappers that only serve same-compartment targets disappear
    functions = [
        _drop_local_wrappers(fn, owner, libmap, isolated)
        for lib in program.libraries for fn in lib.functions
    ]
    used = {w for fn in functions for s in fn.body if isinstance(s, IndirectCall) for _, w in s.wrappers}
    generated = {fn.name for fn in functions if fn.name.startswith("__wrap_")}
    functions = [fn for fn in functions if fn.name not in generated or fn.name in used]
    functions = [_bind_function(fn, config, isolated, stack_size) for fn in functions]

    # globals
    private: dict[str, list] = {c: [] for c in config.compartment_names}
    shared_globals = []
    for lib in program.libraries:
        home = libmap[lib.name]
        for g in lib.globals:
            init = g.init.value if g.init is not None else 0
            if isolated and _needs_sharing(g, home, config):
                shared_globals.append((lib.name, g.name, init))
            else:
                private[home].append((lib.name, g.name, init))

    # layout
    comps = config.compartment_names
    everyone = frozenset(comps)
    regions: list[Region] = []
    slots: list[GlobalSlot] = []
    addr = BASE_ADDRESS

    def add(name, size, owner_, shared, role, key):
        nonlocal addr
        regions.append(Region(name, addr, size, owner_, shared, role, key))
        addr += size
        return regions[-1]

    for i, comp in enumerate(comps):
        key = i + 1
        data = add(f"{comp}.data", _align(WORD * len(private[comp])), comp, frozenset(), Role.DATA, key)
        for j, (lib, name, init) in enumerate(private[comp]):
            slots.append(GlobalSlot(lib, name, data.start + WORD * j, init, "global"))
        add(f"{comp}.heap", HEAP_SIZE, comp, frozenset(), Role.HEAP, key)
        if isolated and config.sharing is Sharing.SHARED_STACK:
            add(f"{comp}.stack", stack_size, comp, everyone, Role.STACK, 0)
        else:
            add(f"{comp}.stack", stack_size, comp, frozenset(), Role.STACK, key)
        if isolated and config.sharing is Sharing.DSS:
            add(f"{comp}.dss", stack_size, comp, everyone, Role.DSS_UPPER, 0)
        if isolated and mech is Mechanism.EPT:
            add(f"{comp}.rpc", RPC_AREA_SIZE, comp, everyone, Role.RPC_AREA, 0)
    if isolated:
        heap = add("shared.heap", HEAP_SIZE + _align(WORD * len(shared_globals)), None, everyone, Role.SHARED_HEAP, 0)
        for j, (lib, name, init) in enumerate(shared_globals):
            slots.append(GlobalSlot(lib, name, heap.start + WORD * j, init, "shared_global"))

    # legal RPC entry points per compartment: every gate target plus exported API
    legal: dict[str, set[str]] = {c: set() for c in comps}
    for fn in functions:
        for s in fn.body:
            if isinstance(s, GateCall):
                legal[s.target].add(s.callee)
    defined = {fn.name for fn in functions}
    for lib, names in (exports or {}).items():
        if lib in libmap:
            legal[libmap[lib]].update(n for n in names if n in defined)

    return Image(
        config=config,
        functions=tuple(functions),
        globals=tuple(sorted(slots, key=lambda g: g.address)),
        layout=MemoryLayout(tuple(regions)),
        stack_size=stack_size,
        entry=entry,
        legal_entries=tuple((c, frozenset(legal[c])) for c in comps),
        code_addresses=tuple((fn.name, CODE_BASE + CODE_STRIDE * i) for i, fn in enumerate(functions)),
    )


def instantiate(
    program: Program,
    config: ImageConfig,
    stack_size: int = DEFAULT_STACK_SIZE,
    exports: Mapping[str, Iterable[str]] | None = None,
    entry: str = "main",
) -> Image:
    """Bind gates and sharing for ``config``.

    ``program`` may be raw or already passed through
    :func:`insert_gate_placeholders`; placeholders are inserted when missing.
    ``exports`` maps a library to extra functions accepted as RPC entry points.
    """
    return _build(insert_gate_placeholders(program), config, stack_size, exports, entry)


def ungated_image(program: Program, stack_size: int = DEFAULT_STACK_SIZE, entry: str = "main") -> Image:
    """The program as written, every library in one unprotected domain."""
    from .config import CompartmentDecl

    config = ImageConfig.build(
        [CompartmentDecl("comp1", Mechanism.FUNC_CALL, default=True)],
        {lib: "comp1" for lib in program.library_names},
        Sharing.SHARED_STACK,
    )
    return _build(program, config, stack_size, None, entry)


# ---------------------------------------------------------------------------
# reports and serialization

def region_to_json(r: Region) -> dict:
    return {
        "name": r.name,
        "start": r.start,
        "size": r.size,
        "owner": r.owner,
        "shared_with": sorted(r.shared_with),
        "role": r.role.value,
        "key": r.key,
    }


def layout_report(image: Image, fmt: str = "text") -> str:
    """Region listing sorted by start address (the linker-script analogue)."""
    regions = sorted(image.layout.regions, key=lambda r: r.start)
    if fmt == "json":
        return json.dumps([region_to_json(r) for r in regions], indent=2)
    lines = [f"# {len(regions)} regions, stack size {image.stack_size}, "
             f"mechanism {image.mechanism.value}, sharing {image.config.sharing.value}"]
    for r in regions:
        shared = ",".join(sorted(r.shared_with)) or "-"
        lines.append(
            f"{r.start:#010x}-{r.end - 1:#010x} {r.size:>7} {r.role.value:<11} "
            f"owner={r.owner or '-':<8} key={r.key:<2} shared={shared}  {r.name}"
        )
    for g in image.globals:
        lines.append(f"  {g.address:#010x} {g.library}.{g.name} ({g.placement})")
    return "\n".join(lines) + "\n"


def image_to_json(image: Image) -> dict:
    return {
        "format": "flexsim-image/1",
        "entry": image.entry,
        "stack_size": image.stack_size,
        "config": config_to_json(image.config),
        "functions": [to_json(fn) for fn in image.functions],
        "globals": [
            {"library": g.library, "name": g.name, "address": g.address, "init": g.init, "placement": g.placement}
            for g in image.globals
        ],
        "layout": [region_to_json(r) for r in image.layout.regions],
        "legal_entries": {c: sorted(names) for c, names in image.legal_entries},
        "code_addresses": dict(image.code_addresses),
    }


def image_from_json(data: dict) -> Image:
    if data.get("format") != "flexsim-image/1":
        raise TransformError("not a flexsim image bundle")
    regions = tuple(
        Region(r["name"], r["start"], r["size"], r["owner"], frozenset(r["shared_with"]), Role(r["role"]), r["key"])
        for r in data["layout"]
    )
    return Image(
        config=config_from_json(data["config"]),
        functions=tuple(from_json(fn) for fn in data["functions"]),
        globals=tuple(GlobalSlot(**g) for g in data["globals"]),
        layout=MemoryLayout(regions),
        stack_size=data["stack_size"],
        entry=data["entry"],
        legal_entries=tuple((c, frozenset(n)) for c, n in data["legal_entries"].items()),
        code_addresses=tuple(data["code_addresses"].items()),
    )
