"""Abstract protection-domain machine.

Executes an :class:`~flexsim.transform.Image` statement by statement. Every
memory access is checked against the current permission set (the active
compartment) and the target region's owner and sharing set. The first
violation produces a fault event and stops execution.

Each event carries the cycles it was charged, so the total of a trace is
always the sum over its events.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

from .config import CompartmentDecl, Hardening, ImageConfig, Mechanism, Sharing
from .errors import FlexError
from .source import (
    NUM_REGISTERS,
    Add,
    AddrOf,
    Assign,
    Call,
    Deref,
    Forge,
    FuncAddr,
    FunctionDef,
    GateCall,
    GlobalRef,
    IndirectCall,
    LibraryUnit,
    Lit,
    Program,
    Reg,
    Return,
    VarDecl,
    VarRef,
)
from .transform import WORD, Image, Region, Role, instantiate, ungated_image

MAX_CALL_DEPTH = 256
ARG_REGISTERS = 6


class MachineError(FlexError):
    pass


class EntryNotFound(MachineError):
    pass


class MalformedImage(MachineError):
    pass


@dataclass(frozen=True)
class CostModel:
    """Cycles charged per primitive."""

    plain_call: int = 5
    wrpkru: int = 30
    mpk_full_gate_extra: int = 52
    ept_rpc_round_trip: int = 494
    stack_alloc: int = 2
    heap_alloc: int = 150
    heap_free: int = 50
    memory_access: int = 1
    # extra cycles per memory access / per call made by hardened code
    asan_access: int = 2
    kasan_access: int = 2
    ubsan_access: int = 1
    cfi_call: int = 1
    stackprotector_call: int = 1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"cost {f.name} must be >= 0")

    def gate_cost(self, mechanism: Mechanism) -> int:
        if mechanism is Mechanism.MPK_LIGHT:
            return 2 * self.wrpkru + self.plain_call
        if mechanism is Mechanism.MPK_DSS:
            return 2 * self.wrpkru + self.mpk_full_gate_extra + self.plain_call
        if mechanism is Mechanism.EPT:
            return self.ept_rpc_round_trip
        return self.plain_call

    def access_surcharge(self, hardening: frozenset[Hardening]) -> int:
        return (self.asan_access * (Hardening.ASAN in hardening)
                + self.kasan_access * (Hardening.KASAN in hardening)
                + self.ubsan_access * (Hardening.UBSAN in hardening))

    def call_surcharge(self, hardening: frozenset[Hardening]) -> int:
        return (self.cfi_call * (Hardening.CFI in hardening)
                + self.stackprotector_call * (Hardening.STACK_PROTECTOR in hardening))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "CostModel":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown cost model keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "CostModel":
        return cls.from_json(json.loads(Path(path).read_text()))


GATE_MECHANISM = {"mpk-light": Mechanism.MPK_LIGHT, "mpk-full": Mechanism.MPK_DSS, "ept-rpc": Mechanism.EPT}


@dataclass(frozen=True)
class Event:
    kind: str  # call gate-enter gate-exit rpc-send rpc-serve read write alloc free fault
    cycles: int = 0
    key: int | None = None  # domain the event happened in
    function: str | None = None
    address: int | None = None
    value: int | None = None
    target_key: int | None = None
    detail: str | None = None
    name: str | None = None  # variable, for alloc events

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class Fault:
    address: int | None
    compartment: str  # accessing compartment
    key: int  # accessing domain
    owner_key: int | None  # domain of the touched region, None when unmapped
    owner: str | None
    reason: str

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Trace:
    events: list[Event] = field(default_factory=list)
    return_value: int | None = None
    faults: list[Fault] = field(default_factory=list)
    gate_latencies: list[tuple[str, int]] = field(default_factory=list)

    @property
    def cycles(self) -> int:
        return sum(e.cycles for e in self.events)

    @property
    def fault(self) -> Fault | None:
        return self.faults[0] if self.faults else None

    @property
    def ok(self) -> bool:
        return not self.faults

    @property
    def gate_cycles(self) -> int:
        return sum(c for _, c in self.gate_latencies)

    def of_kind(self, *kinds: str) -> list[Event]:
        return [e for e in self.events if e.kind in kinds]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in self.events)

    def summary(self) -> str:
        counts: dict[str, int] = {}
        for e in self.events:
            counts[e.kind] = counts.get(e.kind, 0) + 1
        lines = [
            f"return value: {self.return_value}",
            f"total cycles: {self.cycles}",
            f"gate cycles: {self.gate_cycles} over {len(self.gate_latencies)} gates",
            "events: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())),
        ]
        if self.fault:
            f = self.fault
            where = f"{f.address:#x}" if f.address is not None else "-"
            lines.append(f"FAULT at {where}: {f.reason} (compartment {f.compartment}, owner key {f.owner_key})")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "return_value": self.return_value,
            "cycles": self.cycles,
            "gate_cycles": self.gate_cycles,
            "faults": [f.to_json() for f in self.faults],
        }


class _Stop(Exception):
    """Raised internally to unwind after a fault."""


@dataclass
class _Frame:
    fn: FunctionDef
    compartment: str  # the compartment whose permissions are active
    stack: Region
    values: dict[str, int] = field(default_factory=dict)  # parameters
    slots: dict[str, int] = field(default_factory=dict)  # memory-backed locals
    heap_slots: list[int] = field(default_factory=list)
    stack_mark: int = 0


class Machine:
    """Runs one image. Instances are single-threaded and not reused across runs."""

    def __init__(self, image: Image, cost_model: CostModel | None = None):
        self.image = image
        self.costs = cost_model or CostModel()
        self.config: ImageConfig = image.config
        self.enforce = image.isolated
        self.keys = {c: self.config.key_of(c) for c in self.config.compartment_names}
        self.memory: dict[int, int] = {g.address: g.init for g in image.globals}
        self.registers = [0] * NUM_REGISTERS
        self.trace = Trace()
        layout = image.layout
        self.stack_top = {r.owner: r.start for r in layout.select(Role.STACK)}
        self.heap_top: dict[str | None, int] = {r.owner: r.start for r in layout.select(Role.HEAP)}
        self.heap_region: dict[str | None, Region] = {r.owner: r for r in layout.select(Role.HEAP)}
        shared = layout.select(Role.SHARED_HEAP)
        if shared:
            used = [g.address for g in image.globals if g.placement == "shared_global"]
            self.heap_region[None] = shared[0]
            self.heap_top[None] = max(used, default=shared[0].start - WORD) + WORD
        self.by_address = {a: n for n, a in image.code_addresses}
        self.depth = 0

    # -- bookkeeping -------------------------------------------------------

    def emit(self, kind: str, frame: _Frame | None, cycles: int = 0, **kw) -> None:
        key = self.keys[frame.compartment] if frame is not None else None
        self.trace.events.append(Event(kind, cycles, key, **kw))

    def fail(self, frame: _Frame, reason: str, address: int | None = None, region: Region | None = None):
        comp = frame.compartment
        owner_key = region.key if region is not None else None
        fault = Fault(address, comp, self.keys[comp], owner_key, region.owner if region else None, reason)
        self.trace.faults.append(fault)
        self.emit("fault", frame, function=frame.fn.name, address=address, target_key=owner_key, detail=reason)
        raise _Stop()

    def hardening(self, frame: _Frame) -> frozenset[Hardening]:
        return self.config.hardening_of(frame.fn.library)

    # -- memory ------------------------------------------------------------

    def check(self, frame: _Frame, address: int, what: str) -> None:
        region = self.image.layout.find(address)
        if region is None:
            self.fail(frame, f"{what} of unmapped address", address)
        if self.enforce and not region.accessible_from(frame.compartment):
            self.fail(frame, f"{what} of {region.name} without permission", address, region)

    def read(self, frame: _Frame, address: int) -> int:
        self.check(frame, address, "read")
        value = self.memory.get(address, 0)
        cost = self.costs.memory_access + self.costs.access_surcharge(self.hardening(frame))
        self.emit("read", frame, cost, function=frame.fn.name, address=address, value=value)
        return value

    def write(self, frame: _Frame, address: int, value: int) -> None:
        self.check(frame, address, "write")
        self.memory[address] = value
        cost = self.costs.memory_access + self.costs.access_surcharge(self.hardening(frame))
        self.emit("write", frame, cost, function=frame.fn.name, address=address, value=value)

    # -- expressions -------------------------------------------------------

    def slot_of(self, frame: _Frame, name: str) -> int:
        try:
            return frame.slots[name]
        except KeyError:
            raise MalformedImage(f"{frame.fn.name}: {name} is not a memory-backed variable") from None

    def global_address(self, ref: GlobalRef) -> int:
        slot = self.image.global_map.get((ref.library, ref.name))
        if slot is None:
            raise MalformedImage(f"unknown global {ref.library}.{ref.name}")
        return slot.address

    def eval(self, frame: _Frame, e) -> int:
        if isinstance(e, Lit):
            return e.value
        if isinstance(e, VarRef):
            if e.name in frame.values:
                return frame.values[e.name]
            return self.read(frame, self.slot_of(frame, e.name))
        if isinstance(e, GlobalRef):
            return self.read(frame, self.global_address(e))
        if isinstance(e, AddrOf):
            if isinstance(e.target, GlobalRef):
                return self.global_address(e.target)
            return self.slot_of(frame, e.target.name)
        if isinstance(e, FuncAddr):
            return self.image.code_address_map[e.name]
        if isinstance(e, Deref):
            return self.read(frame, self.eval(frame, e.pointer))
        if isinstance(e, Add):
            return self.eval(frame, e.left) + self.eval(frame, e.right)
        if isinstance(e, Reg):
            return self.registers[e.index]
        raise MalformedImage(f"unknown expression {e!r}")

    def store(self, frame: _Frame, target, value: int) -> None:
        if isinstance(target, VarRef):
            if target.name in frame.values:
                frame.values[target.name] = value
            else:
                self.write(frame, self.slot_of(frame, target.name), value)
        elif isinstance(target, GlobalRef):
            self.write(frame, self.global_address(target), value)
        elif isinstance(target, Deref):
            self.write(frame, self.eval(frame, target.pointer), value)
        elif isinstance(target, Reg):
            self.registers[target.index] = value
        else:
            raise MalformedImage(f"cannot assign to {target!r}")

    # -- allocation --------------------------------------------------------

    def alloc_stack(self, frame: _Frame) -> int:
        owner = frame.stack.owner
        address = self.stack_top[owner]
        if address + WORD > frame.stack.end:
            self.fail(frame, "stack overflow", address, frame.stack)
        self.stack_top[owner] = address + WORD
        return address

    def alloc_heap(self, frame: _Frame, owner: str | None) -> int:
        region = self.heap_region.get(owner)
        if region is None:
            raise MalformedImage("image has no shared heap" if owner is None else f"no heap for {owner}")
        address = self.heap_top[owner]
        if address + WORD > region.end:
            self.fail(frame, "heap exhausted", address, region)
        self.heap_top[owner] = address + WORD
        return address

    def declare(self, frame: _Frame, decl: VarDecl) -> None:
        placement = decl.placement or "stack"
        if placement in ("stack", "dss"):
            address = self.alloc_stack(frame)
            cost = self.costs.stack_alloc
        elif placement in ("heap", "shared_heap"):
            owner = None if placement == "shared_heap" else self.config.compartment_of(frame.fn.library)
            address = self.alloc_heap(frame, owner)
            frame.heap_slots.append(address)
            cost = self.costs.heap_alloc
        else:
            raise MalformedImage(f"unknown placement {placement!r} for {decl.name}")
        frame.slots[decl.name] = address
        self.memory[address] = 0
        self.emit("alloc", frame, cost, function=frame.fn.name, address=address, detail=placement, name=decl.name)
        if decl.init is not None:
            self.store(frame, VarRef(decl.name), self.eval(frame, decl.init))

    # -- calls -------------------------------------------------------------

    def function(self, name: str) -> FunctionDef:
        fn = self.image.function_map.get(name)
        if fn is None:
            raise MalformedImage(f"call to unknown function {name}")
        return fn

    def invoke(self, fn: FunctionDef, args: list[int], compartment: str, stack: Region, caller: _Frame | None) -> int:
        if len(args) != len(fn.params):
            raise MalformedImage(f"{fn.name} expects {len(fn.params)} arguments, got {len(args)}")
        self.depth += 1
        if self.depth > MAX_CALL_DEPTH:
            self.fail(caller, "call depth exceeded")
        frame = _Frame(fn, compartment, stack, dict(zip(fn.params, args)), stack_mark=self.stack_top[stack.owner])
        try:
            result = self.execute(frame)
        finally:
            self.depth -= 1
        for address in frame.heap_slots:
            self.emit("free", frame, self.costs.heap_free, function=fn.name, address=address)
        self.stack_top[stack.owner] = frame.stack_mark
        return result

    def plain_call(self, frame: _Frame, callee: str, args: list[int]) -> int:
        fn = self.function(callee)
        cost = self.costs.plain_call + self.costs.call_surcharge(self.hardening(frame))
        self.emit("call", frame, cost, function=callee)
        return self.invoke(fn, args, frame.compartment, frame.stack, frame)

    def gate(self, frame: _Frame, s: GateCall, args: list[int]) -> int:
        mech = GATE_MECHANISM.get(s.kind)
        if mech is None:
            raise MalformedImage(f"unknown gate kind {s.kind!r}")
        fn = self.function(s.callee)
        if self.config.compartment_of(fn.library) != s.target:
            raise MalformedImage(f"gate to {s.callee} names compartment {s.target}")
        cost = self.costs.gate_cost(mech) + self.costs.call_surcharge(self.hardening(frame))
        self.trace.gate_latencies.append((s.kind, cost))
        here, there = self.keys[frame.compartment], self.keys[s.target]
        callee_stack = self.image.layout.one(Role.STACK, s.target)
        if mech is Mechanism.EPT:
            if s.callee not in self.image.legal_entry_map.get(s.target, ()):
                self.fail(frame, f"{s.callee} is not a legal entry point of {s.target}")
            rpc = self.image.layout.one(Role.RPC_AREA, s.target)
            self.memory[rpc.start] = self.image.code_address_map[s.callee]
            for i, a in enumerate(args):
                self.memory[rpc.start + WORD * (i + 1)] = a
            self.emit("rpc-send", frame, cost, function=s.callee, target_key=there)
            saved = self.registers
            self.registers = args + [0] * (NUM_REGISTERS - len(args))
            self.trace.events.append(Event("rpc-serve", 0, there, s.callee, target_key=here))
            try:
                result = self.invoke(fn, args, s.target, callee_stack, frame)
            finally:
                self.registers = saved
            self.memory[rpc.start + WORD * (ARG_REGISTERS + 1)] = result
            self.emit("gate-exit", frame, 0, function=s.callee, target_key=there)
            return result
        self.emit("gate-enter", frame, cost, function=s.callee, target_key=there)
        if mech is Mechanism.MPK_LIGHT:
            result = self.invoke(fn, args, s.target, frame.stack, frame)
        else:
            saved = self.registers
            self.registers = args + [0] * (NUM_REGISTERS - len(args))
            try:
                result = self.invoke(fn, args, s.target, callee_stack, frame)
            finally:
                self.registers = saved
        self.trace.events.append(Event("gate-exit", 0, here, s.callee, target_key=there))
        return result

    def forge(self, frame: _Frame, s: Forge, args: list[int]) -> int:
        """Transfer control without a gate; the permission set stays the caller's."""
        fn = self.function(s.callee)
        home = self.config.compartment_of(fn.library)
        if self.enforce and self.image.mechanism is Mechanism.EPT and home != frame.compartment:
            code = self.image.code_address_map[s.callee]
            self.fail(frame, f"jump to {s.callee} outside this address space", code,
                      self.image.layout.one(Role.DATA, home))
        self.emit("call", frame, self.costs.plain_call, function=s.callee, detail="forged")
        return self.invoke(fn, args, frame.compartment, frame.stack, frame)

    # -- statements --------------------------------------------------------

    def execute(self, frame: _Frame) -> int:
        for s in frame.fn.body:
            if isinstance(s, VarDecl):
                self.declare(frame, s)
            elif isinstance(s, Assign):
                self.store(frame, s.target, self.eval(frame, s.value))
            elif isinstance(s, Return):
                return self.eval(frame, s.value) if s.value is not None else 0
            elif isinstance(s, (Call, GateCall, Forge, IndirectCall)):
                args = [self.eval(frame, a) for a in s.args]
                if isinstance(s, Call):
                    result = self.plain_call(frame, s.callee, args)
                elif isinstance(s, GateCall):
                    result = self.gate(frame, s, args)
                elif isinstance(s, Forge):
                    result = self.forge(frame, s, args)
                else:
                    result = self.indirect(frame, s, args)
                if s.dest is not None:
                    self.store(frame, s.dest, result)
            else:
                raise MalformedImage(f"{frame.fn.name}: statement {type(s).__name__} cannot be executed")
        return 0

    def indirect(self, frame: _Frame, s: IndirectCall, args: list[int]) -> int:
        address = self.eval(frame, s.pointer)
        target = self.by_address.get(address)
        if target is None or target not in s.targets:
            self.fail(frame, f"indirect call to {address:#x} outside its target set", address)
        via = dict(s.wrappers).get(target, target)
        return self.plain_call(frame, via, args)

    def run(self, entry: str | None = None, args: Iterable[int] = ()) -> Trace:
        entry = entry or self.image.entry
        fn = self.image.function_map.get(entry)
        if fn is None:
            raise EntryNotFound(f"no function {entry!r} in image")
        home = self.config.compartment_of(fn.library)
        if home != self.config.default_compartment:
            raise EntryNotFound(f"entry {entry} lives in {home}, not the default compartment")
        stack = self.image.layout.one(Role.STACK, home)
        try:
            self.trace.return_value = self.invoke(fn, list(args), home, stack, None)
        except _Stop:
            self.trace.return_value = None
        return self.trace


def run(image: Image, entry: str | None = None, cost_model: CostModel | None = None, args: Iterable[int] = ()) -> Trace:
    return Machine(image, cost_model).run(entry, args)


def run_program(program: Program, entry: str = "main", cost_model: CostModel | None = None) -> Trace:
    """Run a program as written: no gates, one unprotected domain."""
    return run(ungated_image(program, entry=entry), entry, cost_model)


# ---------------------------------------------------------------------------
# microbenchmarks

def two_compartment_config(mechanism: Mechanism, sharing: Sharing | None = None, split: bool = True) -> ImageConfig:
    """``app`` in comp1 (default) and ``lib`` in comp2, or both in comp1."""
    if sharing is None:
        sharing = Sharing.SHARED_STACK if mechanism in (Mechanism.MPK_LIGHT, Mechanism.FUNC_CALL) else Sharing.DSS
    comps = [CompartmentDecl("comp1", mechanism, default=True)]
    if split:
        comps.append(CompartmentDecl("comp2", mechanism))
    return ImageConfig.build(comps, {"app": "comp1", "lib": "comp2" if split else "comp1"}, sharing)


def measure_gate_latency(backend: Mechanism, cost_model: CostModel | None = None) -> int:
    """Round-trip cycles of a zero-argument cross-compartment call to an empty function."""
    program = Program((
        LibraryUnit("app", (), (FunctionDef("main", "app", (), (Call("noop"), Return(Lit(0)))),)),
        LibraryUnit("lib", (), (FunctionDef("noop", "lib", (), (Return(),)),)),
    ))
    trace = run(instantiate(program, two_compartment_config(backend)), "main", cost_model)
    if trace.fault:
        raise MachineError(f"gate fixture faulted: {trace.fault.reason}")
    return trace.cycles


def measure_alloc_latency(strategy: Sharing, n_vars: int, cost_model: CostModel | None = None) -> int:
    """Allocation cycles of a function that declares ``n_vars`` shared locals and returns."""
    if n_vars not in (1, 2, 3):
        raise ValueError("n_vars must be 1, 2 or 3")
    decls = tuple(VarDecl(f"v{i}", shared_with=frozenset({"app"})) for i in range(n_vars))
    program = Program((
        LibraryUnit("app", (), (FunctionDef("main", "app", (), (Call("alloc_vars"), Return(Lit(0)))),)),
        LibraryUnit("lib", (), (FunctionDef("alloc_vars", "lib", (), decls + (Return(),)),)),
    ))
    trace = run(instantiate(program, two_compartment_config(Mechanism.MPK_DSS, strategy)), "main", cost_model)
    if trace.fault:
        raise MachineError(f"allocation fixture faulted: {trace.fault.reason}")
    return sum(e.cycles for e in trace.of_kind("alloc", "free"))
