"""MSpec component specifications.

An MSpec file holds ``component <name> { ... }`` blocks. Each block
contains up to four kinds of sections::

    component lwip {
      [Memory Access] R { (netbuf, W, 4096, SEG:shbufs) }
      [Call] X { }
      [API] { (lwip_recv, SYMB) (0x4000, ADDR) }
      [Requires] R { (netbuf, R, 4096, SEG:shbufs) }
      [Requires] { X { (lwip_recv, SYMB) } }
    }

``[Requires]`` takes either a memory clause (access modifier plus memory
tuples) or a brace-enclosed group of call clauses (execution modifier plus
execution tuples). Repeated ``[Requires]`` lines accumulate. Memory tuples
are ``(ptr, R|W, size, ADDR|SEG:<name>)`` and execution tuples are
``(ptr, SYMB|ADDR)``; addresses may be decimal or ``0x`` hexadecimal.
Commas between tuples are optional.
"""
from __future__ import annotations

import enum
import itertools
import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from ._lex import TokenStream, tokenize
from .config import CompartmentDecl, ImageConfig, Mechanism
from .errors import FlexError, ParseError, Violation

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_.]*\Z")


class MSpecSyntaxError(ParseError):
    pass


class UnknownModifier(MSpecSyntaxError):
    pass


class DuplicateComponent(FlexError):
    pass


class Access(enum.Enum):
    U = "U"
    R = "R"
    W = "W"
    RSTAR = "R*"
    WSTAR = "W*"

    def leq(self, other: "Access") -> bool:
        """Partial order: U below everything, R below R*, W below W*."""
        return self is other or self is Access.U or (self, other) in _ACCESS_ABOVE

    @property
    def is_basic(self) -> bool:
        return self in (Access.R, Access.W)


_ACCESS_ABOVE = {(Access.R, Access.RSTAR), (Access.W, Access.WSTAR)}


class Exec(enum.Enum):
    U = "U"
    X = "X"
    XSTAR = "X*"

    def leq(self, other: "Exec") -> bool:
        return _EXEC_LEVEL[self] <= _EXEC_LEVEL[other]


_EXEC_LEVEL = {Exec.U: 0, Exec.X: 1, Exec.XSTAR: 2}


@dataclass(frozen=True)
class MemRule:
    target: str | int
    access: Access
    size: int
    segment: str | None = None  # None means the memtype is a plain address

    def __post_init__(self):
        if not self.access.is_basic:
            raise ValueError(f"memory rules take R or W, not {self.access.value}")
        if self.size < 1:
            raise ValueError("memory rule size must be positive")

    @property
    def memtype(self) -> str:
        return "ADDR" if self.segment is None else f"SEG:{self.segment}"

    def covered_by(self, other: "MemRule") -> bool:
        return (self.target == other.target and self.segment == other.segment
                and self.access is other.access and self.size <= other.size)


@dataclass(frozen=True)
class ExecRule:
    target: str | int
    kind: str  # "SYMB" | "ADDR"

    def __post_init__(self):
        if self.kind == "SYMB":
            if not isinstance(self.target, str) or not _IDENT.match(self.target):
                raise ValueError(f"SYMB rule needs an identifier, got {self.target!r}")
        elif self.kind == "ADDR":
            if not isinstance(self.target, int) or self.target < 0:
                raise ValueError(f"ADDR rule needs a non-negative address, got {self.target!r}")
        else:
            raise ValueError(f"unknown call type {self.kind!r}")


@dataclass(frozen=True)
class MemRequirement:
    modifier: Access | None = None
    rules: tuple[MemRule, ...] = ()


@dataclass(frozen=True)
class CallRequirement:
    modifier: Exec | None = None
    rules: tuple[ExecRule, ...] = ()


@dataclass(frozen=True)
class ComponentSpec:
    name: str
    memory_modifier: Access | None = None
    memory_rules: tuple[MemRule, ...] = ()
    call_modifier: Exec | None = None
    call_rules: tuple[ExecRule, ...] = ()
    api: tuple[ExecRule, ...] = ()
    requires_mem: tuple[MemRequirement, ...] = ()
    requires_call: tuple[CallRequirement, ...] = ()
    # whether the sections were present at all; absent and empty serialize differently
    has_memory: bool = False
    has_call: bool = False
    has_api: bool = False

    @property
    def effective_memory(self) -> Access:
        return self.memory_modifier or Access.U

    @property
    def effective_call(self) -> Exec:
        return self.call_modifier or Exec.U

    @property
    def has_requires(self) -> bool:
        return bool(self.requires_mem or self.requires_call)


# ---------------------------------------------------------------------------
# parsing

_TOKENS = [
    ("HEADER", r"\[[A-Za-z ]+\]"),
    ("NUMBER", r"0[xX][0-9a-fA-F]+|\d+"),
    ("SEG", r"SEG:[A-Za-z_][A-Za-z0-9_.]*"),
    ("WORD", r"[A-Za-z_][A-Za-z0-9_.]*\*?"),
    ("PUNCT", r"[{}(),]"),
]

_HEADERS = {"[Memory Access]": "memory", "[Call]": "call", "[API]": "api", "[Requires]": "requires"}
_ACCESS_TOKENS = {a.value: a for a in Access}
_EXEC_TOKENS = {e.value: e for e in Exec}


class _Parser:
    def __init__(self, text: str):
        self.ts = TokenStream(tokenize(text, _TOKENS, MSpecSyntaxError), MSpecSyntaxError)

    def document(self) -> list[ComponentSpec]:
        specs, seen = [], set()
        while not self.ts.at("EOF"):
            tok = self.ts.peek()
            spec = self.component()
            if spec.name in seen:
                raise DuplicateComponent(f"{tok.line}:{tok.column}: component {spec.name} declared twice")
            seen.add(spec.name)
            specs.append(spec)
        return specs

    def component(self) -> ComponentSpec:
        ts = self.ts
        ts.expect("WORD", "component")
        name = self.ident()
        ts.expect("PUNCT", "{")
        fields: dict = {"requires_mem": [], "requires_call": []}
        while not ts.at("PUNCT", "}"):
            tok = ts.peek()
            if tok.kind != "HEADER":
                raise ts.fail(f"expected a section header, got {tok.text!r}")
            section = _HEADERS.get(re.sub(r"\s+", " ", tok.text))
            if section is None:
                raise ts.fail(f"unknown section {tok.text}")
            ts.next()
            if section != "requires" and f"has_{section}" in fields:
                raise ts.fail(f"section {tok.text} repeated", tok)
            if section == "memory":
                fields["has_memory"] = True
                fields["memory_modifier"] = self.maybe_access()
                fields["memory_rules"] = self.rule_list(self.mem_rule)
            elif section == "call":
                fields["has_call"] = True
                fields["call_modifier"] = self.maybe_exec()
                fields["call_rules"] = self.rule_list(self.exec_rule)
            elif section == "api":
                fields["has_api"] = True
                fields["api"] = self.rule_list(self.exec_rule)
            else:
                self.requires(fields)
        ts.expect("PUNCT", "}")
        fields["requires_mem"] = tuple(fields["requires_mem"])
        fields["requires_call"] = tuple(fields["requires_call"])
        return ComponentSpec(name, **fields)

    def requires(self, fields: dict) -> None:
        ts = self.ts
        # `{` followed by a modifier word or another `{` opens a call-clause group
        if ts.at("PUNCT", "{") and (ts.at("WORD", offset=1) or ts.at("PUNCT", "{", offset=1)):
            ts.next()
            while not ts.at("PUNCT", "}"):
                mod = self.maybe_exec()
                if mod is None and not ts.at("PUNCT", "{"):
                    raise ts.fail("expected an execution modifier or '{' in call requirement")
                rules = self.rule_list(self.exec_rule)
                fields["requires_call"].append(CallRequirement(mod, rules))
                ts.accept("PUNCT", ",")
            ts.next()
            return
        if ts.at("WORD") and ts.peek().text in ("X", "X*"):
            # a single call clause without the group braces
            mod = self.maybe_exec()
            fields["requires_call"].append(CallRequirement(mod, self.rule_list(self.exec_rule)))
            return
        mod = self.maybe_access()
        fields["requires_mem"].append(MemRequirement(mod, self.rule_list(self.mem_rule)))

    def maybe_access(self) -> Access | None:
        tok = self.ts.peek()
        if tok.kind != "WORD" or self.ts.at("WORD", "component"):
            return None
        if tok.text not in _ACCESS_TOKENS:
            raise self.ts.fail(f"unknown access modifier {tok.text!r}", tok, UnknownModifier)
        self.ts.next()
        return _ACCESS_TOKENS[tok.text]

    def maybe_exec(self) -> Exec | None:
        tok = self.ts.peek()
        if tok.kind != "WORD":
            return None
        if tok.text not in _EXEC_TOKENS:
            raise self.ts.fail(f"unknown execution modifier {tok.text!r}", tok, UnknownModifier)
        self.ts.next()
        return _EXEC_TOKENS[tok.text]

    def rule_list(self, item) -> tuple:
        ts = self.ts
        if not ts.accept("PUNCT", "{"):
            return ()
        rules = []
        while not ts.at("PUNCT", "}"):
            rules.append(item())
            ts.accept("PUNCT", ",")
        ts.next()
        return tuple(rules)

    def ident(self) -> str:
        tok = self.ts.expect("WORD")
        if tok.text.endswith("*"):
            raise self.ts.fail(f"invalid identifier {tok.text!r}", tok)
        return tok.text

    def designator(self) -> str | int:
        tok = self.ts.peek()
        if tok.kind == "NUMBER":
            self.ts.next()
            return int(tok.text, 0)
        return self.ident()

    def mem_rule(self) -> MemRule:
        ts = self.ts
        start = ts.expect("PUNCT", "(")
        target = self.designator()
        ts.expect("PUNCT", ",")
        tok = ts.expect("WORD")
        if tok.text not in _ACCESS_TOKENS:
            raise ts.fail(f"unknown access modifier {tok.text!r}", tok, UnknownModifier)
        access = _ACCESS_TOKENS[tok.text]
        if not access.is_basic:
            raise ts.fail(f"memory tuples take a basic modifier (R or W), not {tok.text}", tok)
        ts.expect("PUNCT", ",")
        size_tok = ts.expect("NUMBER")
        size = int(size_tok.text, 0)
        if size < 1:
            raise ts.fail("size must be at least 1", size_tok)
        ts.expect("PUNCT", ",")
        mt = ts.peek()
        if mt.kind == "SEG":
            segment = mt.text[4:]
        elif mt.kind == "WORD" and mt.text == "ADDR":
            segment = None
        else:
            raise ts.fail(f"expected ADDR or SEG:<name>, got {mt.text!r}", mt)
        ts.next()
        ts.expect("PUNCT", ")")
        try:
            return MemRule(target, access, size, segment)
        except ValueError as exc:
            raise ts.fail(str(exc), start) from None

    def exec_rule(self) -> ExecRule:
        ts = self.ts
        start = ts.expect("PUNCT", "(")
        target = self.designator()
        ts.expect("PUNCT", ",")
        kind = ts.expect("WORD")
        if kind.text not in ("SYMB", "ADDR"):
            raise ts.fail(f"expected SYMB or ADDR, got {kind.text!r}", kind)
        ts.expect("PUNCT", ")")
        try:
            return ExecRule(target, kind.text)
        except ValueError as exc:
            raise ts.fail(str(exc), start) from None


def parse_mspec(text: str) -> list[ComponentSpec]:
    return _Parser(text).document()


# ---------------------------------------------------------------------------
# serialization

def _designator(target: str | int) -> str:
    return hex(target) if isinstance(target, int) else target


def _mem_rules(rules: Iterable[MemRule]) -> str:
    body = " ".join(f"({_designator(r.target)}, {r.access.value}, {r.size}, {r.memtype})" for r in rules)
    return f"{{ {body} }}" if body else "{ }"


def _exec_rules(rules: Iterable[ExecRule]) -> str:
    body = " ".join(f"({_designator(r.target)}, {r.kind})" for r in rules)
    return f"{{ {body} }}" if body else "{ }"


def _prefixed(modifier, rest: str) -> str:
    return f"{modifier.value} {rest}" if modifier is not None else rest


def serialize_mspec(specs: Sequence[ComponentSpec]) -> str:
    """Canonical text: sections in grammar order, rules in input order."""
    out = []
    for spec in specs:
        out.append(f"component {spec.name} {{")
        if spec.has_memory or spec.memory_modifier or spec.memory_rules:
            out.append("  [Memory Access] " + _prefixed(spec.memory_modifier, _mem_rules(spec.memory_rules)))
        if spec.has_call or spec.call_modifier or spec.call_rules:
            out.append("  [Call] " + _prefixed(spec.call_modifier, _exec_rules(spec.call_rules)))
        if spec.has_api or spec.api:
            out.append("  [API] " + _exec_rules(spec.api))
        for req in spec.requires_mem:
            out.append("  [Requires] " + _prefixed(req.modifier, _mem_rules(req.rules)))
        for req in spec.requires_call:
            out.append("  [Requires] { " + _prefixed(req.modifier, _exec_rules(req.rules)) + " }")
        out.append("}")
    return "\n".join(out) + "\n" if out else ""


# ---------------------------------------------------------------------------
# [Requires] checking

def _mem_bound(reqs: Sequence[MemRequirement]) -> list[Access]:
    # every stated modifier is an upper bound; clauses with only tuples bound the coarse rights at U
    mods = [r.modifier for r in reqs if r.modifier is not None]
    return mods or [Access.U]


def _call_bound(reqs: Sequence[CallRequirement]) -> list[Exec]:
    mods = [r.modifier for r in reqs if r.modifier is not None]
    return mods or [Exec.U]


def _symbol_owners(specs: Sequence[ComponentSpec], program=None) -> dict:
    if program is not None:
        owners = {fn.name: lib.name for lib in program.libraries for fn in lib.functions}
        owners.update({f"{lib.name}.{g.name}": lib.name for lib in program.libraries for g in lib.globals})
        return owners
    owners = {}
    for spec in specs:
        for rule in spec.api:
            owners.setdefault(rule.target, spec.name)
    return owners


def _pair_violations(x: ComponentSpec, y: ComponentSpec, compartment: str | None, owners: dict) -> list[Violation]:
    """Violations of x's Requires clauses by co-located component y."""
    out = []

    def v(kind, msg):
        out.append(Violation(y.name, compartment, kind, msg))

    if x.requires_mem:
        bounds = _mem_bound(x.requires_mem)
        if not all(y.effective_memory.leq(b) for b in bounds):
            v("MemoryModifierExceeded",
              f"{y.name} declares memory access {y.effective_memory.value}, above what {x.name} "
              f"requires ({' & '.join(b.value for b in bounds)})")
        allowed = [r for req in x.requires_mem for r in req.rules]
        for rule in y.memory_rules:
            if not any(rule.covered_by(a) for a in allowed):
                v("MemoryRuleNotCovered",
                  f"{y.name} memory rule ({_designator(rule.target)}, {rule.access.value}, {rule.size}, "
                  f"{rule.memtype}) is not covered by {x.name}'s requirements")
    if x.requires_call:
        bounds = _call_bound(x.requires_call)
        if not all(y.effective_call.leq(b) for b in bounds):
            v("CallModifierExceeded",
              f"{y.name} declares call rights {y.effective_call.value}, above what {x.name} "
              f"requires ({' & '.join(b.value for b in bounds)})")
        allowed = {(r.target, r.kind) for r in x.api}
        allowed |= {(r.target, r.kind) for req in x.requires_call for r in req.rules}
        for rule in y.call_rules:
            if owners.get(rule.target) != x.name:
                continue
            if (rule.target, rule.kind) not in allowed:
                v("CallTargetNotAllowed",
                  f"{y.name} may jump to {_designator(rule.target)}, which is neither in {x.name}'s API "
                  f"nor in its required call rules")
    return out


def check_requires(specs: Sequence[ComponentSpec], config: ImageConfig, program=None) -> list[Violation]:
    """Check every Requires clause against the components sharing its compartment.

    When a FlexC ``program`` is given, symbol ownership comes from it;
    otherwise a symbol belongs to the component whose [API] exports it.
    """
    by_name = {s.name: s for s in specs}
    owners = _symbol_owners(specs, program)
    out: list[Violation] = []
    for lib, comp in config.libraries:
        if lib not in by_name:
            out.append(Violation(lib, comp, "MissingSpec", f"no MSpec declaration for library {lib}", "warning"))
    for lib, comp in config.libraries:
        x = by_name.get(lib)
        if x is None or not x.has_requires:
            continue
        for other in config.members(comp):
            if other == lib or other not in by_name:
                continue
            out.extend(_pair_violations(x, by_name[other], comp, owners))
    return out


def check_api(specs: Sequence[ComponentSpec], program) -> list[Violation]:
    """[API] symbols must be functions defined by the declaring component."""
    owners = {fn.name: lib.name for lib in program.libraries for fn in lib.functions}
    out = []
    for spec in specs:
        for rule in spec.api:
            if rule.kind == "SYMB" and owners.get(rule.target) != spec.name:
                out.append(Violation(spec.name, None, "ApiSymbolNotDefined",
                                     f"{spec.name} exports {rule.target}, which it does not define"))
    return out


def violations_to_json(violations: Iterable[Violation]) -> str:
    return json.dumps([v.to_json() for v in violations], indent=2)


# ---------------------------------------------------------------------------
# partition suggestion

_EXACT_LIMIT = 14


def _conflicts(specs: Sequence[ComponentSpec]) -> dict[str, set[str]]:
    owners = _symbol_owners(specs)
    graph = {s.name: set() for s in specs}
    for a, b in itertools.combinations(specs, 2):
        if _pair_violations(a, b, None, owners) or _pair_violations(b, a, None, owners):
            graph[a.name].add(b.name)
            graph[b.name].add(a.name)
    return graph


def _exact_blocks(names: list[str], graph: dict[str, set[str]], limit: int) -> list[list[str]] | None:
    # smallest conflict-free grouping by backtracking on block count
    order = sorted(names, key=lambda n: -len(graph[n]))
    for k in range(1, limit + 1):
        blocks: list[list[str]] = []

        def place(i: int) -> bool:
            if i == len(order):
                return True
            name = order[i]
            for block in blocks:
                if not graph[name] & set(block):
                    block.append(name)
                    if place(i + 1):
                        return True
                    block.pop()
            if len(blocks) < k:
                blocks.append([name])
                if place(i + 1):
                    return True
                blocks.pop()
            return False

        if place(0):
            return blocks
    return None


def _greedy_blocks(names: list[str], graph: dict[str, set[str]]) -> list[list[str]]:
    blocks: list[list[str]] = []
    for name in sorted(names, key=lambda n: -len(graph[n])):
        for block in blocks:
            if not graph[name] & set(block):
                block.append(name)
                break
        else:
            blocks.append([name])
    return blocks


def suggest_partition(specs: Sequence[ComponentSpec], max_compartments: int) -> list[list[str]] | None:
    """Group components into as few compartments as their Requires clauses allow.

    Returns blocks of component names (in input order), or None when no
    grouping fits in ``max_compartments``.
    """
    if max_compartments < 1:
        raise ValueError("max_compartments must be at least 1")
    names = [s.name for s in specs]
    if not names:
        return []
    graph = _conflicts(specs)
    if len(names) <= _EXACT_LIMIT:
        blocks = _exact_blocks(names, graph, min(max_compartments, len(names)))
    else:
        blocks = _greedy_blocks(names, graph)
        if len(blocks) > max_compartments:
            blocks = None
    if blocks is None:
        return None
    pos = {n: i for i, n in enumerate(names)}
    blocks = [sorted(b, key=pos.__getitem__) for b in blocks]
    return sorted(blocks, key=lambda b: pos[b[0]])


def partition_config(blocks: Sequence[Sequence[str]]) -> ImageConfig:
    """A no-isolation config placing each block in its own compartment."""
    comps = [CompartmentDecl(f"comp{i + 1}", Mechanism.FUNC_CALL, default=(i == 0)) for i in range(len(blocks))]
    libmap = {lib: f"comp{i + 1}" for i, block in enumerate(blocks) for lib in block}
    return ImageConfig.build(comps, libmap)
