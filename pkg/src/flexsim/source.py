"""FlexC: a small annotated language standing in for compartmentalized C.

Example::

    library app {
      fn main() {
        var buf: int shared(lwip)        # stack variable lwip may touch
        var n = call lwip_recv(&buf)
        return buf + n
      }
    }
    library lwip {
      var packets: int = 0               # private global
      fn lwip_recv(p: int) {
        *p = 42
        packets = packets + 1
        return 1
      }
    }

Expressions are integer literals, variables, ``lib.global`` references,
``&var`` / ``&function``, ``*expr``, registers ``%r0``..``%r15`` and ``+``.
Statements are ``var`` declarations, assignments, ``call``, ``icall fp(...)
targets(f, g)``, ``forge f(...)`` (a raw control transfer that bypasses any
gate, used to emulate control-flow hijacking) and ``return``. Semicolons are
optional.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, fields, is_dataclass, replace
from typing import Iterator, Union

from ._lex import TokenStream, tokenize
from .errors import ParseError

NUM_REGISTERS = 16


class FlexCSyntaxError(ParseError):
    pass


class FlexCNameError(ParseError):
    pass


class UndefinedVariable(FlexCNameError):
    pass


class UndefinedFunction(FlexCNameError):
    pass


class UndefinedLibrary(FlexCNameError):
    pass


class DuplicateDefinition(FlexCNameError):
    pass


class ArityMismatch(FlexCNameError):
    pass


class Storage(enum.Enum):
    STACK = "stack"
    HEAP = "heap"
    GLOBAL = "global"


# --- expressions -----------------------------------------------------------

@dataclass(frozen=True)
class Lit:
    value: int


@dataclass(frozen=True)
class VarRef:
    name: str


@dataclass(frozen=True)
class GlobalRef:
    library: str
    name: str


@dataclass(frozen=True)
class AddrOf:
    target: Union[VarRef, GlobalRef]


@dataclass(frozen=True)
class FuncAddr:
    name: str


@dataclass(frozen=True)
class Deref:
    pointer: "Expr"


@dataclass(frozen=True)
class Add:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Reg:
    index: int


Expr = Union[Lit, VarRef, GlobalRef, AddrOf, FuncAddr, Deref, Add, Reg]
LValue = Union[VarRef, GlobalRef, Deref, Reg]


# --- statements ------------------------------------------------------------

@dataclass(frozen=True)
class VarDecl:
    name: str
    storage: Storage = Storage.STACK
    shared_with: frozenset[str] | None = None
    init: Expr | None = None
    # filled in by the build: stack, dss, heap, shared_heap, global, shared_global
    placement: str | None = None


@dataclass(frozen=True)
class Assign:
    target: LValue
    value: Expr


@dataclass(frozen=True)
class Call:
    callee: str
    args: tuple[Expr, ...] = ()
    dest: LValue | None = None


@dataclass(frozen=True)
class IndirectCall:
    pointer: Expr
    args: tuple[Expr, ...]
    targets: tuple[str, ...]
    dest: LValue | None = None
    # (target, wrapper function) for targets reached through a gate wrapper
    wrappers: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class Forge:
    callee: str
    args: tuple[Expr, ...] = ()
    dest: LValue | None = None


@dataclass(frozen=True)
class Return:
    value: Expr | None = None


@dataclass(frozen=True)
class GatePlaceholder:
    caller_library: str
    callee_library: str
    callee: str
    args: tuple[Expr, ...] = ()
    dest: LValue | None = None


@dataclass(frozen=True)
class GateCall:
    kind: str  # "mpk-light" | "mpk-full" | "ept-rpc"
    callee: str
    args: tuple[Expr, ...]
    dest: LValue | None
    source: str  # caller compartment
    target: str  # callee compartment


Stmt = Union[VarDecl, Assign, Call, IndirectCall, Forge, Return, GatePlaceholder, GateCall]
CALL_LIKE = (Call, IndirectCall, Forge, GatePlaceholder, GateCall)


@dataclass(frozen=True)
class FunctionDef:
    name: str
    library: str
    params: tuple[str, ...] = ()
    body: tuple[Stmt, ...] = ()


@dataclass(frozen=True)
class LibraryUnit:
    name: str
    globals: tuple[VarDecl, ...] = ()
    functions: tuple[FunctionDef, ...] = ()


@dataclass(frozen=True)
class Program:
    libraries: tuple[LibraryUnit, ...] = ()

    def functions(self) -> dict[str, FunctionDef]:
        return {fn.name: fn for lib in self.libraries for fn in lib.functions}

    def function(self, name: str) -> FunctionDef:
        return self.functions()[name]

    def library(self, name: str) -> LibraryUnit:
        for lib in self.libraries:
            if lib.name == name:
                return lib
        raise KeyError(name)

    def owner(self, function: str) -> str:
        return self.function(function).library

    @property
    def library_names(self) -> list[str]:
        return [lib.name for lib in self.libraries]


# ---------------------------------------------------------------------------
# parser

_TOKENS = [
    ("NUMBER", r"-?0[xX][0-9a-fA-F]+|-?\d+"),
    ("REG", r"%r\d+"),
    ("IDENT", r"[A-Za-z_][A-Za-z0-9_]*"),
    ("PUNCT", r"[{}(),;:=+*&.]"),
]
_KEYWORDS = {"library", "fn", "var", "call", "icall", "forge", "return", "targets", "shared", "__shared", "storage"}


class _Parser:
    def __init__(self, text: str):
        self.ts = TokenStream(tokenize(text, _TOKENS, FlexCSyntaxError), FlexCSyntaxError)
        self.locs: dict[int, tuple[int, int]] = {}

    def mark(self, node, tok):
        self.locs[id(node)] = (tok.line, tok.column)
        return node

    def program(self) -> Program:
        libs = []
        while not self.ts.at("EOF"):
            libs.append(self.library())
        return Program(tuple(libs))

    def ident(self) -> str:
        tok = self.ts.expect("IDENT")
        if tok.text in _KEYWORDS:
            raise self.ts.fail(f"keyword {tok.text!r} used as a name", tok)
        return tok.text

    def punct(self, ch: str):
        return self.ts.expect("PUNCT", ch)

    def library(self) -> LibraryUnit:
        ts = self.ts
        ts.expect("IDENT", "library")
        name = self.ident()
        self.punct("{")
        globals_, functions = [], []
        while not ts.accept("PUNCT", "}"):
            if ts.at("IDENT", "var"):
                decl = self.var_decl(Storage.GLOBAL)
                if decl.init is not None and not isinstance(decl.init, Lit):
                    raise ts.fail(f"global {decl.name} needs a literal initializer")
                globals_.append(decl)
            elif ts.at("IDENT", "fn"):
                functions.append(self.function(name))
            elif ts.at("PUNCT", ";"):
                ts.next()
            else:
                raise ts.fail(f"expected 'var' or 'fn', got {ts.peek().text!r}")
        return LibraryUnit(name, tuple(globals_), tuple(functions))

    def function(self, library: str) -> FunctionDef:
        ts = self.ts
        start = ts.expect("IDENT", "fn")
        name = self.ident()
        self.punct("(")
        params = []
        while not ts.at("PUNCT", ")"):
            params.append(self.ident())
            if ts.accept("PUNCT", ":"):
                ts.expect("IDENT", "int")
            if not ts.accept("PUNCT", ","):
                break
        self.punct(")")
        self.punct("{")
        body = []
        while not ts.accept("PUNCT", "}"):
            if ts.accept("PUNCT", ";"):
                continue
            stmt = self.statement()
            body.extend(stmt if isinstance(stmt, tuple) else (stmt,))
        return self.mark(FunctionDef(name, library, tuple(params), tuple(body)), start)

    def var_decl(self, default_storage: Storage) -> VarDecl:
        ts = self.ts
        start = ts.expect("IDENT", "var")
        name = self.ident()
        if ts.accept("PUNCT", ":"):
            ts.expect("IDENT", "int")
        storage, shared = default_storage, None
        while True:
            if ts.at("IDENT", "shared") or ts.at("IDENT", "__shared"):
                ts.next()
                self.punct("(")
                libs = [self.ident()]
                while ts.accept("PUNCT", ","):
                    libs.append(self.ident())
                self.punct(")")
                shared = frozenset(libs)
            elif ts.at("IDENT", "storage"):
                ts.next()
                self.punct("=")
                tok = ts.expect("IDENT")
                try:
                    storage = Storage(tok.text)
                except ValueError:
                    raise ts.fail(f"unknown storage class {tok.text!r}", tok) from None
                if (storage is Storage.GLOBAL) != (default_storage is Storage.GLOBAL):
                    where = "library scope" if storage is Storage.GLOBAL else "function bodies"
                    raise ts.fail(f"storage={tok.text} is only allowed in {where}", tok)
            else:
                break
        if ts.accept("PUNCT", "="):
            nxt = ts.peek()
            if default_storage is not Storage.GLOBAL and nxt.kind == "IDENT" and nxt.text in ("call", "icall", "forge"):
                # `var x = call f()` declares x, then stores the result into it
                decl = self.mark(VarDecl(name, storage, shared, None), start)
                return decl, self.call_like(VarRef(name), nxt)
            init = self.expr()
        else:
            init = None
        return self.mark(VarDecl(name, storage, shared, init), start)

    def statement(self) -> Stmt:
        ts = self.ts
        tok = ts.peek()
        if ts.at("IDENT", "var"):
            return self.var_decl(Storage.STACK)
        if ts.at("IDENT", "return"):
            ts.next()
            value = None
            if not ts.at("PUNCT", "}") and not ts.at("PUNCT", ";"):
                value = self.expr()
            return self.mark(Return(value), tok)
        if tok.kind == "IDENT" and tok.text in ("call", "icall", "forge"):
            return self.call_like(None)
        target = self.lvalue()
        self.punct("=")
        if ts.peek().kind == "IDENT" and ts.peek().text in ("call", "icall", "forge"):
            return self.call_like(target, tok)
        return self.mark(Assign(target, self.expr()), tok)

    def call_like(self, dest, start=None) -> Stmt:
        ts = self.ts
        kw = ts.next()
        start = start or kw
        if kw.text == "icall":
            pointer = self.term()
            args = self.args()
            if not ts.at("IDENT", "targets"):
                raise ts.fail("indirect calls must list their possible targets with targets(...)")
            ts.next()
            self.punct("(")
            targets = [self.ident()]
            while ts.accept("PUNCT", ","):
                targets.append(self.ident())
            self.punct(")")
            return self.mark(IndirectCall(pointer, args, tuple(dict.fromkeys(targets)), dest), start)
        callee = self.ident()
        args = self.args()
        node = Call(callee, args, dest) if kw.text == "call" else Forge(callee, args, dest)
        return self.mark(node, start)

    def args(self) -> tuple[Expr, ...]:
        self.punct("(")
        out = []
        while not self.ts.at("PUNCT", ")"):
            out.append(self.expr())
            if not self.ts.accept("PUNCT", ","):
                break
        self.punct(")")
        return tuple(out)

    def lvalue(self) -> LValue:
        ts = self.ts
        tok = ts.peek()
        if ts.accept("PUNCT", "*"):
            return Deref(self.term())
        if tok.kind == "REG":
            return self.term()
        if tok.kind == "IDENT":
            return self.name_ref()
        raise ts.fail(f"expected a statement, got {tok.text!r}")

    def name_ref(self) -> Union[VarRef, GlobalRef]:
        name = self.ident()
        if self.ts.accept("PUNCT", "."):
            return GlobalRef(name, self.ident())
        return VarRef(name)

    def expr(self) -> Expr:
        left = self.term()
        while self.ts.accept("PUNCT", "+"):
            left = Add(left, self.term())
        return left

    def term(self) -> Expr:
        ts = self.ts
        tok = ts.peek()
        if tok.kind == "NUMBER":
            ts.next()
            return Lit(int(tok.text, 0))
        if tok.kind == "REG":
            ts.next()
            index = int(tok.text[2:])
            if index >= NUM_REGISTERS:
                raise ts.fail(f"no register {tok.text}", tok)
            return Reg(index)
        if ts.accept("PUNCT", "&"):
            return AddrOf(self.name_ref())
        if ts.accept("PUNCT", "*"):
            return Deref(self.term())
        if ts.accept("PUNCT", "("):
            inner = self.expr()
            self.punct(")")
            return inner
        if tok.kind == "IDENT":
            return self.name_ref()
        raise ts.fail(f"expected an expression, got {tok.text!r}" if tok.kind != "EOF" else "unexpected end of input")


# ---------------------------------------------------------------------------
# name resolution

class _Resolver:
    def __init__(self, program: Program, locs: dict):
        self.program = program
        self.locs = locs
        self.functions: dict[str, FunctionDef] = {}
        self.globals: dict[str, set[str]] = {}

    def err(self, cls, msg, node=None):
        line, col = self.locs.get(id(node), (None, None))
        return cls(msg, line, col)

    def run(self) -> Program:
        libs = set()
        for lib in self.program.libraries:
            if lib.name in libs:
                raise self.err(DuplicateDefinition, f"library {lib.name} defined twice")
            libs.add(lib.name)
            names = set()
            for g in lib.globals:
                if g.name in names:
                    raise self.err(DuplicateDefinition, f"global {lib.name}.{g.name} defined twice", g)
                names.add(g.name)
            self.globals[lib.name] = names
            for fn in lib.functions:
                if fn.name in self.functions:
                    raise self.err(DuplicateDefinition, f"function {fn.name} defined twice", fn)
                self.functions[fn.name] = fn
        for lib in self.program.libraries:
            for g in lib.globals:
                self.check_shared(g)
        return Program(tuple(
            replace(lib, functions=tuple(self.function(fn) for fn in lib.functions))
            for lib in self.program.libraries
        ))

    def check_shared(self, decl: VarDecl):
        for other in decl.shared_with or ():
            if other not in self.globals:
                raise self.err(UndefinedLibrary, f"{decl.name} is shared with unknown library {other}", decl)

    def function(self, fn: FunctionDef) -> FunctionDef:
        if len(set(fn.params)) != len(fn.params):
            raise self.err(DuplicateDefinition, f"{fn.name}: repeated parameter name", fn)
        self.fn = fn
        self.params = set(fn.params)
        self.locals: set[str] = set()
        body = []
        for stmt in fn.body:
            self.stmt_node = stmt
            body.append(self.stmt(stmt))
        return replace(fn, body=tuple(body))

    def stmt(self, s: Stmt) -> Stmt:
        if isinstance(s, VarDecl):
            init = self.expr(s.init) if s.init is not None else None
            if s.name in self.locals or s.name in self.params:
                raise self.err(DuplicateDefinition, f"{self.fn.name}: {s.name} declared twice", s)
            self.check_shared(s)
            self.locals.add(s.name)
            return replace(s, init=init)
        if isinstance(s, Assign):
            return Assign(self.lvalue(s.target), self.expr(s.value))
        if isinstance(s, Return):
            return Return(self.expr(s.value) if s.value is not None else None)
        if isinstance(s, (Call, Forge)):
            self.check_call(s.callee, len(s.args), s)
            return replace(s, args=tuple(self.expr(a) for a in s.args), dest=self.lvalue(s.dest))
        if isinstance(s, IndirectCall):
            for t in s.targets:
                self.check_call(t, len(s.args), s)
            pointer = self.expr(s.pointer)
            return replace(s, pointer=pointer, args=tuple(self.expr(a) for a in s.args), dest=self.lvalue(s.dest))
        raise self.err(FlexCSyntaxError, f"unexpected statement {s!r}", s)

    def check_call(self, callee: str, nargs: int, node):
        fn = self.functions.get(callee)
        if fn is None:
            raise self.err(UndefinedFunction, f"{self.fn.name}: call to undefined function {callee}", node)
        if len(fn.params) != nargs:
            raise self.err(ArityMismatch, f"{self.fn.name}: {callee} takes {len(fn.params)} arguments, got {nargs}", node)

    def lvalue(self, lv):
        if lv is None or isinstance(lv, Reg):
            return lv
        if isinstance(lv, Deref):
            return Deref(self.expr(lv.pointer))
        return self.name(lv)

    def name(self, ref):
        if isinstance(ref, GlobalRef):
            if ref.library not in self.globals:
                raise self.err(UndefinedLibrary, f"{self.fn.name}: unknown library {ref.library}", self.stmt_node)
            if ref.name not in self.globals[ref.library]:
                raise self.err(UndefinedVariable, f"{self.fn.name}: {ref.library}.{ref.name} is not defined", self.stmt_node)
            return ref
        if ref.name in self.locals or ref.name in self.params:
            return ref
        if ref.name in self.globals[self.fn.library]:
            return GlobalRef(self.fn.library, ref.name)
        raise self.err(UndefinedVariable, f"{self.fn.name}: undefined variable {ref.name}", self.stmt_node)

    def expr(self, e: Expr) -> Expr:
        if isinstance(e, (Lit, Reg, FuncAddr)):
            return e
        if isinstance(e, (VarRef, GlobalRef)):
            return self.name(e)
        if isinstance(e, AddrOf):
            t = e.target
            if isinstance(t, VarRef) and t.name not in self.locals and t.name not in self.params \
                    and t.name not in self.globals[self.fn.library] and t.name in self.functions:
                return FuncAddr(t.name)
            if isinstance(t, VarRef) and t.name in self.params:
                raise self.err(FlexCNameError, f"{self.fn.name}: cannot take the address of parameter {t.name}", self.stmt_node)
            return AddrOf(self.name(t))
        if isinstance(e, Deref):
            return Deref(self.expr(e.pointer))
        if isinstance(e, Add):
            return Add(self.expr(e.left), self.expr(e.right))
        raise TypeError(e)


def parse_program(text: str) -> Program:
    parser = _Parser(text)
    program = parser.program()
    return _Resolver(program, parser.locs).run()


# ---------------------------------------------------------------------------
# printing

def format_expr(e: Expr, top: bool = True) -> str:
    if isinstance(e, Lit):
        return str(e.value)
    if isinstance(e, VarRef):
        return e.name
    if isinstance(e, GlobalRef):
        return f"{e.library}.{e.name}"
    if isinstance(e, AddrOf):
        return "&" + format_expr(e.target)
    if isinstance(e, FuncAddr):
        return "&" + e.name
    if isinstance(e, Reg):
        return f"%r{e.index}"
    if isinstance(e, Deref):
        return "*" + format_expr(e.pointer, top=False)
    if isinstance(e, Add):
        text = f"{format_expr(e.left)} + {format_expr(e.right, top=False)}"
        return text if top else f"({text})"
    raise TypeError(e)


def _format_args(args) -> str:
    return ", ".join(format_expr(a) for a in args)


def format_decl(d: VarDecl) -> str:
    parts = [f"var {d.name}: int"]
    if d.shared_with:
        parts.append(f"shared({', '.join(sorted(d.shared_with))})")
    if d.storage is Storage.HEAP:
        parts.append("storage=heap")
    if d.init is not None:
        parts.append(f"= {format_expr(d.init)}")
    text = " ".join(parts)
    if d.placement is not None:
        text += f"  # placed: {d.placement}"
    return text


def format_stmt(s: Stmt) -> str:
    prefix = ""
    if isinstance(s, CALL_LIKE) and s.dest is not None:
        prefix = format_expr(s.dest) + " = "
    if isinstance(s, VarDecl):
        return format_decl(s)
    if isinstance(s, Assign):
        return f"{format_expr(s.target)} = {format_expr(s.value)}"
    if isinstance(s, Return):
        return "return" if s.value is None else f"return {format_expr(s.value)}"
    if isinstance(s, Call):
        return f"{prefix}call {s.callee}({_format_args(s.args)})"
    if isinstance(s, Forge):
        return f"{prefix}forge {s.callee}({_format_args(s.args)})"
    if isinstance(s, IndirectCall):
        text = f"{prefix}icall {format_expr(s.pointer, top=False)}({_format_args(s.args)}) targets({', '.join(s.targets)})"
        if s.wrappers:
            text += "  # via " + ", ".join(f"{t}->{w}" for t, w in s.wrappers)
        return text
    if isinstance(s, GatePlaceholder):
        return f"{prefix}gate?({s.callee_library}, {s.callee}{', ' if s.args else ''}{_format_args(s.args)})"
    if isinstance(s, GateCall):
        return f"{prefix}gate<{s.kind} {s.source}->{s.target}> {s.callee}({_format_args(s.args)})"
    raise TypeError(s)


def format_function(fn: FunctionDef, indent: str = "  ") -> str:
    params = ", ".join(f"{p}: int" for p in fn.params)
    lines = [f"{indent}fn {fn.name}({params}) {{"]
    lines += [f"{indent}  {format_stmt(s)}" for s in fn.body]
    lines.append(f"{indent}}}")
    return "\n".join(lines)


def format_program(program: Program) -> str:
    out = []
    for lib in program.libraries:
        out.append(f"library {lib.name} {{")
        out += [f"  {format_decl(g)}" for g in lib.globals]
        out += [format_function(fn) for fn in lib.functions]
        out.append("}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# traversal helpers

def iter_exprs(e: Expr | None) -> Iterator[Expr]:
    if e is None:
        return
    yield e
    if isinstance(e, AddrOf):
        yield from iter_exprs(e.target)
    elif isinstance(e, Deref):
        yield from iter_exprs(e.pointer)
    elif isinstance(e, Add):
        yield from iter_exprs(e.left)
        yield from iter_exprs(e.right)


def stmt_exprs(s: Stmt) -> Iterator[Expr]:
    if isinstance(s, VarDecl):
        yield from iter_exprs(s.init)
    elif isinstance(s, Assign):
        yield from iter_exprs(s.target)
        yield from iter_exprs(s.value)
    elif isinstance(s, Return):
        yield from iter_exprs(s.value)
    elif isinstance(s, CALL_LIKE):
        if isinstance(s, IndirectCall):
            yield from iter_exprs(s.pointer)
        for a in s.args:
            yield from iter_exprs(a)
        yield from iter_exprs(s.dest)


# ---------------------------------------------------------------------------
# call graph

@dataclass(frozen=True)
class CallEdge:
    caller: str
    callee: str
    cross_library: bool


@dataclass(frozen=True)
class CallGraph:
    nodes: tuple[str, ...]
    edges: tuple[CallEdge, ...]

    def cross_edges(self) -> list[CallEdge]:
        return [e for e in self.edges if e.cross_library]

    def to_json(self) -> list[dict]:
        return [{"caller": e.caller, "callee": e.callee, "cross": e.cross_library} for e in self.edges]

    def to_networkx(self):
        import networkx as nx

        g = nx.MultiDiGraph()
        g.add_nodes_from(self.nodes)
        for e in self.edges:
            g.add_edge(e.caller, e.callee, cross=e.cross_library)
        return g


def call_graph(program: Program) -> CallGraph:
    """One edge per call site; an indirect call adds one edge per listed target."""
    owner = {name: fn.library for name, fn in program.functions().items()}
    edges = []
    for lib in program.libraries:
        for fn in lib.functions:
            for s in fn.body:
                if isinstance(s, Call):
                    callees = [s.callee]
                elif isinstance(s, IndirectCall):
                    callees = list(s.targets)
                else:
                    continue
                edges.extend(CallEdge(fn.name, c, owner[c] != lib.name) for c in callees)
    return CallGraph(tuple(owner), tuple(edges))


# ---------------------------------------------------------------------------
# JSON codec for AST nodes

_NODE_TYPES = {cls.__name__: cls for cls in (
    Lit, VarRef, GlobalRef, AddrOf, FuncAddr, Deref, Add, Reg,
    VarDecl, Assign, Call, IndirectCall, Forge, Return, GatePlaceholder, GateCall,
    FunctionDef, LibraryUnit, Program,
)}


def to_json(node):
    """Encode an AST node (or nested containers of them) as plain JSON data."""
    if is_dataclass(node):
        out = {"node": type(node).__name__}
        for f in fields(node):
            out[f.name] = to_json(getattr(node, f.name))
        return out
    if isinstance(node, enum.Enum):
        return node.value
    if isinstance(node, frozenset):
        return sorted(node)
    if isinstance(node, (tuple, list)):
        return [to_json(x) for x in node]
    return node


def from_json(data):
    """Inverse of :func:`to_json`."""
    if isinstance(data, list):
        return tuple(from_json(x) for x in data)
    if not isinstance(data, dict) or "node" not in data:
        return data
    cls = _NODE_TYPES[data["node"]]
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name == "storage":
            value = Storage(value)
        elif f.name == "shared_with":
            value = frozenset(value) if value is not None else None
        elif f.name == "wrappers":
            value = tuple(tuple(pair) for pair in value)
        else:
            value = from_json(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def program_to_json(program: Program) -> str:
    return json.dumps(to_json(program), indent=1)
