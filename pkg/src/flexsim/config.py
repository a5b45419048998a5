"""Image configurations: compartments, isolation mechanisms, hardening and the
library-to-compartment map.

Config files use the two-level key/value layout::

    compartments:
      - comp1:
        mechanism: intel-mpk
        default: True
      - comp2:
        mechanism: intel-mpk
        hardening: [cfi, asan]
    libraries:
      - libredis: comp1
      - libopenjpg: comp2
      - lwip: comp2

Optional keys: ``gate: light`` on an ``intel-mpk`` compartment selects the
light gate, and a top-level ``sharing: dss | shared-stack | heap`` picks the
data sharing strategy.
"""
from __future__ import annotations

import enum
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import yaml

from .errors import FlexError, ParseError, Violation

MPK_KEYS = 16
# one key is reserved for the shared domain
MAX_MPK_COMPARTMENTS = MPK_KEYS - 1


class Mechanism(enum.Enum):
    FUNC_CALL = "none"
    MPK_LIGHT = "intel-mpk-light"
    MPK_DSS = "intel-mpk"
    EPT = "vm-ept"

    @property
    def rank(self) -> int:
        return _MECHANISM_RANK[self]

    @property
    def is_mpk(self) -> bool:
        return self in (Mechanism.MPK_LIGHT, Mechanism.MPK_DSS)


_MECHANISM_RANK = {
    Mechanism.FUNC_CALL: 0,
    Mechanism.MPK_LIGHT: 1,
    Mechanism.MPK_DSS: 2,
    Mechanism.EPT: 3,
}


class Hardening(enum.Enum):
    CFI = "cfi"
    ASAN = "asan"
    UBSAN = "ubsan"
    KASAN = "kasan"
    STACK_PROTECTOR = "stackprotector"


_HARDENING_ALIASES = {
    "stack-protector": Hardening.STACK_PROTECTOR,
    "stack_protector": Hardening.STACK_PROTECTOR,
    "ssp": Hardening.STACK_PROTECTOR,
}


class Sharing(enum.Enum):
    SHARED_STACK = "shared-stack"
    DSS = "dss"
    HEAP_CONVERSION = "heap"

    @property
    def rank(self) -> int:
        return _SHARING_RANK[self]


_SHARING_RANK = {Sharing.SHARED_STACK: 0, Sharing.DSS: 1, Sharing.HEAP_CONVERSION: 2}


class ConfigError(FlexError):
    pass


class ConfigSyntaxError(ParseError, ConfigError):
    pass


class UnknownMechanism(ConfigSyntaxError):
    pass


class UnknownHardening(ConfigSyntaxError):
    pass


class UnknownCompartment(ConfigSyntaxError):
    pass


class InvalidPartition(ConfigError):
    pass


def parse_hardening(name: str) -> Hardening:
    key = str(name).strip().lower()
    if key in _HARDENING_ALIASES:
        return _HARDENING_ALIASES[key]
    try:
        return Hardening(key)
    except ValueError:
        raise UnknownHardening(f"unknown hardening {name!r}") from None


def parse_sharing(name: str) -> Sharing:
    key = str(name).strip().lower().replace("_", "-")
    aliases = {"shared-stack": Sharing.SHARED_STACK, "stack": Sharing.SHARED_STACK,
               "dss": Sharing.DSS, "heap": Sharing.HEAP_CONVERSION,
               "heap-conversion": Sharing.HEAP_CONVERSION}
    if key not in aliases:
        raise ConfigSyntaxError(f"unknown sharing strategy {name!r}")
    return aliases[key]


@dataclass(frozen=True)
class CompartmentDecl:
    name: str
    mechanism: Mechanism = Mechanism.FUNC_CALL
    hardening: frozenset[Hardening] = frozenset()
    default: bool = False


@dataclass(frozen=True)
class ImageConfig:
    compartments: tuple[CompartmentDecl, ...]
    libraries: tuple[tuple[str, str], ...]  # (library, compartment), file order
    sharing: Sharing = Sharing.DSS
    # per-library hardening; libraries absent here inherit their compartment's set
    library_hardening: tuple[tuple[str, frozenset[Hardening]], ...] = ()

    @classmethod
    def build(
        cls,
        compartments: Iterable[CompartmentDecl],
        library_map: Mapping[str, str],
        sharing: Sharing = Sharing.DSS,
        library_hardening: Mapping[str, Iterable[Hardening]] | None = None,
    ) -> "ImageConfig":
        lh = tuple((lib, frozenset(hs)) for lib, hs in (library_hardening or {}).items())
        return cls(tuple(compartments), tuple(library_map.items()), sharing, lh)

    @property
    def library_map(self) -> dict[str, str]:
        return dict(self.libraries)

    @property
    def compartment_names(self) -> list[str]:
        return [c.name for c in self.compartments]

    def compartment(self, name: str) -> CompartmentDecl:
        for c in self.compartments:
            if c.name == name:
                return c
        raise KeyError(name)

    def compartment_of(self, library: str) -> str:
        return self.library_map[library]

    def key_of(self, compartment: str) -> int:
        """Protection key / address-space id; 0 is the shared domain."""
        return self.compartment_names.index(compartment) + 1

    def members(self, compartment: str) -> list[str]:
        return [lib for lib, comp in self.libraries if comp == compartment]

    @property
    def default_compartment(self) -> str | None:
        defaults = [c.name for c in self.compartments if c.default]
        return defaults[0] if len(defaults) == 1 else None

    @property
    def mechanism(self) -> Mechanism | None:
        """The image-wide mechanism, or None when compartments disagree."""
        kinds = {c.mechanism for c in self.compartments}
        return kinds.pop() if len(kinds) == 1 else None

    def hardening_of(self, library: str) -> frozenset[Hardening]:
        explicit = dict(self.library_hardening)
        if library in explicit:
            return explicit[library]
        return self.compartment(self.compartment_of(library)).hardening

    def component_hardening(self) -> dict[str, frozenset[Hardening]]:
        return {lib: self.hardening_of(lib) for lib, _ in self.libraries}

    def partition(self) -> frozenset[frozenset[str]]:
        """Non-empty compartments as blocks of library names."""
        blocks = [frozenset(self.members(c.name)) for c in self.compartments]
        return frozenset(b for b in blocks if b)


# ---------------------------------------------------------------------------
# parsing

def _mechanism_from(value, gate, where: str) -> Mechanism:
    name = str(value).strip().strip("*").lower() if value is not None else "none"
    if name in ("intel-mpk", "mpk"):
        if gate is None or str(gate).lower() in ("full", "dss"):
            return Mechanism.MPK_DSS
        if str(gate).lower() == "light":
            return Mechanism.MPK_LIGHT
        raise ConfigSyntaxError(f"{where}: unknown gate flavour {gate!r}")
    if name in ("intel-mpk-light", "mpk-light"):
        return Mechanism.MPK_LIGHT
    if name in ("vm-ept", "ept"):
        return Mechanism.EPT
    if name in ("none", "fcall", "func-call"):
        return Mechanism.FUNC_CALL
    raise UnknownMechanism(f"{where}: unknown mechanism {value!r}")


def _split_entry(entry, what: str) -> tuple[str, dict]:
    # `- comp1:` followed by same-indent keys loads as {comp1: None, mechanism: ...};
    # properly nested YAML loads as {comp1: {mechanism: ...}}
    if isinstance(entry, str):
        return entry, {}
    if not isinstance(entry, dict) or not entry:
        raise ConfigSyntaxError(f"malformed {what} entry: {entry!r}")
    if len(entry) == 1:
        (name, attrs), = entry.items()
        if attrs is None:
            attrs = {}
        if not isinstance(attrs, dict):
            raise ConfigSyntaxError(f"malformed {what} entry: {entry!r}")
        return str(name), dict(attrs)
    names = [k for k, v in entry.items() if v is None]
    if len(names) != 1:
        raise ConfigSyntaxError(f"cannot find the {what} name in {entry!r}")
    attrs = {k: v for k, v in entry.items() if v is not None}
    return str(names[0]), attrs


def _default_sharing(mechanisms: set[Mechanism]) -> Sharing:
    if mechanisms & {Mechanism.MPK_DSS, Mechanism.EPT}:
        return Sharing.DSS
    return Sharing.SHARED_STACK


def parse_config(text: str) -> ImageConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise ConfigSyntaxError(str(getattr(exc, "problem", exc)), mark.line + 1, mark.column + 1) from None
        raise ConfigSyntaxError(str(exc)) from None
    if not isinstance(doc, dict) or "compartments" not in doc:
        raise ConfigSyntaxError("config needs a 'compartments' section")
    unknown = set(doc) - {"compartments", "libraries", "sharing"}
    if unknown:
        raise ConfigSyntaxError(f"unknown top-level keys: {sorted(unknown)}")

    comps = []
    for entry in doc["compartments"] or []:
        name, attrs = _split_entry(entry, "compartment")
        extra = set(attrs) - {"mechanism", "hardening", "default", "gate"}
        if extra:
            raise ConfigSyntaxError(f"compartment {name}: unknown keys {sorted(extra)}")
        mech = _mechanism_from(attrs.get("mechanism"), attrs.get("gate"), name)
        hardening = attrs.get("hardening") or []
        if isinstance(hardening, str):
            hardening = [hardening]
        default = attrs.get("default", False)
        if isinstance(default, str):
            default = default.strip().lower() in ("true", "yes", "1")
        comps.append(CompartmentDecl(name, mech, frozenset(parse_hardening(h) for h in hardening), bool(default)))
    if len({c.name for c in comps}) != len(comps):
        raise ConfigSyntaxError("duplicate compartment name")

    names = {c.name for c in comps}
    libs: dict[str, str] = {}
    for entry in doc.get("libraries") or []:
        if not isinstance(entry, dict) or len(entry) != 1:
            raise ConfigSyntaxError(f"malformed library entry: {entry!r}")
        (lib, comp), = entry.items()
        lib, comp = str(lib), str(comp)
        if lib in libs:
            raise ConfigSyntaxError(f"library {lib} mapped twice")
        if comp not in names:
            raise UnknownCompartment(f"library {lib} mapped to undeclared compartment {comp!r}")
        libs[lib] = comp

    if "sharing" in doc:
        sharing = parse_sharing(doc["sharing"])
    else:
        sharing = _default_sharing({c.mechanism for c in comps})
    return ImageConfig(tuple(comps), tuple(libs.items()), sharing)


_MECH_TEXT = {
    Mechanism.FUNC_CALL: ("none", None),
    Mechanism.MPK_LIGHT: ("intel-mpk", "light"),
    Mechanism.MPK_DSS: ("intel-mpk", None),
    Mechanism.EPT: ("vm-ept", None),
}


def format_config(config: ImageConfig) -> str:
    """Render a config in the file format. Per-library hardening is not
    representable there and is dropped."""
    lines = ["compartments:"]
    for c in config.compartments:
        mech, gate = _MECH_TEXT[c.mechanism]
        lines.append(f"  - {c.name}:")
        lines.append(f"    mechanism: {mech}")
        if gate:
            lines.append(f"    gate: {gate}")
        if c.hardening:
            lines.append(f"    hardening: [{', '.join(sorted(h.value for h in c.hardening))}]")
        if c.default:
            lines.append("    default: True")
    lines.append("libraries:")
    for lib, comp in config.libraries:
        lines.append(f"  - {lib}: {comp}")
    lines.append(f"sharing: {config.sharing.value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# canonical JSON

def config_to_json(config: ImageConfig) -> dict:
    return {
        "compartments": [
            {
                "name": c.name,
                "mechanism": c.mechanism.value,
                "hardening": sorted(h.value for h in c.hardening),
                "default": c.default,
            }
            for c in config.compartments
        ],
        "libraries": {lib: comp for lib, comp in config.libraries},
        "sharing": config.sharing.value,
        "library_hardening": {lib: sorted(h.value for h in hs) for lib, hs in config.library_hardening},
    }


def config_from_json(data: dict) -> ImageConfig:
    comps = tuple(
        CompartmentDecl(
            c["name"],
            Mechanism(c.get("mechanism", "none")),
            frozenset(parse_hardening(h) for h in c.get("hardening", [])),
            bool(c.get("default", False)),
        )
        for c in data["compartments"]
    )
    lh = tuple(
        (lib, frozenset(parse_hardening(h) for h in hs))
        for lib, hs in data.get("library_hardening", {}).items()
    )
    return ImageConfig(comps, tuple(data["libraries"].items()), Sharing(data.get("sharing", "dss")), lh)


def config_id(config: ImageConfig) -> str:
    """Stable identity: hash of the canonical JSON export."""
    blob = json.dumps(config_to_json(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# validation

@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)
    # extra MPK keys left for restricted shared domains; None for non-MPK images
    spare_shared_keys: int | None = None

    @property
    def errors(self) -> list[Violation]:
        return [v for v in self.violations if v.is_error]

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_json(self) -> dict:
        return {
            "violations": [v.to_json() for v in self.violations],
            "spare_shared_keys": self.spare_shared_keys,
        }


def validate_config(config: ImageConfig) -> ValidationReport:
    out: list[Violation] = []

    def err(kind, msg, compartment=None, severity="error"):
        out.append(Violation(None, compartment, kind, msg, severity))

    names = config.compartment_names
    if len(set(names)) != len(names):
        err("DuplicateCompartment", "compartment names must be unique")
    defaults = [c.name for c in config.compartments if c.default]
    if not defaults:
        err("NoDefaultCompartment", "exactly one compartment must be marked default")
    elif len(defaults) > 1:
        err("MultipleDefaultCompartments", f"several default compartments: {', '.join(defaults)}")

    seen = set()
    for lib, comp in config.libraries:
        if lib in seen:
            err("DuplicateLibrary", f"library {lib} mapped more than once", comp)
        seen.add(lib)
        if comp not in names:
            err("UnknownCompartment", f"library {lib} mapped to undeclared compartment {comp}", comp)
    for lib, _ in config.library_hardening:
        if lib not in seen:
            err("UnknownLibrary", f"hardening given for unmapped library {lib}")

    for c in config.compartments:
        if not config.members(c.name):
            err("EmptyCompartment", f"compartment {c.name} holds no library", c.name, "warning")

    mech = config.mechanism
    if mech is None and config.compartments:
        err("MixedMechanisms", "all compartments of an image must use the same mechanism")

    spare = None
    mpk = any(c.mechanism.is_mpk for c in config.compartments)
    if mpk:
        n = len(config.compartments)
        if n > MAX_MPK_COMPARTMENTS:
            err("KeyBudgetExceeded",
                f"{n} compartments need {n + 1} protection keys; MPK offers {MPK_KEYS}")
        spare = max(0, MAX_MPK_COMPARTMENTS - n)
    if any(c.mechanism is Mechanism.MPK_LIGHT for c in config.compartments) and config.sharing is not Sharing.SHARED_STACK:
        err("LightGateRequiresSharedStack",
            f"light MPK gates share the stack; sharing={config.sharing.value} is not possible")
    return ValidationReport(out, spare)


# ---------------------------------------------------------------------------
# design-space enumeration

def _check_partition(components: Sequence[str], partition) -> list[list[str]]:
    blocks = [list(b) for b in partition]
    flat = [c for b in blocks for c in b]
    if any(not b for b in blocks):
        raise InvalidPartition("partition has an empty block")
    if len(flat) != len(set(flat)) or set(flat) != set(components):
        raise InvalidPartition(f"{partition!r} is not a partition of {list(components)!r}")
    order = {c: i for i, c in enumerate(components)}
    return [sorted(b, key=order.__getitem__) for b in blocks]


def config_from_partition(
    components: Sequence[str],
    partition,
    mechanism: Mechanism = Mechanism.FUNC_CALL,
    sharing: Sharing | None = None,
    library_hardening: Mapping[str, Iterable[Hardening]] | None = None,
) -> ImageConfig:
    """One compartment per block, named comp1..compN; the first block is default."""
    blocks = _check_partition(components, partition)
    lh = {c: frozenset(library_hardening.get(c, ())) for c in components} if library_hardening else {}
    comps, libmap = [], {}
    for i, block in enumerate(blocks):
        name = f"comp{i + 1}"
        hard = frozenset().union(*(lh.get(c, frozenset()) for c in block))
        comps.append(CompartmentDecl(name, mechanism, hard, default=(i == 0)))
        for c in block:
            libmap[c] = name
    libmap = {c: libmap[c] for c in components}
    if sharing is None:
        sharing = _default_sharing({mechanism})
    return ImageConfig.build(comps, libmap, sharing, lh or None)


def enumerate_space(
    components: Sequence[str],
    partitions: Sequence,
    hardening_universe: Iterable[Hardening],
    mechanism: Mechanism,
    sharing: Sharing,
) -> list[ImageConfig]:
    """All (partition, per-component hardening on/off) combinations.

    Each component's hardening is either empty or the whole universe; a
    compartment carries the union of its members' sets.
    """
    universe = frozenset(hardening_universe)
    toggles = [frozenset()] if not universe else [frozenset(), universe]
    configs = []
    for partition in partitions:
        _check_partition(components, partition)
        for combo in itertools.product(toggles, repeat=len(components)):
            hard = dict(zip(components, combo))
            configs.append(config_from_partition(components, partition, mechanism, sharing, hard))
    return configs
