"""Partial safety ordering over configurations and budget-driven exploration.

A configuration is at least as safe as another when it is at least as good
on every axis: its partition refines the other's, every component carries a
superset of the other's hardening, and its isolation mechanism and data
sharing strategy rank at least as high. Configurations form a poset whose
Hasse diagram is kept as a networkx DAG with edges pointing from less safe
to safer nodes, so the safest configurations are the sinks.
"""
from __future__ import annotations

import enum
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import networkx as nx

from .config import Hardening, ImageConfig, config_id
from .errors import FlexError


class ExploreError(FlexError):
    pass


class ComponentSetMismatch(ExploreError):
    pass


class DuplicateConfig(ExploreError):
    pass


class ProviderFailure(ExploreError):
    def __init__(self, node: str, reason: str, partial: "ExplorationResult | None" = None):
        super().__init__(f"provider failed on {node}: {reason}")
        self.node = node
        self.reason = reason
        self.partial = partial


Partition = frozenset[frozenset[str]]


@dataclass(frozen=True)
class SafetyVector:
    partition: Partition
    hardening: tuple[tuple[str, frozenset[Hardening]], ...]  # sorted by component
    mechanism_rank: int
    sharing_rank: int

    @property
    def components(self) -> frozenset[str]:
        return frozenset().union(*self.partition) if self.partition else frozenset()

    @property
    def hardening_map(self) -> dict[str, frozenset[Hardening]]:
        return dict(self.hardening)


def safety_vector(config: ImageConfig) -> SafetyVector:
    """Hardening declared on a compartment is pushed down to its member components."""
    ranks = [c.mechanism.rank for c in config.compartments if config.members(c.name)]
    hardening = config.component_hardening()
    return SafetyVector(
        partition=config.partition(),
        hardening=tuple(sorted(hardening.items())),
        mechanism_rank=min(ranks, default=0),
        sharing_rank=config.sharing.rank,
    )


def refines(p1: Partition, p2: Partition) -> bool:
    """Every block of ``p1`` lies inside some block of ``p2``."""
    return all(any(b1 <= b2 for b2 in p2) for b1 in p1)


def _vector(c) -> SafetyVector:
    return c if isinstance(c, SafetyVector) else safety_vector(c)


def dominates(c1: ImageConfig | SafetyVector, c2: ImageConfig | SafetyVector) -> bool:
    """True when ``c1`` is at least as safe as ``c2`` on every axis."""
    a, b = _vector(c1), _vector(c2)
    if a.components != b.components:
        raise ComponentSetMismatch(f"{sorted(a.components)} vs {sorted(b.components)}")
    ha, hb = a.hardening_map, b.hardening_map
    return (
        refines(a.partition, b.partition)
        and all(ha.get(k, frozenset()) >= hb.get(k, frozenset()) for k in a.components)
        and a.mechanism_rank >= b.mechanism_rank
        and a.sharing_rank >= b.sharing_rank
    )


@dataclass
class ConfigPoset:
    configs: list[ImageConfig]
    ids: list[str]
    vectors: list[SafetyVector]
    graph: nx.DiGraph  # Hasse diagram over ids, edge a -> b means b dominates a

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, node: str) -> int:
        return self._pos[node]

    def __post_init__(self):
        self._pos = {n: i for i, n in enumerate(self.ids)}

    def config(self, node: str) -> ImageConfig:
        return self.configs[self._pos[node]]

    def vector(self, node: str) -> SafetyVector:
        return self.vectors[self._pos[node]]

    def minimal(self) -> list[str]:
        return [n for n in self.ids if self.graph.in_degree(n) == 0]

    def maximal(self) -> list[str]:
        return [n for n in self.ids if self.graph.out_degree(n) == 0]

    def safer(self, node: str) -> set[str]:
        """Nodes strictly dominating ``node``."""
        return nx.descendants(self.graph, node)

    def less_safe(self, node: str) -> set[str]:
        return nx.ancestors(self.graph, node)

    def topological(self) -> list[str]:
        return list(nx.lexicographical_topological_sort(self.graph, key=self._pos.__getitem__))


def build_poset(configs: Sequence[ImageConfig]) -> ConfigPoset:
    configs = list(configs)
    vectors = [safety_vector(c) for c in configs]
    if vectors:
        comps = vectors[0].components
        for c, v in zip(configs, vectors):
            if v.components != comps:
                raise ComponentSetMismatch(
                    f"config {config_id(c)} covers {sorted(v.components)}, expected {sorted(comps)}")
    seen: dict[SafetyVector, int] = {}
    for i, v in enumerate(vectors):
        if v in seen:
            raise DuplicateConfig(f"configs {seen[v]} and {i} have the same safety vector")
        seen[v] = i
    ids = [config_id(c) for c in configs]
    if len(set(ids)) != len(ids):
        raise DuplicateConfig("configuration identifiers collide")

    full = nx.DiGraph()
    full.add_nodes_from(ids)
    for i, a in enumerate(vectors):
        for j, b in enumerate(vectors):
            if i != j and dominates(b, a):
                full.add_edge(ids[i], ids[j])
    hasse = nx.transitive_reduction(full)
    hasse.add_nodes_from(ids)
    return ConfigPoset(configs, ids, vectors, hasse)


# ---------------------------------------------------------------------------
# measurement providers

class Provider(Protocol):
    def __call__(self, config: ImageConfig) -> float: ...


class ResultsFileProvider:
    """Looks performance up by configuration id in a ``{id: number}`` map."""

    serial = False
    metric = "throughput"

    def __init__(self, results: Mapping[str, float] | str | Path, metric: str | None = None):
        if isinstance(results, (str, Path)):
            results = json.loads(Path(results).read_text())
        self.results = {str(k): float(v) for k, v in results.items()}
        if metric:
            self.metric = metric

    def __call__(self, config: ImageConfig) -> float:
        key = config_id(config)
        if key not in self.results:
            raise ProviderFailure(key, "no result recorded for this configuration")
        return self.results[key]


class SimulatorProvider:
    """Runs a FlexC workload on each configuration; performance is 1 / total cycles."""

    serial = False
    metric = "1/cycles"

    def __init__(self, program, entry: str = "main", cost_model=None, stack_size: int | None = None):
        self.program = program
        self.entry = entry
        self.cost_model = cost_model
        self.stack_size = stack_size

    def __call__(self, config: ImageConfig) -> float:
        from .machine import run
        from .transform import DEFAULT_STACK_SIZE, instantiate

        try:
            image = instantiate(self.program, config, self.stack_size or DEFAULT_STACK_SIZE, entry=self.entry)
        except FlexError as exc:
            raise ProviderFailure(config_id(config), str(exc)) from exc
        trace = run(image, self.entry, self.cost_model)
        if trace.fault:
            raise ProviderFailure(config_id(config), f"workload faulted: {trace.fault.reason}")
        return 1.0 / max(trace.cycles, 1)


# ---------------------------------------------------------------------------
# exploration

class Mode(enum.Enum):
    EXHAUSTIVE = "exhaustive"
    PRUNED = "pruned"


@dataclass
class ExplorationResult:
    budget: float
    mode: Mode
    labels: dict[str, float] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)
    qualifying: list[str] = field(default_factory=list)
    maximal: list[str] = field(default_factory=list)
    metric: str = "performance"

    @property
    def evaluated(self) -> int:
        return len(self.labels)

    @property
    def provider_calls(self) -> int:
        return len(self.labels)

    def to_json(self) -> dict:
        out = {
            "budget": self.budget,
            "evaluated": self.evaluated,
            "skipped": len(self.skipped),
            "qualifying": self.qualifying,
            "maximal": self.maximal,
            "metric": self.metric,
            "mode": self.mode.value,
        }
        if self.mode is Mode.PRUNED:
            out["assumption"] = "performance does not increase along safety dominance"
        return out


def _finish(poset: ConfigPoset, result: ExplorationResult) -> ExplorationResult:
    qual = {n for n, p in result.labels.items() if p >= result.budget}
    result.qualifying = [n for n in poset.ids if n in qual]
    result.maximal = [n for n in result.qualifying if not (poset.safer(n) & qual)]
    return result


def _measure(provider: Callable, poset: ConfigPoset, node: str) -> float:
    try:
        return float(provider(poset.config(node)))
    except ProviderFailure as exc:
        raise ProviderFailure(node, exc.reason) from exc
    except Exception as exc:  # provider bugs are reported against the node
        raise ProviderFailure(node, f"{type(exc).__name__}: {exc}") from exc


def explore(
    poset: ConfigPoset,
    provider: Callable[[ImageConfig], float],
    budget: float,
    mode: Mode | str = Mode.EXHAUSTIVE,
    jobs: int = 1,
) -> ExplorationResult:
    """Find configurations meeting ``budget`` and the safest among them.

    Pruned mode walks the poset upward from the least safe nodes and stops
    measuring above any node that misses the budget. It matches exhaustive
    mode whenever performance never increases along dominance.
    """
    mode = Mode(mode)
    if budget < 0:
        raise ValueError("budget must be >= 0")
    result = ExplorationResult(budget, mode, metric=getattr(provider, "metric", "performance"))
    try:
        if mode is Mode.EXHAUSTIVE:
            serial = getattr(provider, "serial", False) or jobs <= 1
            if serial:
                for n in poset.ids:
                    result.labels[n] = _measure(provider, poset, n)
            else:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    values = pool.map(lambda n: _measure(provider, poset, n), poset.ids)
                    for n, v in zip(poset.ids, values):
                        result.labels[n] = v
        else:
            skipped: set[str] = set()
            for n in poset.topological():
                if n in skipped:
                    continue
                perf = _measure(provider, poset, n)
                result.labels[n] = perf
                if perf < budget:
                    skipped |= poset.safer(n)
            result.skipped = [n for n in poset.ids if n in skipped]
    except ProviderFailure as exc:
        exc.partial = _finish(poset, result)
        raise
    return _finish(poset, result)


# ---------------------------------------------------------------------------
# rendering

def _describe(config: ImageConfig, vector: SafetyVector) -> str:
    order = {lib: i for i, (lib, _) in enumerate(config.libraries)}
    blocks = sorted((sorted(b, key=lambda x: (order.get(x, 0), x)) for b in vector.partition),
                    key=lambda b: (order.get(b[0], 0), b[0]))
    text = "|".join("+".join(b) for b in blocks)
    hardened = sorted(k for k, h in vector.hardening if h)
    if hardened:
        text += " H:" + ",".join(hardened)
    return text


def export_dot(poset: ConfigPoset, result: ExplorationResult | None = None) -> str:
    """DOT rendering; darker fill means higher performance, stars mark the maximal qualifying nodes."""
    lines = ["digraph {"]
    if len(poset):
        lines.append("  node [shape=box, style=filled, fillcolor=\"#ffffff\"];")
    labels = result.labels if result else {}
    lo, hi = (min(labels.values()), max(labels.values())) if labels else (0.0, 0.0)
    stars = set(result.maximal) if result else set()
    skipped = set(result.skipped) if result else set()
    for n in poset.ids:
        label = _describe(poset.config(n), poset.vector(n))
        attrs = []
        if n in labels:
            t = (labels[n] - lo) / (hi - lo) if hi > lo else 1.0
            level = round(255 * (1 - t))
            attrs.append(f'fillcolor="#{level:02x}{level:02x}{level:02x}"')
            if level < 128:
                attrs.append('fontcolor="#ffffff"')
            label += f"\\n{labels[n]:g}"
        if n in skipped:
            attrs.append("style=dashed")
        if n in stars:
            label = "★ " + label
        attrs.insert(0, f'label="{label}"')
        lines.append(f'  "{n}" [{", ".join(attrs)}];')
    order = {n: i for i, n in enumerate(poset.ids)}
    for a, b in sorted(poset.graph.edges, key=lambda e: (order[e[0]], order[e[1]])):
        lines.append(f'  "{a}" -> "{b}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def report_json(result: ExplorationResult) -> str:
    return json.dumps(result.to_json(), indent=2, sort_keys=True)
