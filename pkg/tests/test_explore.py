import itertools
import random

import networkx as nx
import pytest
from helpers import GOLDEN, load_program, oracle_dominates, set_partitions
from hypothesis import given, settings
from hypothesis import strategies as st

from flexsim.config import (
    CompartmentDecl,
    Hardening,
    ImageConfig,
    Mechanism,
    Sharing,
    config_from_partition,
    config_id,
    enumerate_space,
)
from flexsim.explore import (
    ComponentSetMismatch,
    DuplicateConfig,
    Mode,
    ProviderFailure,
    ResultsFileProvider,
    SimulatorProvider,
    build_poset,
    dominates,
    explore,
    export_dot,
    safety_vector,
)
from flexsim.source import parse_program

M = Mechanism.MPK_DSS


def pair(split: bool, hardening_b=frozenset(), mechanism=M, sharing=Sharing.DSS) -> ImageConfig:
    if split:
        comps = [CompartmentDecl("comp1", mechanism, default=True),
                 CompartmentDecl("comp2", mechanism, hardening=frozenset(hardening_b))]
        return ImageConfig.build(comps, {"a": "comp1", "b": "comp2"}, sharing)
    comps = [CompartmentDecl("comp1", mechanism, default=True, hardening=frozenset(hardening_b))]
    return ImageConfig.build(comps, {"a": "comp1", "b": "comp1"}, sharing)


C1, C2, C3 = pair(False), pair(True), pair(True, {Hardening.CFI})


def test_dominance_examples():
    assert dominates(C3, C2) and dominates(C2, C1) and dominates(C3, C1)
    assert not dominates(C1, C2) and not dominates(C2, C3)
    assert dominates(C2, C2)
    cfi, asan = pair(True, {Hardening.CFI}), pair(True, {Hardening.ASAN})
    assert not dominates(cfi, asan) and not dominates(asan, cfi)
    assert dominates(pair(True, mechanism=Mechanism.EPT), pair(True))
    assert dominates(pair(True, sharing=Sharing.HEAP_CONVERSION), pair(True))


def test_hardening_on_compartment_reaches_each_member():
    together = pair(False, {Hardening.CFI})
    assert safety_vector(together).hardening_map == {"a": {Hardening.CFI}, "b": {Hardening.CFI}}
    assert not dominates(together, C3) and not dominates(C3, together)


def test_mismatched_components():
    other = ImageConfig.build([CompartmentDecl("comp1", M, default=True)], {"a": "comp1", "z": "comp1"})
    with pytest.raises(ComponentSetMismatch):
        dominates(C1, other)
    with pytest.raises(ComponentSetMismatch):
        build_poset([C1, other])


def random_configs(rng: random.Random, n: int, comps=("a", "b", "c")) -> list[ImageConfig]:
    parts = list(set_partitions(list(comps)))
    out: dict = {}
    while len(out) < n:
        blocks = rng.choice(parts)
        mech = rng.choice([Mechanism.FUNC_CALL, Mechanism.MPK_DSS, Mechanism.EPT])
        sharing = rng.choice(list(Sharing))
        hard = {c: set(rng.sample([Hardening.CFI, Hardening.ASAN, Hardening.UBSAN], rng.randint(0, 2)))
                for c in comps}
        config = config_from_partition(list(comps), blocks, mech, sharing, hard)
        out.setdefault(safety_vector(config), config)
    return list(out.values())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_dominance_is_a_partial_order(seed):
    configs = random_configs(random.Random(seed), 6)
    for a in configs:
        assert dominates(a, a)
    for a, b in itertools.permutations(configs, 2):
        assert not (dominates(a, b) and dominates(b, a))
        assert dominates(a, b) == oracle_dominates(a, b)
    for a, b, c in itertools.permutations(configs, 3):
        if dominates(a, b) and dominates(b, c):
            assert dominates(a, c)


@pytest.mark.parametrize("seed", range(3))
def test_reachability_matches_brute_force(seed):
    configs = random_configs(random.Random(seed), 30)
    poset = build_poset(configs)
    assert nx.is_directed_acyclic_graph(poset.graph)
    for i, j in itertools.permutations(range(30), 2):
        a, b = poset.ids[i], poset.ids[j]
        assert (b in nx.descendants(poset.graph, a)) == oracle_dominates(configs[j], configs[i])
    # a Hasse diagram has no shortcut edges
    for u, v in poset.graph.edges:
        assert not any(v in nx.descendants(poset.graph, w) for w in poset.graph.successors(u) if w != v)


def test_singleton_poset():
    poset = build_poset([C2])
    assert poset.minimal() == poset.maximal() == [config_id(C2)]
    assert poset.graph.number_of_edges() == 0


def test_duplicate_configs_rejected():
    with pytest.raises(DuplicateConfig):
        build_poset([C2, pair(True)])


def test_chain_poset():
    poset = build_poset([C3, C1, C2])
    ids = {c: config_id(c) for c in (C1, C2, C3)}
    assert set(poset.graph.edges) == {(ids[C1], ids[C2]), (ids[C2], ids[C3])}
    assert poset.minimal() == [ids[C1]] and poset.maximal() == [ids[C3]]
    assert poset.topological() == [ids[C1], ids[C2], ids[C3]]
    assert poset.safer(ids[C1]) == {ids[C2], ids[C3]}
    assert poset.less_safe(ids[C3]) == {ids[C1], ids[C2]}


CHAIN_PERF = {config_id(C1): 10, config_id(C2): 6, config_id(C3): 2}


@pytest.mark.parametrize("mode", list(Mode))
def test_chain_exploration(mode):
    poset = build_poset([C1, C2, C3])
    result = explore(poset, ResultsFileProvider(CHAIN_PERF), 5, mode)
    assert result.qualifying == [config_id(C1), config_id(C2)]
    assert result.maximal == [config_id(C2)]
    assert result.evaluated == 3
    zero = explore(poset, ResultsFileProvider(CHAIN_PERF), 0, mode)
    assert zero.maximal == [config_id(C3)] and len(zero.qualifying) == 3
    strict = explore(poset, ResultsFileProvider(CHAIN_PERF), 11, mode)
    assert strict.maximal == [] and strict.qualifying == []
    if mode is Mode.PRUNED:
        assert strict.evaluated == 1 and len(strict.skipped) == 2


def test_negative_budget_rejected():
    with pytest.raises(ValueError):
        explore(build_poset([C1]), ResultsFileProvider(CHAIN_PERF), -1)


def test_provider_failure_keeps_partial_result():
    poset = build_poset([C1, C2, C3])
    partial = {config_id(C1): 10}
    with pytest.raises(ProviderFailure) as info:
        explore(poset, ResultsFileProvider(partial), 5)
    assert info.value.node == config_id(C2)
    assert info.value.partial.labels == {config_id(C1): 10.0}


def test_dot_rendering():
    assert export_dot(build_poset([])) == "digraph {\n}\n"
    poset = build_poset([C1, C2, C3])
    result = explore(poset, ResultsFileProvider(CHAIN_PERF), 5)
    dot = export_dot(poset, result)
    assert dot == (GOLDEN / "chain3.dot").read_text()
    assert dot.count(" -> ") == 2
    assert dot.count("★") == len(result.maximal)
    plain = export_dot(poset)
    assert "★" not in plain and "fontcolor" not in plain


def test_pruned_dot_marks_skipped_nodes():
    poset = build_poset([C1, C2, C3])
    result = explore(poset, ResultsFileProvider(CHAIN_PERF), 8, Mode.PRUNED)
    assert result.skipped == [config_id(C3)]
    line = next(ln for ln in export_dot(poset, result).splitlines() if ln.startswith(f'  "{config_id(C3)}" ['))
    assert "style=dashed" in line


def test_parallel_matches_serial():
    space = enumerate_space(["a", "b", "c"], [[["a", "b", "c"]], [["a"], ["b", "c"]], [["a"], ["b"], ["c"]]],
                            {Hardening.CFI}, M, Sharing.DSS)
    poset = build_poset(space)
    perf = {config_id(c): float(i % 7) for i, c in enumerate(space)}
    serial = explore(poset, ResultsFileProvider(perf), 3)
    parallel = explore(poset, ResultsFileProvider(perf), 3, jobs=4)
    assert serial.labels == parallel.labels and serial.maximal == parallel.maximal


def test_simulator_provider():
    program = load_program("chain3.flexc")
    libs = program.library_names
    space = enumerate_space(libs, [[libs], [[lib] for lib in libs]], set(), M, Sharing.DSS)
    poset = build_poset(space)
    result = explore(poset, SimulatorProvider(program), 0)
    together, apart = (config_id(c) for c in space)
    # splitting adds gates, so it can only be slower
    assert result.labels[together] > result.labels[apart]
    assert result.metric == "1/cycles"
    assert result.maximal == [apart]
    tight = explore(poset, SimulatorProvider(program), result.labels[together])
    assert tight.maximal == [together]


def test_simulator_provider_reports_faults():
    program = parse_program("library a { fn main() { return b.g } }\nlibrary b { var g = 1 }")
    poset = build_poset([pair(False), pair(True)])
    with pytest.raises(ProviderFailure) as info:
        explore(poset, SimulatorProvider(program), 0)
    assert info.value.node == config_id(pair(True))
    assert "faulted" in info.value.reason
    assert info.value.partial.labels == {config_id(pair(False)): 1 / 1}
