import json
import random

import pytest
from helpers import FIXTURES, FLEXC, load_program, set_partitions, single_config, split_config
from hypothesis import given, settings
from hypothesis import strategies as st

from flexsim.config import CompartmentDecl, ImageConfig, Mechanism, Sharing
from flexsim.source import (
    Add,
    AddrOf,
    Assign,
    GateCall,
    GatePlaceholder,
    IndirectCall,
    Lit,
    Return,
    VarDecl,
    VarRef,
    parse_program,
)
from flexsim.transform import (
    ConfigInvalid,
    GateArityError,
    Role,
    UnsupportedCombination,
    image_from_json,
    image_to_json,
    insert_gate_placeholders,
    instantiate,
    layout_report,
    shadow_ref,
    ungated_image,
    wrapper_name,
)


def statements(program_or_image):
    fns = program_or_image.functions
    fns = fns() if callable(fns) else {f.name: f for f in fns}
    return [s for fn in fns.values() for s in fn.body]


def test_one_placeholder_for_the_shared_buffer_program():
    annotated = insert_gate_placeholders(load_program("shared_buffer.flexc"))
    gates = [s for s in statements(annotated) if isinstance(s, GatePlaceholder)]
    assert gates == [GatePlaceholder("app", "lwip", "lwip_recv", (AddrOf(VarRef("buf")),), VarRef("n"))]


@pytest.mark.parametrize("path", FLEXC, ids=lambda p: p.stem)
def test_placeholder_insertion_is_idempotent(path):
    once = insert_gate_placeholders(parse_program(path.read_text()))
    assert insert_gate_placeholders(once) == once


def test_single_library_program_unchanged():
    program = load_program("local_only.flexc")
    assert insert_gate_placeholders(program) == program


def test_icall_spanning_libraries_gets_a_wrapper():
    annotated = insert_gate_placeholders(load_program("icall_mixed.flexc"))
    w = wrapper_name("app", "remote_cb")
    icalls = [s for s in statements(annotated) if isinstance(s, IndirectCall)]
    assert all(s.wrappers == (("remote_cb", w),) for s in icalls)
    wrapper = annotated.function(w)
    assert wrapper.library == "app"
    assert isinstance(wrapper.body[0], GatePlaceholder) and wrapper.body[0].callee == "remote_cb"
    assert sum(isinstance(s, GatePlaceholder) for s in statements(annotated)) == 1


@pytest.mark.parametrize("path", FLEXC, ids=lambda p: p.stem)
@pytest.mark.parametrize("mechanism", list(Mechanism))
def test_no_placeholder_survives_instantiation(path, mechanism):
    program = parse_program(path.read_text())
    config = split_config(program, mechanism)
    image = instantiate(program, config)
    for s in statements(image):
        assert not isinstance(s, GatePlaceholder)
    gate_kinds = {s.kind for s in statements(image) if isinstance(s, GateCall)}
    if mechanism is Mechanism.FUNC_CALL or len(program.libraries) == 1:
        assert gate_kinds == set()
    else:
        assert len(gate_kinds) <= 1
    single = instantiate(program, single_config(program, mechanism))
    assert not any(isinstance(s, GateCall) for s in statements(single))


def test_dss_rewrite_of_shared_buffer():
    program = load_program("shared_buffer.flexc")
    image = instantiate(program, split_config(program, Mechanism.MPK_DSS))
    shadow = shadow_ref("buf", 32768)
    assert image.function_map["main"].body == (
        VarDecl("buf", shared_with=frozenset({"lwip"}), placement="dss"),
        Assign(shadow, Lit(0)),
        VarDecl("n", placement="stack"),
        GateCall("mpk-full", "lwip_recv", (Add(AddrOf(VarRef("buf")), Lit(32768)),), VarRef("n"), "c0", "c1"),
        Return(Add(shadow, VarRef("n"))),
    )
    # shadow slots land in the caller's shared upper stack half
    stack, dss = image.layout.one(Role.STACK, "c0"), image.layout.one(Role.DSS_UPPER, "c0")
    assert dss.start == stack.end and dss.size == stack.size and dss.key == 0


@pytest.mark.parametrize("sharing, placement", [
    (Sharing.HEAP_CONVERSION, "shared_heap"),
    (Sharing.SHARED_STACK, "stack"),
])
def test_other_sharing_placements(sharing, placement):
    program = load_program("shared_buffer.flexc")
    image = instantiate(program, split_config(program, Mechanism.EPT, sharing))
    assert image.function_map["main"].body[0].placement == placement


def test_rpc_areas_and_legal_entries():
    text = (FIXTURES / "flexc" / "icall_mixed.flexc").read_text()
    program = parse_program(text.replace("library lwip {", "library lwip {\n  fn api_probe() {\n    return 1\n  }"))
    image = instantiate(program, split_config(program, Mechanism.EPT), exports={"lwip": ["api_probe", "missing"]})
    assert [r.owner for r in image.layout.select(Role.RPC_AREA)] == ["c0", "c1"]
    assert image.legal_entry_map == {"c0": frozenset(), "c1": frozenset({"remote_cb", "api_probe"})}


SHARED_BUFFER_LAYOUT = """\
# 9 regions, stack size 32768, mechanism intel-mpk, sharing dss
0x00010000-0x00010fff    4096 data        owner=c0       key=1  shared=-  c0.data
0x00011000-0x00020fff   65536 heap        owner=c0       key=1  shared=-  c0.heap
0x00021000-0x00028fff   32768 stack       owner=c0       key=1  shared=-  c0.stack
0x00029000-0x00030fff   32768 dss         owner=c0       key=0  shared=c0,c1  c0.dss
0x00031000-0x00031fff    4096 data        owner=c1       key=2  shared=-  c1.data
0x00032000-0x00041fff   65536 heap        owner=c1       key=2  shared=-  c1.heap
0x00042000-0x00049fff   32768 stack       owner=c1       key=2  shared=-  c1.stack
0x0004a000-0x00051fff   32768 dss         owner=c1       key=0  shared=c0,c1  c1.dss
0x00052000-0x00062fff   69632 shared-heap owner=-        key=0  shared=c0,c1  shared.heap
  0x00031000 lwip.packets (global)
"""


def test_layout_reports():
    program = load_program("shared_buffer.flexc")
    assert layout_report(instantiate(program, split_config(program, Mechanism.MPK_DSS))) == SHARED_BUFFER_LAYOUT
    flat = json.loads(layout_report(instantiate(program, single_config(program, Mechanism.FUNC_CALL)), "json"))
    assert [(r["role"], r["owner"], r["key"], r["shared_with"]) for r in flat] == [
        ("data", "main", 1, []), ("heap", "main", 1, []), ("stack", "main", 1, [])]
    assert [r["start"] for r in flat] == [0x10000, 0x11000, 0x21000]


def test_shared_global_lives_in_shared_heap():
    program = load_program("shared_global.flexc")
    image = instantiate(program, split_config(program, Mechanism.MPK_DSS))
    heap = image.layout.one(Role.SHARED_HEAP)
    shared = [g for g in image.globals if g.placement == "shared_global"]
    assert shared and all(heap.contains(g.address) for g in shared)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_layout_is_disjoint_and_isolating(seed):
    rng = random.Random(seed)
    program = load_program(rng.choice(FLEXC).name)
    libs = program.library_names
    blocks = rng.choice(list(set_partitions(libs)))
    mechanism = rng.choice(list(Mechanism))
    sharing = (Sharing.SHARED_STACK if mechanism is Mechanism.MPK_LIGHT
               else rng.choice(list(Sharing)))
    comps = [CompartmentDecl(f"k{i}", mechanism, default=(i == 0)) for i in range(len(blocks))]
    config = ImageConfig.build(comps, {lib: f"k{i}" for i, b in enumerate(blocks) for lib in b}, sharing)
    stack = rng.choice([4096, 8192, 32768])
    image = instantiate(program, config, stack_size=stack)

    spans = sorted((r.start, r.end) for r in image.layout.regions)
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        assert a1 <= b0
    assert image.layout.is_disjoint()
    isolated = mechanism is not Mechanism.FUNC_CALL and len(blocks) > 1
    for r in image.layout.regions:
        if r.role is Role.STACK:
            assert r.size == stack
        for c in config.compartment_names:
            if isolated and r.owner not in (None, c) and r.key != 0:
                assert not r.accessible_from(c)
    for g in image.globals:
        region = image.layout.find(g.address)
        assert region is not None and region.role in (Role.DATA, Role.SHARED_HEAP)


def test_light_gates_reject_private_stacks():
    program = load_program("shared_buffer.flexc")
    with pytest.raises(UnsupportedCombination):
        instantiate(program, split_config(program, Mechanism.MPK_LIGHT, Sharing.DSS))


def test_invalid_config_rejected():
    program = load_program("shared_buffer.flexc")
    config = ImageConfig.build([CompartmentDecl("a", Mechanism.MPK_DSS)], {"app": "a", "lwip": "a"})
    with pytest.raises(ConfigInvalid):
        instantiate(program, config)


def test_gate_arity_limit():
    args = ", ".join(f"a{i}" for i in range(7))
    text = f"""
library app {{ fn main() {{ var r = call wide({", ".join(["1"] * 7)})
  return r }} }}
library lib {{ fn wide({args}) {{ return a6 }} }}
"""
    program = parse_program(text)
    assert instantiate(program, split_config(program, Mechanism.FUNC_CALL))
    with pytest.raises(GateArityError):
        instantiate(program, split_config(program, Mechanism.MPK_DSS))


@pytest.mark.parametrize("size", [0, 1000, 4095, 12288])
def test_stack_size_must_be_power_of_two(size):
    program = load_program("shared_buffer.flexc")
    with pytest.raises(ValueError):
        instantiate(program, split_config(program, Mechanism.MPK_DSS), stack_size=size)


@pytest.mark.parametrize("path", FLEXC, ids=lambda p: p.stem)
def test_image_json_round_trip(path):
    program = parse_program(path.read_text())
    for image in (instantiate(program, split_config(program, Mechanism.EPT)), ungated_image(program)):
        data = json.loads(json.dumps(image_to_json(image)))
        assert image_from_json(data) == image
