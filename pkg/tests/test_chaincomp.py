import random

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from ropsmith.catalog import analyze, build_catalog
from ropsmith.chaincomp import (Chain, ChainCompiler, GadgetRef, Link, compile_payload,
                                controlled_registers, decode_layout, emit_stack, find_move_path,
                                shortest_setreg_chains)
from ropsmith.chainemu import EmuConfig, Emulator, check_all
from ropsmith.errors import BadcharUnavoidable, MissingGadget, NoPath, NonComposable, Unsatisfiable
from ropsmith.payload import PayloadSpec

from conftest import DATA_BASE, EXECVE_GADGETS, catalog_of, gadgets_at, image_of
from setreg_oracle import chain_controls, exhaustive

# register-only gadgets for random catalogs
MENU = ["58c3", "5bc3", "59c3", "5ac3", "5fc3", "5ec3", "5f5ec3", "585fc3", "5a595bc3", "58c20800",
        "4889c7c3", "4889d6c3", "4889c2c3", "4893c3", "4801d8c3", "31c0c3", "48ffc0c3",
        "4801d85ac3", "5f31c0c3", "4889c35fc3", "505b59c3", "5858c3", "594889cac3"]

# eleven mov r32, r32 edges, two of them repeated
MOV_EDGES = [("edi", "edx"), ("esi", "eax"), ("ebp", "edx"), ("ecx", "ebx"), ("esi", "ebp"),
              ("eax", "edi"), ("ebx", "ecx"), ("edi", "edx"), ("edx", "ebx"), ("ebx", "eax"),
              ("esi", "eax")]
_R32 = ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi"]


def mov32(src, dst):
    return bytes([0x89, 0xC0 | _R32.index(src) << 3 | _R32.index(dst), 0xC3]).hex()


def refs(cat):
    return ChainCompiler(cat).refs


def by_text(cat):
    return {r.text: r for r in refs(cat)}


# -- controlled registers -------------------------------------------------------

def test_controlled_single_pop():
    r = by_text(catalog_of(["58c3"]))
    assert controlled_registers([r["pop rax ; ret"]]) == {"rax"}


def test_controlled_two_pops():
    r = by_text(catalog_of(["58c3", "5fc3"]))
    assert controlled_registers([r["pop rax ; ret"], r["pop rdi ; ret"]]) == {"rax", "rdi"}


def test_zeroing_removes_control():
    r = by_text(catalog_of(["58c3", "4831c0c3"]))
    assert controlled_registers([r["pop rax ; ret"], r["xor rax, rax ; ret"]]) == frozenset()
    assert chain_controls([r["pop rax ; ret"].gadget, r["xor rax, rax ; ret"].gadget]) == frozenset()


def test_shared_slot_is_not_controlled():
    r = by_text(catalog_of(["58c3", "4889c7c3"]))
    assert controlled_registers([r["pop rax ; ret"], r["mov rdi, rax ; ret"]]) == frozenset()


def test_register_sourced_next_is_not_composable():
    cat = catalog_of(["5b50c3"], include_unverified=True)
    (e,) = cat.entries
    with pytest.raises(NonComposable):
        controlled_registers([GadgetRef([e])])


# -- shortest register-setting chains ---------------------------------------------

def test_double_pop_is_preferred():
    cat = catalog_of(["58c3", "5fc3", "585fc3"])
    chains = shortest_setreg_chains(cat, {"rax", "rdi"})
    best = min((ch for cs, ch in chains.items() if {"rax", "rdi"} <= cs), key=len)
    assert [r.text for r in best.gadgets] == ["pop rax ; pop rdi ; ret"]
    # confirmed against every chain of length <= 2
    gs = [r.gadget for r in refs(cat)]
    assert exhaustive(gs, 2)[frozenset({"rax", "rdi"})] == 1


def test_missing_writer_is_unsatisfiable():
    with pytest.raises(Unsatisfiable):
        shortest_setreg_chains(catalog_of(["58c3", "5fc3"]), {"rdx"})


def test_clobber_order():
    # the only rdi loader zeroes eax, so rax has to be loaded after it
    cat = catalog_of(["5f31c0c3", "58c3"])
    chains = shortest_setreg_chains(cat, {"rax", "rdi"})
    ch = next(ch for cs, ch in chains.items() if {"rax", "rdi"} <= cs)
    assert [r.text for r in ch.gadgets] == ["pop rdi ; xor eax, eax ; ret", "pop rax ; ret"]
    gs = [r.gadget for r in ch.gadgets]
    assert chain_controls(gs) >= {"rax", "rdi"}
    assert not chain_controls(gs[::-1]) >= {"rax", "rdi"}


def _random_catalog(rng):
    while True:
        cat = catalog_of(rng.sample(MENU, rng.randint(2, 6)))
        if len(cat.entries) <= 8:
            return cat


def test_search_matches_exhaustive_enumeration():
    rng = random.Random(5)
    for _ in range(50):
        cat = _random_catalog(rng)
        got = shortest_setreg_chains(cat, max_len=4)
        want = exhaustive([r.gadget for r in refs(cat)], 4)
        assert {cs: len(ch) for cs, ch in got.items()} == want
        for cs, ch in got.items():
            assert chain_controls([r.gadget for r in ch.gadgets]) == cs


# -- MOV graph ----------------------------------------------------------------------

def _floyd(edges, nodes):
    inf = float("inf")
    d = {(a, b): 0 if a == b else inf for a in nodes for b in nodes}
    for a, b in edges:
        d[a, b] = 1
    for k in nodes:
        for i in nodes:
            for j in nodes:
                if d[i, k] + d[k, j] < d[i, j]:
                    d[i, j] = d[i, k] + d[k, j]
    return d


def test_mov_graph_path():
    cat = catalog_of([mov32(s, d) for s, d in MOV_EDGES])
    ch = find_move_path(cat, "rsi", "rbx")
    hops = [(r.claims("MoveRegG")[0]["src"], r.claims("MoveRegG")[0]["dst"]) for r in ch.gadgets]
    assert hops == [("rsi", "rbp"), ("rbp", "rdx"), ("rdx", "rbx")]
    nodes = sorted({x for e in MOV_EDGES for x in e})
    assert _floyd(MOV_EDGES, nodes)["esi", "ebx"] == len(hops) == 3


def test_move_path_trivial_and_missing():
    cat = catalog_of([mov32(s, d) for s, d in MOV_EDGES])
    assert len(find_move_path(cat, "rax", "rax")) == 0
    with pytest.raises(NoPath):
        find_move_path(cat, "rax", "rsi")       # nothing moves into esi


def test_move_paths_are_shortest_everywhere():
    cat = catalog_of([mov32(s, d) for s, d in MOV_EDGES])
    nodes = sorted({x for e in MOV_EDGES for x in e})
    d = _floyd(MOV_EDGES, nodes)
    full = {n: "r" + n[1:] for n in nodes}
    for a in nodes:
        for b in nodes:
            if d[a, b] == float("inf"):
                with pytest.raises(NoPath):
                    find_move_path(cat, full[a], full[b], max_len=8)
            else:
                assert len(find_move_path(cat, full[a], full[b], max_len=8)) == d[a, b]


# -- layouts ------------------------------------------------------------------------

STORE_CODE = ["58c3", "5ac3", "488902c3"]          # pop rax; pop rdx; mov [rdx], rax


def test_store_chain_frame_order():
    cat = catalog_of(STORE_CODE, gap=13)
    va = [g.va for g in gadgets_at(STORE_CODE, gap=13)]
    value, addr = 0x1122334455667788, DATA_BASE + 0x40
    p = PayloadSpec.mem_write(addr, value.to_bytes(8, "little"))
    chain = compile_payload(cat, p)
    lay = emit_stack(chain)
    assert [(w.role, w.value) for w in lay.words] == [
        ("gadget", va[0]), ("operand", value), ("gadget", va[1]), ("operand", addr),
        ("gadget", va[2]), ("halt", chain.halt_va)]
    assert len(lay.bytes) % 8 == 0
    assert decode_layout(lay, chain) == [l.binding_map for l in chain.links]


def test_ret_imm_padding():
    cat = catalog_of(["58c20800", "5fc3"])
    p = PayloadSpec.set_regs({"rax": 0x1111, "rdi": 0x2222})
    comp = ChainCompiler(cat)
    chain = comp.compile(p)
    lay = emit_stack(chain)
    # the frame of "pop rax; ret 8" is value, next gadget, 8 bytes of padding
    j = [l.ref.text for l in chain.links].index("pop rax ; ret 8")
    head = 1 + sum(l.ref.frame_size // 8 for l in chain.links[:j])
    roles = [w.role for w in lay.words]
    assert roles[head:head + 3] == ["operand", "gadget" if j + 1 < len(chain) else "halt",
                                    "padding"]
    assert lay.words[head + 2].value == comp.filler_word
    assert check_all(comp.image, lay, p).ok


def test_bad_gadget_address_is_unavoidable():
    gs = gadgets_at(["58c3"], base=0x4141410A41414100)
    cat = build_catalog(analyze(gs))
    p = PayloadSpec.set_regs({"rax": 0x4242424242424242}, bad_bytes={0x0A})
    with pytest.raises(BadcharUnavoidable):
        compile_payload(cat, p)


def test_emit_reports_offset_of_bad_word():
    cat = catalog_of(["58c3", "5fc3"], base=0x4141414141414100)
    comp = ChainCompiler(cat, {0x00})
    ref = comp.refs[0]
    chain = Chain([Link(ref, ((0, 0x4100000000000041),))], 0x4242424242424242, frozenset({0x00}))
    with pytest.raises(BadcharUnavoidable) as ei:
        emit_stack(chain)
    assert ei.value.offset == 8


def test_missing_syscall_gadget():
    cat = catalog_of(["58c3", "5fc3", "5ec3", "5ac3"])
    with pytest.raises(MissingGadget) as ei:
        compile_payload(cat, PayloadSpec.syscall(60, (0,)))
    assert ei.value.gtype == "SyscallG"


def test_missing_loader():
    cat = catalog_of(["4801d8c3"])
    with pytest.raises(MissingGadget):
        compile_payload(cat, PayloadSpec.set_regs({"rax": 7}))


# -- end to end -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def execve_setup():
    code = b"".join(bytes.fromhex(h) for h in EXECVE_GADGETS)
    img = image_of(code)
    cat = build_catalog(analyze(gadgets_at(EXECVE_GADGETS)))
    return img, cat


def test_execve_chain(execve_setup):
    img, cat = execve_setup
    p = PayloadSpec.execve(DATA_BASE + 0x100)
    chain = compile_payload(cat, p, image=img)
    lay = emit_stack(chain)
    assert chain.gadgets[-1].text == "syscall"
    assert check_all(img, lay, p, EmuConfig()).ok
    res = Emulator(img).run(lay, seed=3)
    sc = dict(res.trace.syscall().regs)
    assert sc["rax"] == 59 and sc["rsi"] == 0 and sc["rdx"] == 0
    assert bytes(res.state.read_byte(sc["rdi"] + i) for i in range(8)) == b"/bin/sh\0"


def test_call_function(execve_setup):
    img, cat = execve_setup
    target = 0x401234
    p = PayloadSpec.call_function(target, (1, 2, 3))
    chain = compile_payload(cat, p, image=img)
    assert check_all(img, emit_stack(chain), p).ok


_VALUE = st.integers(0, 2**64 - 1)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.dictionaries(st.sampled_from(["rax", "rbx", "rdx", "rsi", "rdi"]), _VALUE, min_size=1))
def test_soundness_set_regs(execve_setup, regs):
    img, cat = execve_setup
    p = PayloadSpec.set_regs(regs)
    lay = emit_stack(compile_payload(cat, p, image=img))
    # all ten seeds draw different initial registers, so a clobbered
    # goal register cannot pass by accident
    assert check_all(img, lay, p).ok


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.binary(min_size=1, max_size=24), st.integers(0, 0x100))
def test_soundness_mem_write(execve_setup, data, off):
    img, cat = execve_setup
    p = PayloadSpec.mem_write(DATA_BASE + off, data)
    lay = emit_stack(compile_payload(cat, p, image=img))
    assert check_all(img, lay, p).ok
