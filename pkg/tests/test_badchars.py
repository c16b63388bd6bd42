import random

import pytest
from hypothesis import given, settings, strategies as st

from ropsmith.badchars import (BC, GC, PRINTABLE_ONLY, SI, Z, classify_value, is_clean,
                               parse_bad_bytes, solve_imm, split_value, synthesize_load)
from ropsmith.chaincomp import ChainCompiler, compile_payload, emit_stack
from ropsmith.chainemu import check_all
from ropsmith.classify import apply_op
from ropsmith.errors import CompileError, NoTransitionAvailable
from ropsmith.payload import PayloadSpec

from conftest import catalog_of

BASE = 0x4141414141414141          # every address byte is 0x41..0x7f

POP_RAX, POP_RBX = "58c3", "5bc3"
XOR_RAX = "4831c0c3"
INC_RAX = "48ffc0c3"
ADD, SUB, XOR, AND, OR = "4801d8c3", "4829d8c3", "4831d8c3", "4821d8c3", "4809d8c3"
MOV_EAX_1 = "b801000000c3"

FULL = [POP_RAX, POP_RBX, XOR_RAX, INC_RAX, ADD, SUB, XOR, AND, OR]


def cat(*hexes):
    return catalog_of(list(hexes), base=BASE)


def address_bytes(catalog):
    comp = ChainCompiler(catalog)
    out = set()
    for e in catalog.entries:
        out |= set(e.va.to_bytes(8, "little"))
    return out | set(comp.halt_va.to_bytes(8, "little"))


# -- classification -------------------------------------------------------------

@pytest.mark.parametrize("v, bad, state", [
    (0, set(), Z), (0, {0}, Z),
    (3, {0}, SI), (0xFFFFFFFFFFFFFFFF, {0xFF}, SI),      # -1 is small
    (0x411000, {0}, BC), (0x4141414141414141, {0}, GC),
    (0x41414141414141, {0}, BC), (0x41414141414141, set(), GC),
])
def test_classify_value(v, bad, state):
    assert classify_value(v, frozenset(bad)) == state


def test_classify_threshold():
    assert classify_value(64, {0}) == SI
    assert classify_value(65, {0}) == BC
    assert classify_value(65, {0}, si_threshold=100) == SI


def test_parse_bad_bytes():
    assert parse_bad_bytes("00,0a,0d") == {0x00, 0x0A, 0x0D}
    assert parse_bad_bytes("0x20, 0xff") == {0x20, 0xFF}
    assert parse_bad_bytes("") == frozenset()
    assert parse_bad_bytes("printable") == PRINTABLE_ONLY
    assert 0x41 not in PRINTABLE_ONLY and 0x00 in PRINTABLE_ONLY
    with pytest.raises(ValueError):
        parse_bad_bytes("100")


# -- operand search --------------------------------------------------------------

def carry_search(op, v, bad, width=64):
    """Byte-wise search over carries: does any clean pair exist?"""
    good = [b for b in range(256) if b not in bad]
    carries = {0}
    for i in range(width // 8):
        vi = (v >> 8 * i) & 0xFF
        nxt = set()
        for c in carries:
            for x in good:
                for y in good:
                    if op == "+" and (x + y + c) & 0xFF == vi:
                        nxt.add((x + y + c) >> 8)
                    elif op == "-" and (x - y - c) & 0xFF == vi:
                        nxt.add(1 if x - y - c < 0 else 0)
                    elif op == "^" and x ^ y == vi:
                        nxt.add(0)
        carries = nxt
        if not carries:
            return False
    return True


def test_split_example():
    bad = frozenset({0x00, 0x0A})
    assert carry_search("+", 0xA00, bad)
    b, c = split_value("+", 0xA00, bad)
    assert (b + c) & (2**64 - 1) == 0xA00
    assert is_clean(b, bad) and is_clean(c, bad)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**64 - 1), st.frozensets(st.integers(0, 255), min_size=1, max_size=8),
       st.sampled_from(["+", "-", "^"]))
def test_split_agrees_with_carry_search(v, bad, op):
    got = split_value(op, v, bad)
    if got is None:
        assert not carry_search(op, v, bad)
    else:
        b, c = got
        assert apply_op(op, b, c, 64) == v and is_clean(b, bad) and is_clean(c, bad)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1),
       st.frozensets(st.integers(0, 255), max_size=4), st.sampled_from(["+", "-", "^", "&", "|"]))
def test_solve_imm_is_correct_when_found(v, k, bad, op):
    b = solve_imm(op, k, v, bad)
    if b is not None:
        assert apply_op(op, b, k, 64) == v and is_clean(b, bad)


def test_split_needs_a_clean_byte():
    assert split_value("+", 5, frozenset(range(256))) is None


# -- transitions -------------------------------------------------------------------

def synth(catalog, v, bad):
    return synthesize_load(catalog, "rax", v, frozenset(bad))


def test_transition_pop():
    s = synth(cat(POP_RAX), 0x4142434445464748, {0})
    assert s.transitions == [2] and s.slot_values == [0x4142434445464748]


def test_transition_constant():
    s = synth(cat(MOV_EAX_1, POP_RAX), 1, {0})
    assert s.transitions == [1]


def test_transition_zeroing():
    s = synth(cat(POP_RAX, XOR_RAX), 0, {0})
    assert s.transitions == [3] and s.slot_values == []


def test_transition_increment():
    s = synth(cat(POP_RAX, XOR_RAX, INC_RAX), 3, {0})
    assert s.transitions == [3, 4]
    assert [l.ref.text for l in s.chain.links].count("inc rax ; ret") == 3


def test_transition_bitwise():
    s = synth(cat(POP_RAX, POP_RBX, AND), 0x411000, {0})
    assert 5 in s.transitions
    assert all(is_clean(x, {0}) for x in s.slot_values)


def test_transition_arith():
    s = synth(cat(POP_RAX, POP_RBX, ADD), 0x411000, {0})
    assert s.transitions == [2, 6]
    a, b = s.slot_values
    assert (a + b) & (2**64 - 1) == 0x411000


def test_no_transition():
    with pytest.raises(NoTransitionAvailable):
        synth(cat(POP_RAX), 0x411000, {0})


def test_small_value_falls_back_to_split():
    s = synth(cat(POP_RAX, POP_RBX, SUB), 3, {0})
    assert 6 in s.transitions


# -- end to end ----------------------------------------------------------------------

def test_random_values_and_restrictions():
    """1,000 random (value, restricted set) pairs: every synthesized chain
    emits no restricted byte and leaves the value in rax under emulation."""
    catalog = cat(*FULL)
    forbidden = address_bytes(catalog)
    pool = [b for b in range(256) if b not in forbidden]
    rng = random.Random(2024)
    image = ChainCompiler(catalog).image
    built = 0
    for i in range(1000):
        bad = frozenset(rng.sample(pool, rng.randint(1, 4)) + ([0] if i % 2 else []))
        kind = rng.random()
        if kind < 0.1:
            v = rng.randint(-64, 64) & (2**64 - 1)
        elif kind < 0.5:
            v = rng.choice(sorted(bad)) << 8 * rng.randrange(8) | rng.getrandbits(24)
        else:
            v = rng.getrandbits(64)
        p = PayloadSpec.set_regs({"rax": v}, bad_bytes=bad)
        try:
            chain = compile_payload(catalog, p)
        except CompileError:
            continue
        lay = emit_stack(chain)
        assert not set(lay.bytes) & bad, (hex(v), sorted(bad))
        assert check_all(image, lay, p).ok, (hex(v), sorted(bad))
        built += 1
    assert built >= 950
