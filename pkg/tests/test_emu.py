import random
import re

import pytest

from ropsmith.chainemu import (FAULT, HALT, STEP_LIMIT, EmuConfig, Emulator, check_all,
                               check_payload, run_chain)
from ropsmith.chaincomp import StackLayout
from ropsmith.payload import PayloadSpec
from ropsmith.scan import scan_bytes
from ropsmith.semantics import STATE_REGS, MachineState, draw_reg, interpret
from ropsmith.x86 import StopKind

from conftest import DATA_BASE, GADGET_RICH, TEXT_BASE, image_of

STORE_CODE = bytes.fromhex("58c3" "5ac3" "488902c3" "ffe0")   # pop rax; pop rdx; mov [rdx],rax; jmp rax
POP_RAX, POP_RDX, STORE, LOOP = (TEXT_BASE + o for o in (0, 2, 4, 8))
HALT_VA = TEXT_BASE + 0x800


def words(*vals):
    return b"".join(v.to_bytes(8, "little") for v in vals)


@pytest.fixture(scope="module")
def store_emu():
    return Emulator(image_of(STORE_CODE))


def test_store_chain_write(store_emu):
    value, addr = 0xDEADBEEFCAFEF00D, DATA_BASE + 0x20
    lay = words(POP_RAX, value, POP_RDX, addr, STORE, HALT_VA)
    for res in store_emu.run_all(lay, halt={HALT_VA}):
        assert res.terminal.kind == HALT and res.terminal.va == HALT_VA
        got = bytes(res.state.read_byte(addr + i) for i in range(8))
        assert int.from_bytes(got, "little") == value
        assert res.trace.executed() == [POP_RAX, POP_RAX + 1, POP_RDX, POP_RDX + 1, STORE,
                                        STORE + 3]
        writes = [e for e in res.trace.events if e.kind == "MemWrite"]
        assert [(e.addr, e.width) for e in writes] == [(addr, 8)]


def test_initial_stack_pointer(store_emu):
    cfg = store_emu.cfg
    lay = words(POP_RAX, 7, HALT_VA)
    trace, st = run_chain(image_of(STORE_CODE), lay, halt={HALT_VA})
    assert st.reg("rsp") == cfg.stack_base + len(lay)
    assert st.reg("rax") == 7


def test_non_executable_target(store_emu):
    res = store_emu.run(words(DATA_BASE), halt={HALT_VA})
    assert res.terminal.kind == FAULT and "NonExecutable" in res.terminal.detail
    res = store_emu.run(words(0x1234), halt={HALT_VA})
    assert res.terminal.kind == FAULT and "NonExecutable" in res.terminal.detail


def test_write_to_text_faults(store_emu):
    res = store_emu.run(words(POP_RAX, 1, POP_RDX, TEXT_BASE, STORE, HALT_VA), halt={HALT_VA})
    assert res.terminal.kind == FAULT and "WriteProtected" in res.terminal.detail


def test_step_limit():
    emu = Emulator(image_of(STORE_CODE), EmuConfig(step_limit=50))
    res = emu.run(words(POP_RAX, LOOP, LOOP), halt={HALT_VA})      # jmp rax to itself
    assert res.terminal.kind == STEP_LIMIT
    assert len(res.trace.executed()) == 50
    assert set(res.trace.executed()[2:]) == {LOOP}


def test_short_layout_rejected(store_emu):
    with pytest.raises(ValueError):
        store_emu.run(b"\x00" * 4)


def test_deterministic(store_emu):
    lay = words(POP_RAX, 5, POP_RDX, DATA_BASE, STORE, HALT_VA)
    a, b = store_emu.run(lay, seed=4, halt={HALT_VA}), store_emu.run(lay, seed=4, halt={HALT_VA})
    assert a.trace.dump() == b.trace.dump()
    assert a.state.snapshot() == b.state.snapshot()


def test_seeds_draw_distinct_registers(store_emu):
    lay = words(HALT_VA)
    rbx = {r.state.reg("rbx") for r in store_emu.run_all(lay, halt={HALT_VA})}
    assert len(rbx) == len(store_emu.cfg.seeds)


def test_trace_dump_format(store_emu):
    res = store_emu.run(words(POP_RAX, 1, POP_RDX, DATA_BASE, STORE, HALT_VA), halt={HALT_VA})
    lines = res.trace.dump().splitlines()
    pat = re.compile(r"^(InstrExec va=0x[0-9a-f]+|MemRead addr=0x[0-9a-f]+ width=\d+"
                     r"|MemWrite addr=0x[0-9a-f]+ width=\d+|Halt va=0x[0-9a-f]+)$")
    assert all(pat.match(l) for l in lines), lines
    assert lines[-1] == f"Halt va={HALT_VA:#x}"


def test_syscall_event():
    img = image_of(bytes.fromhex("58c30f05"))
    res = Emulator(img).run(words(TEXT_BASE, 59, TEXT_BASE + 2))
    sc = res.trace.syscall()
    assert res.terminal is sc and dict(sc.regs)["rax"] == 59


# -- judging --------------------------------------------------------------------

def test_check_payload_names_the_register(store_emu):
    p = PayloadSpec.set_regs({"rax": 6})
    res = store_emu.run(words(POP_RAX, 5, HALT_VA), halt={HALT_VA})
    r = check_payload(res.trace, res.state, p)
    assert not r and any(d.startswith("rax:") for d in r.diff)
    assert check_payload(res.trace, res.state, PayloadSpec.set_regs({"rax": 5}))


def test_check_payload_memory_diff(store_emu):
    addr = DATA_BASE + 8
    p = PayloadSpec.mem_write(addr, b"ABCDEFGH")
    res = store_emu.run(words(POP_RAX, 1, POP_RDX, addr, STORE, HALT_VA), halt={HALT_VA})
    r = check_payload(res.trace, res.state, p)
    assert not r and any(d.startswith(f"memory[{addr:#x}]") for d in r.diff)


def test_one_failing_seed_fails_the_check():
    img = image_of(STORE_CODE)
    p = PayloadSpec.set_regs({"rbx": draw_reg(1, "rbx")})      # only seed 1 matches
    layout = StackLayout(words(HALT_VA), [], {}, HALT_VA, None)
    r = check_all(img, layout, p)
    assert not r
    assert not any(d.startswith("seed 1:") for d in r.diff)
    assert len(r.diff) == len(EmuConfig().seeds) - 1


# -- agreement with the reference interpreter ------------------------------------

def test_agrees_with_interpreter():
    rng = random.Random(17)
    base = 0x400000
    code = bytes(rng.choice(GADGET_RICH) if rng.random() < 0.7 else rng.randrange(256)
                 for _ in range(3000))
    img = image_of(code, text=base)
    emu = Emulator(img)
    halt = base + 0x4000
    compared = 0
    for g in scan_bytes(code, base):
        if g.terminator is not StopKind.RET_NEAR:
            continue
        lay = words(g.va) + words(*[halt] * 40)
        stack = emu.cfg.stack_base

        def backing(addr, lay=lay):
            if stack <= addr < stack + len(lay):
                return lay[addr - stack]
            if base <= addr < base + len(code):
                return code[addr - base]
            if emu.cfg.scratch_base <= addr < emu.cfg.scratch_end:
                return 0
            return None

        for seed in (1, 2):
            res = emu.run(lay, seed=seed, halt={halt})
            if res.terminal.kind != HALT or res.trace.executed() != [i.va for i in g.instrs]:
                continue
            st0 = MachineState(rng_seed=seed, backing=backing)
            for r in STATE_REGS:
                st0.reg(r)
            st0.set_reg("rip", g.va)
            st0.set_reg("rsp", stack + 8)
            st1 = interpret(g.instrs, st0)
            assert st1.snapshot() == res.state.snapshot(), g
            compared += 1
    assert compared >= 100
