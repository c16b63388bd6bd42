"""Run emitted stack layouts against an image and judge the outcome."""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field

from .errors import DecodeError, StepFault, UnsupportedInstr
from .payload import CALL_FUNCTION, MEM_WRITE, SET_REGS, SYSCALL
from .semantics import STATE_REGS, MachineState, step
from .x86 import MASK64, Mnemonic, decode_instruction

log = logging.getLogger(__name__)

HALT = "Halt"
FAULT = "Fault"
SYSCALL_EVENT = "SyscallEvent"
STEP_LIMIT = "StepLimit"
TERMINALS = (HALT, FAULT, SYSCALL_EVENT, STEP_LIMIT)


@dataclass(frozen=True)
class EmuConfig:
    step_limit: int = 10_000
    stack_base: int = 0x7FFF_FFFD_E000
    scratch_base: int = 0x0000_5EED_0000
    scratch_size: int = 0x1000
    seeds: tuple = tuple(range(1, 11))
    record_memory: bool = True

    @property
    def scratch_end(self):
        return self.scratch_base + self.scratch_size


@dataclass(frozen=True)
class Event:
    kind: str
    va: int | None = None
    addr: int | None = None
    width: int | None = None
    regs: tuple | None = None       # ((name, value), ...) for syscalls
    detail: str = ""

    def __str__(self):
        parts = [self.kind]
        if self.va is not None:
            parts.append(f"va={self.va:#x}")
        if self.addr is not None:
            parts.append(f"addr={self.addr:#x} width={self.width}")
        if self.regs is not None:
            parts.append(" ".join(f"{r}={v:#x}" for r, v in self.regs))
        if self.detail:
            parts.append(self.detail)
        return " ".join(parts)


@dataclass
class Trace:
    events: list = field(default_factory=list)

    @property
    def terminal(self):
        return self.events[-1] if self.events and self.events[-1].kind in TERMINALS else None

    def executed(self):
        return [e.va for e in self.events if e.kind == "InstrExec"]

    def syscall(self):
        return next((e for e in self.events if e.kind == SYSCALL_EVENT), None)

    def dump(self):
        return "".join(f"{e}\n" for e in self.events)


@dataclass
class EmuResult:
    trace: Trace
    state: MachineState
    seed: int

    @property
    def terminal(self):
        return self.trace.terminal

    def __iter__(self):
        return iter((self.trace, self.state))


class _Fault(Exception):
    def __init__(self, kind, detail=""):
        super().__init__(kind)
        self.kind, self.detail = kind, detail


class _EmuState(MachineState):
    """Machine state that refuses writes into read-only image memory."""

    protected = ()

    def write(self, addr, nbytes, value):
        addr &= MASK64
        for lo, hi in self.protected:
            if addr < hi and addr + nbytes > lo:
                raise _Fault("WriteProtected", f"write {nbytes} bytes at {addr:#x}")
        super().write(addr, nbytes, value)


class Emulator:
    """Executes layouts against one image; decode results are cached."""

    def __init__(self, image, cfg=None):
        self.cfg = cfg or EmuConfig()
        self.regions = sorted(image.regions, key=lambda r: r.base_va)
        self._starts = [r.base_va for r in self.regions]
        self._decoded = {}
        for r in self.regions:
            lo, hi = self.cfg.stack_base - 0x10000, self.cfg.stack_base + 0x10000
            if r.base_va < hi and r.end_va > lo:
                raise ValueError(f"stack at {self.cfg.stack_base:#x} overlaps image region "
                                 f"{r.base_va:#x}")
        self.protected = tuple((r.base_va, r.end_va) for r in self.regions if not r.writable)

    def region(self, va):
        i = bisect.bisect_right(self._starts, va) - 1
        if i >= 0 and self.regions[i].contains(va):
            return self.regions[i]
        return None

    def _backing(self, layout):
        base = self.cfg.stack_base
        end = base + len(layout)
        s_lo, s_hi = self.cfg.scratch_base, self.cfg.scratch_end

        def byte(addr):
            if base <= addr < end:
                return layout[addr - base]
            r = self.region(addr)
            if r is not None:
                return r.bytes[addr - r.base_va]
            if s_lo <= addr < s_hi:
                return 0
            return None
        return byte

    def fetch(self, va):
        insn = self._decoded.get(va)
        if insn is None:
            r = self.region(va)
            if r is None or not r.executable:
                raise _Fault("NonExecutable")
            try:
                insn = decode_instruction(r.bytes, va - r.base_va, va)
            except DecodeError as exc:
                raise _Fault("Undecodable", str(exc)) from None
            self._decoded[va] = insn
        return insn

    def run(self, layout, seed=0, halt=None):
        """Execute ``layout`` (a StackLayout or raw bytes) under one seed."""
        raw = bytes(getattr(layout, "bytes", layout))
        if len(raw) < 8:
            raise ValueError("layout must hold at least the first gadget address")
        if halt is None:
            halt = getattr(layout, "halt_addresses", ())
        halt = frozenset(halt)
        st = _EmuState(rng_seed=seed, backing=self._backing(raw))
        st.protected = self.protected
        for r in STATE_REGS:
            st.reg(r)
        st.set_reg("rip", int.from_bytes(raw[:8], "little"))
        st.set_reg("rsp", self.cfg.stack_base + 8)
        record = self.cfg.record_memory
        st.log = [] if record else None
        trace = Trace()
        ev = trace.events
        steps = 0
        while True:
            va = st.reg("rip")
            if va in halt:
                ev.append(Event(HALT, va))
                break
            if steps >= self.cfg.step_limit:
                ev.append(Event(STEP_LIMIT, va, detail=f"after {steps} steps"))
                break
            try:
                insn = self.fetch(va)
                ev.append(Event("InstrExec", va))
                step(insn, st)
            except _Fault as f:
                ev.append(Event(FAULT, va, detail=f.kind + (f": {f.detail}" if f.detail else "")))
                break
            except (UnsupportedInstr, StepFault) as exc:
                ev.append(Event(FAULT, va, detail=f"Unsupported: {exc}"))
                break
            steps += 1
            if record and st.log:
                ev.extend(Event(k, addr=a, width=n) for k, a, n in st.log)
                st.log.clear()
            if insn.mnemonic is Mnemonic.SYSCALL:
                snap = tuple((r, st.reg(r)) for r in STATE_REGS)
                ev.append(Event(SYSCALL_EVENT, va, regs=snap))
                break
        st.log = None
        return EmuResult(trace, st, seed)

    def run_all(self, layout, seeds=None, halt=None):
        return [self.run(layout, s, halt) for s in (seeds if seeds is not None else self.cfg.seeds)]


def run_chain(image, layout, cfg=None, seed=None, halt=None):
    """Execute ``layout`` against ``image``; returns ``(trace, final_state)``."""
    cfg = cfg or EmuConfig()
    res = Emulator(image, cfg).run(layout, cfg.seeds[0] if seed is None else seed, halt)
    return res.trace, res.state


# ---------------------------------------------------------------------------
# judging

@dataclass
class CheckResult:
    ok: bool
    diff: list = field(default_factory=list)

    def __bool__(self):
        return self.ok

    def report(self):
        return "pass" if self.ok else "fail:\n" + "\n".join(f"  {d}" for d in self.diff)


def _read(state, addr, n):
    return bytes(state.read_byte(addr + i) for i in range(n))


def check_payload(trace, state, payload, regs=None, writes=None):
    """Compare the outcome of a run with what ``payload`` asked for.

    ``regs``/``writes`` override the payload's register goals and memory
    writes (the compiler uses this to check partial chains)."""
    diff = []
    term = trace.terminal
    goals = payload.register_goals() if regs is None else regs
    writes = payload.writes if writes is None else writes
    values = state.snapshot()

    if payload.kind == SYSCALL:
        sc = trace.syscall()
        if sc is None or term is not sc:
            diff.append(f"expected a syscall, run ended with {term}")
            return CheckResult(False, diff)
        values = dict(sc.regs)
    elif payload.kind == CALL_FUNCTION:
        if term is None or term.kind != HALT or term.va != payload.target:
            diff.append(f"expected control at {payload.target:#x}, run ended with {term}")
            return CheckResult(False, diff)
    else:
        if term is None or term.kind != HALT:
            diff.append(f"expected a clean halt, run ended with {term}")
            return CheckResult(False, diff)

    for r, want in sorted(goals.items()):
        got = values[r]
        if got != want:
            diff.append(f"{r}: expected {want:#x}, got {got:#x}")
    for addr, data in writes:
        got = _read(state, addr, len(data))
        if got != data:
            diff.append(f"memory[{addr:#x}]: expected {data.hex()}, got {got.hex()}")
    if regs is None:
        for r, ptr in payload.pointer_args():
            got = _read(state, values[r], len(ptr.data))
            if got != ptr.data:
                diff.append(f"*{r}: expected {ptr.data!r}, got {got!r}")
    return CheckResult(not diff, diff)


def check_all(image, layout, payload, cfg=None):
    """Run under every configured seed; pass only if each run passes."""
    emu = Emulator(image, cfg)
    diffs = []
    for res in emu.run_all(layout):
        r = check_payload(res.trace, res.state, payload)
        if not r:
            diffs += [f"seed {res.seed}: {d}" for d in r.diff]
    return CheckResult(not diffs, diffs)


__all__ = ["EmuConfig", "Event", "Trace", "EmuResult", "Emulator", "run_chain", "CheckResult",
           "check_payload", "check_all", "SET_REGS", "MEM_WRITE"]
