"""Gadget frames and semantic-type claims found by concrete interpretation.

Candidates are collected from the first random run by scanning for
final/initial value relations, then kept only if they hold in every other
run (a second random seed and the all-zero / all-ones boundary states).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

from .errors import NonConstantStackOffset
from .semantics import GPRS, MachineState, interpret
from .x86 import MASK64, StopKind

log = logging.getLogger(__name__)

UNCHECKED, VERIFIED, REFUTED = "Unchecked", "Verified", "Refuted"

# registers a claim may name as data sources or destinations
DATA_REGS = tuple(r for r in GPRS if r != "rsp")
SYSCALL_ARGS = ("rax", "rdi", "rsi", "rdx", "r10", "r8", "r9")
DEFAULT_SEEDS = (0x5EED0001, 0x5EED0002)

ARITH_OPS = ("+", "-", "&", "|", "^")
SHIFT_OPS = ("<<", ">>", ">>a")
COMMUTATIVE = frozenset({"+", "&", "|", "^"})
MAX_DISP = 0x10000
_STACK_WINDOW = 0x1000      # writes this close to the initial rsp are stack traffic


def apply_op(op, a, b, w=64):
    m = (1 << w) - 1
    a &= m
    b &= m
    if op == "+":
        return (a + b) & m
    if op == "-":
        return (a - b) & m
    if op == "&":
        return a & b
    if op == "|":
        return a | b
    if op == "^":
        return a ^ b
    k = b & (w - 1)
    if op == "<<":
        return (a << k) & m
    if op == ">>":
        return a >> k
    if op == ">>a":
        sa = a - (1 << w) if a >> (w - 1) else a
        return (sa >> k) & m
    raise ValueError(op)


def _signed(v):
    v &= MASK64
    return v - (1 << 64) if v >> 63 else v


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GadgetFrame:
    """Stack geometry of a gadget.

    ``next_kind`` is ``"stack"`` (next address at ``next_addr_offset``),
    ``"reg"`` (``next_reg``), ``"mem"``, ``"trap"`` (syscall) or
    ``"unknown"``; ``frame_size`` is None when the stack delta varies.
    """

    frame_size: int | None
    next_kind: str = "stack"
    next_addr_offset: int | None = None
    next_reg: str | None = None
    value_slots: tuple = ()

    @property
    def constant(self):
        return self.frame_size is not None

    @property
    def chainable(self):
        return self.constant and self.next_kind == "stack"

    def describe(self):
        if not self.constant:
            return "non-constant stack offset"
        nxt = {"stack": f"next at +{self.next_addr_offset}", "reg": f"next from {self.next_reg}",
               "mem": "next from memory", "trap": "trap", "unknown": "next unknown"}[self.next_kind]
        return f"frame {self.frame_size}, {nxt}"

    def to_json(self):
        return {"frame_size": self.frame_size, "next_kind": self.next_kind,
                "next_addr_offset": self.next_addr_offset, "next_reg": self.next_reg,
                "value_slots": [list(s) for s in self.value_slots]}

    @classmethod
    def from_json(cls, d):
        return cls(d["frame_size"], d["next_kind"], d["next_addr_offset"], d["next_reg"],
                   tuple(tuple(s) for s in d["value_slots"]))


@dataclass(frozen=True)
class TypedClaim:
    gtype: str
    params: tuple = ()              # ((name, value), ...) in declaration order
    clobbers: frozenset = frozenset()
    frame: GadgetFrame | None = None
    verified: str = UNCHECKED
    side_writes: bool = False       # writes memory beyond what the claim names
    derefs: bool = False            # touches non-stack memory at all

    def __getitem__(self, key):
        for k, v in self.params:
            if k == key:
                return v
        raise KeyError(key)

    def get(self, key, default=None):
        try:
            return self[key]
        except KeyError:
            return default

    @property
    def param_dict(self):
        return dict(self.params)

    @property
    def outputs(self):
        if self.gtype == "StackPivotG":
            return frozenset({"rsp"})
        dst = self.get("dst")
        return frozenset({dst}) if dst else frozenset()

    @property
    def width(self):
        return self.get("width", 64)

    def with_verification(self, state):
        return replace(self, verified=state)

    def key(self):
        return (self.gtype, self.params)

    def describe(self):
        p = self.param_dict
        w = "" if p.get("width", 64) == 64 else "32"
        g = self.gtype

        def mem(addr, disp):
            return f"M{w or 64}[{addr}{disp:+#x}]" if disp else f"M{w or 64}[{addr}]"

        if g == "LoadConstG":
            return f"{p['dst']} <- [rsp+{p['offset']:#x}]"
        if g == "SetConstG":
            return f"{p['dst']} <- {p['value']:#x}"
        if g == "MoveRegG":
            return f"{p['dst']} <-{w} {p['src']}"
        if g == "ArithmeticG":
            s2 = p["src2"] if isinstance(p["src2"], str) else hex(p["src2"])
            return f"{p['dst']} <-{w} {p['src1']} {p['op']} {s2}"
        if g == "LoadMemG":
            return f"{p['dst']} <- {mem(p['addr'], p['disp'])}"
        if g == "StoreMemG":
            src = p["src"] if isinstance(p["src"], str) else hex(p["src"])
            return f"{mem(p['addr'], p['disp'])} <- {src}"
        if g == "ArithmeticLoadG":
            return f"{p['dst']} <-{w} {p['dst']} {p['op']} {mem(p['addr'], p['disp'])}"
        if g == "ArithmeticStoreG":
            return f"{mem(p['addr'], p['disp'])} <- {mem(p['addr'], p['disp'])} {p['op']} {p['src']}"
        if g == "StackPivotG":
            return f"rsp <- {p['src']}{p['disp']:+#x}"
        return g

    def __str__(self):
        return f"{self.gtype}({self.describe()})"


# ---------------------------------------------------------------------------
# frame analysis

_TAG_BASE = (0x7A91_0000_0000_0000, 0x6C35_0000_0000_0000)
_TAG_SPAN = range(-32, 160)


def _tag(run, off):
    return _TAG_BASE[run] | ((off & 0xFFFF) << 16) | 0xBEEF


def _tagged_state(run, seed):
    st = MachineState.random(seed)
    rsp0 = st.reg("rsp") & ~0xF
    st.set_reg("rsp", rsp0)
    words = {rsp0 + 8 * i: _tag(run, 8 * i) for i in _TAG_SPAN}

    def backing(addr):
        w = words.get(addr & ~7)
        return None if w is None else (w >> (8 * (addr & 7))) & 0xFF

    st = MachineState(dict(st.regs), dict(st.flags), {}, seed, backing=backing)
    return st


def analyze_frame(g):
    """Stack geometry of ``g`` from two runs over differently tagged stacks."""
    runs = []
    for i in (0, 1):
        s0 = _tagged_state(i, 0xF0A3 + i)
        runs.append((s0, interpret(g.instrs, s0)))
    deltas = {_signed(s1.reg("rsp") - s0.reg("rsp")) for s0, s1 in runs}
    if len(deltas) != 1:
        raise NonConstantStackOffset(f"{g.va:#x}: stack delta differs between runs {sorted(deltas)}")
    size = deltas.pop()

    def tag_offset(pick):
        offs = []
        for i, (s0, s1) in enumerate(runs):
            v = pick(s1)
            off = next((o * 8 for o in _TAG_SPAN if _tag(i, o * 8) == v), None)
            offs.append(off)
        return offs[0] if offs[0] is not None and offs[0] == offs[1] else None

    slots = []
    for r in DATA_REGS:
        off = tag_offset(lambda s1: s1.reg(r))
        if off is not None and 0 <= off <= size - 8:
            slots.append((r, off))
    slots.sort(key=lambda s: (s[1], s[0]))

    if g.terminator is StopKind.SYSCALL:
        return GadgetFrame(size, "trap", value_slots=tuple(slots))
    nxt = tag_offset(lambda s1: s1.reg("rip"))
    if nxt is not None and 0 <= nxt <= size - 8:
        return GadgetFrame(size, "stack", nxt, value_slots=tuple(slots))
    for r in GPRS:
        if all(s1.reg("rip") == s0.reg(r) for s0, s1 in runs):
            return GadgetFrame(size, "reg", next_reg=r, value_slots=tuple(slots))
    if g.terminator in (StopKind.JMP_MEM, StopKind.CALL_MEM):
        return GadgetFrame(size, "mem", value_slots=tuple(slots))
    return GadgetFrame(size, "unknown", value_slots=tuple(slots))


# ---------------------------------------------------------------------------
# claim relations over one concrete run

def _peek(st, addr, n):
    return int.from_bytes(bytes(st.read_byte(addr + i) for i in range(n)), "little")


def claim_holds(claim, s0, s1):
    """Whether ``claim``'s defining relation holds between initial state
    ``s0`` and final state ``s1``."""
    p = claim.param_dict
    g = claim.gtype
    w = p.get("width", 64)
    m = (1 << w) - 1
    rsp0 = s0.reg("rsp")

    def val(src):
        return s0.reg(src) & m if isinstance(src, str) else src & m

    def addr():
        return (s0.reg(p["addr"]) + p["disp"]) & MASK64

    if g == "LoadConstG":
        return s1.reg(p["dst"]) == s0.initial_read(rsp0 + p["offset"], 8)
    if g == "SetConstG":
        return s1.reg(p["dst"]) == p["value"]
    if g == "MoveRegG":
        return s1.reg(p["dst"]) == val(p["src"])
    if g == "ArithmeticG":
        return s1.reg(p["dst"]) == apply_op(p["op"], val(p["src1"]), val(p["src2"]), w)
    if g == "LoadMemG":
        return s1.reg(p["dst"]) == s0.initial_read(addr(), w // 8)
    if g == "ArithmeticLoadG":
        return s1.reg(p["dst"]) == apply_op(p["op"], val(p["dst"]), s0.initial_read(addr(), w // 8), w)
    if g == "StoreMemG":
        return _peek(s1, addr(), w // 8) == val(p["src"])
    if g == "ArithmeticStoreG":
        return _peek(s1, addr(), w // 8) == apply_op(p["op"], s0.initial_read(addr(), w // 8),
                                                      val(p["src"]), w)
    if g == "SyscallG":
        return all(s1.reg(r) == s0.reg(r) for r in SYSCALL_ARGS)
    if g == "StackPivotG":
        return s1.reg("rsp") == (s0.reg(p["src"]) + p["disp"]) & MASK64
    if g == "NoOpG":
        return all(s1.reg(r) == s0.reg(r) for r in DATA_REGS)
    raise ValueError(f"unknown gadget type {g}")


# ---------------------------------------------------------------------------
# candidate generation

def _imm_candidates(g):
    out = {1, MASK64}       # inc / dec carry no immediate
    for insn in g.instrs:
        if insn.is_control_transfer:
            continue
        for op in insn.operands:
            if op.kind == "imm":
                out.add(op.imm & MASK64)
                out.add(-op.imm & MASK64)
            elif op.kind == "mem" and op.disp:
                out.add(op.disp & MASK64)
    return sorted(out)


def _claim(gtype, **params):
    return TypedClaim(gtype, tuple(params.items()))


def _reg_candidates(g, s0, s1, frame):
    imms = _imm_candidates(g)
    out = []
    init = {r: s0.reg(r) for r in DATA_REGS}
    slot_offs = []
    if frame.constant and frame.frame_size > 0:
        skip = frame.next_addr_offset if frame.next_kind == "stack" else None
        slot_offs = [k for k in range(0, frame.frame_size - 7, 8) if k != skip]
    for dst in DATA_REGS:
        t = s1.reg(dst)
        if t == init[dst]:
            continue
        out.append(_claim("SetConstG", dst=dst, value=t))
        for k in slot_offs:
            if s0.initial_read(s0.reg("rsp") + k, 8) == t:
                out.append(_claim("LoadConstG", dst=dst, offset=k))
        for w in (64, 32):
            if w == 32 and t >> 32:
                continue
            m = (1 << w) - 1
            for src in DATA_REGS:
                if src != dst and init[src] & m == t:
                    out.append(_claim("MoveRegG", dst=dst, src=src, width=w))
            for op in ARITH_OPS:
                for i, a in enumerate(DATA_REGS):
                    for b in DATA_REGS[i + 1 if op in COMMUTATIVE else 0:]:
                        if a == b:
                            continue
                        if apply_op(op, init[a], init[b], w) == t:
                            s1_, s2_ = (a, b)
                            if op in COMMUTATIVE and b == dst:
                                s1_, s2_ = b, a
                            out.append(_claim("ArithmeticG", dst=dst, src1=s1_, op=op,
                                              src2=s2_, width=w))
            for op in ARITH_OPS + SHIFT_OPS:
                for imm in imms:
                    if op in SHIFT_OPS and not 0 < imm < w:
                        continue
                    if op == "-" or (op == "&" and imm & m == m):
                        continue        # x - k is claimed as x + (-k)
                    for a in DATA_REGS:
                        if apply_op(op, init[a], imm, w) == t:
                            out.append(_claim("ArithmeticG", dst=dst, src1=a, op=op,
                                              src2=imm & m, width=w))
    return out


def _bases(s0, addr):
    for r in DATA_REGS:
        d = _signed(addr - s0.reg(r))
        if abs(d) < MAX_DISP:
            yield r, d


def _is_stack(s0, addr):
    return abs(_signed(addr - s0.reg("rsp"))) < _STACK_WINDOW


def _mem_candidates(g, s0, s1, events):
    out = []
    imms = [0] + _imm_candidates(g)
    for kind, addr, n in events:
        if n not in (4, 8) or _is_stack(s0, addr):
            continue
        w = 8 * n
        m = (1 << w) - 1
        for base, disp in _bases(s0, addr):
            if kind == "MemRead":
                loaded = s0.initial_read(addr, n)
                for dst in DATA_REGS:
                    t = s1.reg(dst)
                    if t == s0.reg(dst):
                        continue
                    if t == loaded:
                        out.append(_claim("LoadMemG", dst=dst, addr=base, disp=disp, width=w))
                    for op in ARITH_OPS:
                        if apply_op(op, s0.reg(dst), loaded, w) == t:
                            out.append(_claim("ArithmeticLoadG", dst=dst, op=op, addr=base,
                                              disp=disp, width=w))
            else:
                final = _peek(s1, addr, n)
                old = s0.initial_read(addr, n)
                for src in DATA_REGS:
                    if s0.reg(src) & m == final:
                        out.append(_claim("StoreMemG", addr=base, disp=disp, src=src, width=w))
                    for op in ARITH_OPS:
                        if apply_op(op, old, s0.reg(src), w) == final and final != s0.reg(src) & m:
                            out.append(_claim("ArithmeticStoreG", addr=base, disp=disp, op=op,
                                              src=src, width=w))
                for imm in imms:
                    if imm & m == final:
                        out.append(_claim("StoreMemG", addr=base, disp=disp, src=imm & m, width=w))
    return out


def _initial_states(seeds, boundary=True):
    states = [MachineState.random(s) for s in seeds]
    if boundary:
        states += [MachineState.boundary(0, seed=seeds[0]),
                   MachineState.boundary(-1, seed=seeds[0])]
    return states


def _run_all(g, states):
    runs = []
    for s0 in states:
        s0 = s0.copy()
        s0.log = []
        s1 = interpret(g.instrs, s0)
        runs.append((s0, s1, s0.log))
    return runs


def _claim_writes(claim, s0):
    if claim.gtype not in ("StoreMemG", "ArithmeticStoreG"):
        return set()
    a = (s0.reg(claim["addr"]) + claim["disp"]) & MASK64
    return {(a + i) & MASK64 for i in range(claim.width // 8)}


def classify(g, seeds=DEFAULT_SEEDS, frame=None, boundary=True):
    """All claims that hold on every classification run of ``g``.

    ``boundary=False`` drops the all-zero / all-ones runs (for measuring
    what they buy)."""
    if frame is None:
        try:
            frame = analyze_frame(g)
        except NonConstantStackOffset:
            frame = GadgetFrame(None, "unknown")
    runs = _run_all(g, _initial_states(seeds, boundary))
    if frame.constant:
        for s0, s1, _ in runs:
            if _signed(s1.reg("rsp") - s0.reg("rsp")) != frame.frame_size:
                log.info("%#x: stack delta varies across runs", g.va)
                frame = GadgetFrame(None, "unknown")
                break

    s0, s1, events = runs[0]
    cands = _reg_candidates(g, s0, s1, frame) + _mem_candidates(g, s0, s1, events)
    if g.terminator is StopKind.SYSCALL:
        cands.append(_claim("SyscallG"))
    if not frame.constant:
        for r in DATA_REGS:
            d = _signed(s1.reg("rsp") - s0.reg(r))
            if abs(d) < MAX_DISP:
                cands.append(_claim("StackPivotG", src=r, disp=d))
    elif frame.next_kind == "stack" and not any(
            k == "MemWrite" and not _is_stack(s0, a) for k, a, _ in events):
        cands.append(_claim("NoOpG"))

    seen = set()
    kept = []
    for c in cands:
        if c.key() in seen:
            continue
        seen.add(c.key())
        if all(claim_holds(c, a, b) for a, b, _ in runs):
            kept.append(c)

    # a register claimed constant needs no arithmetic explanation as well
    const_dsts = {c["dst"] for c in kept if c.gtype == "SetConstG"}
    kept = [c for c in kept if c.gtype == "SetConstG" or c.get("dst") not in const_dsts
            or c.gtype in ("StoreMemG", "ArithmeticStoreG")]
    if any(c.gtype != "NoOpG" for c in kept):
        kept = [c for c in kept if c.gtype != "NoOpG"]

    changed = set()
    for a, b, _ in runs:
        changed |= {r for r in DATA_REGS if a.reg(r) != b.reg(r)}
    derefs = any(not _is_stack(a, addr) for a, _, ev in runs for _, addr, _ in ev)
    out = []
    for c in kept:
        covered = _claim_writes(c, s0)
        side = any(k == "MemWrite" and not _is_stack(s0, addr)
                   and not {(addr + i) & MASK64 for i in range(n)} <= covered
                   for k, addr, n in events)
        out.append(replace(c, clobbers=frozenset(changed - c.outputs), frame=frame,
                           side_writes=side, derefs=derefs))
    out.sort(key=_claim_order)
    return out


_GTYPE_ORDER = {g: i for i, g in enumerate(
    ("LoadConstG", "SetConstG", "MoveRegG", "ArithmeticG", "LoadMemG", "ArithmeticLoadG",
     "StoreMemG", "ArithmeticStoreG", "SyscallG", "StackPivotG", "NoOpG"))}


def _claim_order(c):
    return (_GTYPE_ORDER[c.gtype], tuple((k, str(v)) for k, v in c.params))
