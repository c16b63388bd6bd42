"""Concrete interpretation of decoded instructions.

Unset registers and memory draw their first value from a hash of the
state's seed and the location, so a value does not depend on the order in
which locations are read and two states with the same seed agree on every
location.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .errors import UnsupportedInstr
from .x86 import FLAGS, MASK64, REGS64, Mnemonic, StopKind

GPRS = REGS64
STATE_REGS = GPRS + ("rip",)


def _digest(seed, tag):
    h = hashlib.blake2b(f"{seed}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


def draw_reg(seed, name):
    return _digest(seed, "reg:" + name)


class _LazyMemory:
    """Initial memory content for a seed, generated in 8-byte blocks."""

    __slots__ = ("seed", "fill", "backing", "_blocks")

    def __init__(self, seed, fill=None, backing=None):
        self.seed = seed
        self.fill = fill
        self.backing = backing
        self._blocks = {}

    def __call__(self, addr):
        if self.backing is not None:
            b = self.backing(addr)
            if b is not None:
                return b
        if self.fill is not None:
            return self.fill
        blk = addr >> 3
        word = self._blocks.get(blk)
        if word is None:
            word = self._blocks[blk] = _digest(self.seed, f"mem:{blk}")
        return (word >> (8 * (addr & 7))) & 0xFF


@dataclass
class MachineState:
    regs: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    mem: dict = field(default_factory=dict)
    rng_seed: int = 0
    fill: int | None = None
    backing: object = None
    log: list | None = None

    def __post_init__(self):
        self._initial = _LazyMemory(self.rng_seed, self.fill, self.backing)

    @classmethod
    def random(cls, seed, **kw):
        st = cls(rng_seed=seed, **kw)
        for r in STATE_REGS:
            st.reg(r)
        for f in FLAGS:
            st.flag(f)
        return st

    @classmethod
    def boundary(cls, value, seed=0, **kw):
        """All registers (and unset memory bytes) equal to ``value``."""
        value &= MASK64
        st = cls(regs={r: value for r in STATE_REGS}, flags={f: 0 for f in FLAGS},
                 rng_seed=seed, fill=value & 0xFF, **kw)
        return st

    def copy(self):
        st = MachineState(dict(self.regs), dict(self.flags), dict(self.mem), self.rng_seed,
                          self.fill, self.backing, self.log)
        st._initial = self._initial
        return st

    # -- registers / flags
    def reg(self, name):
        v = self.regs.get(name)
        if v is None:
            v = self.regs[name] = draw_reg(self.rng_seed, name)
        return v

    def set_reg(self, name, value):
        self.regs[name] = value & MASK64

    def flag(self, name):
        v = self.flags.get(name)
        if v is None:
            v = self.flags[name] = _digest(self.rng_seed, "flag:" + name) & 1
        return v

    # -- memory
    def initial_byte(self, addr):
        return self._initial(addr & MASK64)

    def initial_read(self, addr, nbytes):
        """Value the location held before any write (little-endian)."""
        return int.from_bytes(bytes(self.initial_byte(addr + i) for i in range(nbytes)), "little")

    def read_byte(self, addr):
        addr &= MASK64
        v = self.mem.get(addr)
        return self._initial(addr) if v is None else v

    def read(self, addr, nbytes):
        if self.log is not None:
            self.log.append(("MemRead", addr & MASK64, nbytes))
        return int.from_bytes(bytes(self.read_byte(addr + i) for i in range(nbytes)), "little")

    def write(self, addr, nbytes, value):
        if self.log is not None:
            self.log.append(("MemWrite", addr & MASK64, nbytes))
        for i in range(nbytes):
            self.mem[(addr + i) & MASK64] = (value >> (8 * i)) & 0xFF

    def snapshot(self):
        return {r: self.reg(r) for r in STATE_REGS}


# --------------------------------------------------------------------------

def effective_address(op, st):
    a = op.disp
    if op.base:
        a += st.reg(op.base)
    if op.index:
        a += st.reg(op.index) * op.scale
    return a & MASK64


def _get(op, st, w):
    m = (1 << w) - 1
    if op.kind == "reg":
        return st.reg(op.reg) & m
    if op.kind == "imm":
        return op.imm & m
    return st.read(effective_address(op, st), w // 8)


def _put(op, st, w, value):
    value &= (1 << w) - 1
    if op.kind == "reg":
        st.set_reg(op.reg, value)       # 32-bit results zero-extend
    else:
        st.write(effective_address(op, st), w // 8, value)


def _signed(v, w):
    return v - (1 << w) if v >> (w - 1) else v


def _set_zs(st, r, w):
    st.flags["zf"] = int(r == 0)
    st.flags["sf"] = (r >> (w - 1)) & 1


def alu(mn, a, b, cf, w):
    """Return (result, flag updates) for a two-operand arithmetic op."""
    m = (1 << w) - 1
    if mn is Mnemonic.ADD:
        full = a + b
        r = full & m
        return r, {"cf": full >> w, "of": int(_signed(a, w) + _signed(b, w) != _signed(r, w))}
    if mn is Mnemonic.SUB:
        r = (a - b) & m
        return r, {"cf": int(a < b), "of": int(_signed(a, w) - _signed(b, w) != _signed(r, w))}
    if mn is Mnemonic.SBB:
        r = (a - b - cf) & m
        return r, {"cf": int(a < b + cf),
                   "of": int(_signed(a, w) - _signed(b, w) - cf != _signed(r, w))}
    if mn is Mnemonic.AND:
        return a & b, {"cf": 0, "of": 0}
    if mn is Mnemonic.OR:
        return a | b, {"cf": 0, "of": 0}
    if mn is Mnemonic.XOR:
        return a ^ b, {"cf": 0, "of": 0}
    raise UnsupportedInstr(mn.value)


def _push(st, value):
    rsp = (st.reg("rsp") - 8) & MASK64
    st.set_reg("rsp", rsp)
    st.write(rsp, 8, value)


def _pop(st):
    rsp = st.reg("rsp")
    v = st.read(rsp, 8)
    st.set_reg("rsp", rsp + 8)
    return v


def step(insn, st):
    """Execute one instruction in place, updating ``rip``."""
    M = Mnemonic
    mn, ops, w = insn.mnemonic, insn.operands, insn.width
    m = (1 << w) - 1
    nxt = (insn.va + insn.length) & MASK64

    if mn in (M.ADD, M.SUB, M.SBB, M.AND, M.OR, M.XOR):
        a, b = _get(ops[0], st, w), _get(ops[1], st, w)
        r, fl = alu(mn, a, b, st.flag("cf"), w)
        _put(ops[0], st, w, r)
        st.flags.update(fl)
        _set_zs(st, r, w)
    elif mn is M.MOV:
        _put(ops[0], st, w, _get(ops[1], st, w))
    elif mn is M.LEA:
        _put(ops[0], st, w, effective_address(ops[1], st))
    elif mn is M.PUSH:
        _push(st, st.reg(ops[0].reg))
    elif mn is M.POP:
        v = _pop(st)
        st.set_reg(ops[0].reg, v)
    elif mn is M.XCHG:
        a, b = _get(ops[0], st, w), _get(ops[1], st, w)
        _put(ops[0], st, w, b)
        _put(ops[1], st, w, a)
    elif mn in (M.INC, M.DEC):
        a = _get(ops[0], st, w)
        r = (a + (1 if mn is M.INC else -1)) & m
        _put(ops[0], st, w, r)
        st.flags["of"] = int(r == (1 << (w - 1)) if mn is M.INC else a == (1 << (w - 1)))
        _set_zs(st, r, w)
    elif mn is M.NEG:
        a = _get(ops[0], st, w)
        r = (-a) & m
        _put(ops[0], st, w, r)
        st.flags["cf"] = int(a != 0)
        st.flags["of"] = int(a == 1 << (w - 1))
        _set_zs(st, r, w)
    elif mn in (M.SHL, M.SHR, M.SAR):
        a = _get(ops[0], st, w)
        k = ops[1].imm & (63 if w == 64 else 31)
        if k == 0:
            _put(ops[0], st, w, a)
        else:
            if mn is M.SHL:
                r = (a << k) & m
                cf = (a >> (w - k)) & 1
                of = ((r >> (w - 1)) & 1) ^ cf
            elif mn is M.SHR:
                r = a >> k
                cf = (a >> (k - 1)) & 1
                of = (a >> (w - 1)) & 1
            else:
                sa = _signed(a, w)
                r = (sa >> k) & m
                cf = (sa >> (k - 1)) & 1
                of = 0
            _put(ops[0], st, w, r)
            st.flags["cf"], st.flags["of"] = cf, of
            _set_zs(st, r, w)
    elif mn is M.NOP:
        pass
    elif mn is M.LEAVE:
        st.set_reg("rsp", st.reg("rbp"))
        st.set_reg("rbp", _pop(st))
    elif mn is M.RET:
        nxt = _pop(st)
        if insn.stop_kind is StopKind.RET_IMM:
            st.set_reg("rsp", st.reg("rsp") + insn.ret_imm)
    elif mn is M.JMP:
        nxt = _get(ops[0], st, 64)
    elif mn is M.CALL:
        target = _get(ops[0], st, 64)
        _push(st, nxt)
        nxt = target
    elif mn is M.SYSCALL:
        pass        # trapped: the kernel is never modeled
    else:
        raise UnsupportedInstr(mn.value)
    st.set_reg("rip", nxt)


def interpret(instrs, state):
    """Run ``instrs`` in order on a copy of ``state`` and return it."""
    st = state.copy()
    for insn in instrs:
        step(insn, st)
    return st
