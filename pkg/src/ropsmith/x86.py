"""Decoder for the x86-64 instruction subset that gadgets are built from.

Only 64-bit mode is handled.  A single REX prefix is accepted; every other
legacy prefix (operand/address size, segment overrides, lock, rep) is
rejected so that each decoded instruction has one unambiguous meaning.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .errors import NoTerminator, Privileged, Truncated, Undecodable, Unsupported

REGS64 = (
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
)
REGS32 = (
    "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi",
    "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d",
)
REG_INDEX = {r: i for i, r in enumerate(REGS64)}
FLAGS = ("cf", "zf", "sf", "of")

MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1


class Mnemonic(str, enum.Enum):
    RET = "ret"
    POP = "pop"
    PUSH = "push"
    MOV = "mov"
    LEA = "lea"
    ADD = "add"
    SUB = "sub"
    AND = "and"
    OR = "or"
    XOR = "xor"
    SBB = "sbb"
    INC = "inc"
    DEC = "dec"
    NEG = "neg"
    XCHG = "xchg"
    SHL = "shl"
    SHR = "shr"
    SAR = "sar"
    NOP = "nop"
    LEAVE = "leave"
    JMP = "jmp"
    CALL = "call"
    SYSCALL = "syscall"


class StopKind(str, enum.Enum):
    NONE = "None"
    RET_NEAR = "RetNear"
    RET_IMM = "RetImm"
    JMP_REG = "JmpReg"
    JMP_MEM = "JmpMem"
    CALL_REG = "CallReg"
    CALL_MEM = "CallMem"
    SYSCALL = "Syscall"


# Opcode bytes that can end a gadget.  Far returns are listed so the scanner
# can report them, but they never decode.
FAR_RET_BYTES = frozenset({0xCA, 0xCB})


@dataclass(frozen=True)
class Operand:
    kind: str                   # "reg" | "imm" | "mem"
    width: int = 64             # operand size in bits
    reg: str | None = None
    imm: int = 0                # unsigned, already sign-extended to ``width``
    base: str | None = None
    index: str | None = None
    scale: int = 1
    disp: int = 0               # signed

    @classmethod
    def r(cls, reg, width=64):
        return cls("reg", width, reg=reg)

    @classmethod
    def i(cls, value, width=64):
        return cls("imm", width, imm=value & ((1 << width) - 1))

    def regs_used(self):
        if self.kind == "reg":
            return {self.reg}
        if self.kind == "mem":
            return {r for r in (self.base, self.index) if r}
        return set()

    def __str__(self):
        if self.kind == "reg":
            return self.reg if self.width == 64 else REGS32[REG_INDEX[self.reg]]
        if self.kind == "imm":
            return hex(self.imm) if self.imm > 9 else str(self.imm)
        parts = []
        if self.base:
            parts.append(self.base)
        if self.index:
            parts.append(f"{self.index}*{self.scale}")
        text = " + ".join(parts)
        if self.disp or not parts:
            if not parts:
                text = hex(self.disp & MASK64)
            elif self.disp < 0:
                text += f" - {hex(-self.disp)}"
            else:
                text += f" + {hex(self.disp)}"
        size = "qword" if self.width == 64 else "dword"
        return f"{size} ptr [{text}]"


@dataclass(frozen=True)
class Instruction:
    va: int
    length: int
    mnemonic: Mnemonic
    operands: tuple = ()
    width: int = 64
    raw: bytes = b""
    stop_kind: StopKind = StopKind.NONE
    reads: frozenset = field(default=frozenset(), compare=False)
    writes: frozenset = field(default=frozenset(), compare=False)

    @property
    def is_control_transfer(self):
        return self.stop_kind is not StopKind.NONE

    @property
    def ret_imm(self):
        if self.stop_kind is StopKind.RET_IMM:
            return self.operands[0].imm
        return 0

    def __str__(self):
        ops = ", ".join(str(o) for o in self.operands)
        return f"{self.mnemonic.value} {ops}".rstrip()


InstrSeq = tuple  # tuple[Instruction, ...]


def format_seq(instrs):
    return " ; ".join(str(i) for i in instrs)


# --------------------------------------------------------------------------
# decoding tables

_LEGACY_PREFIXES = frozenset({0x66, 0x67, 0xF0, 0xF2, 0xF3, 0x26, 0x2E, 0x36, 0x3E, 0x64, 0x65})
_PRIVILEGED = {0xF4: "hlt", 0xFA: "cli", 0xFB: "sti", 0xE4: "in", 0xE5: "in", 0xEC: "in",
               0xED: "in", 0xE6: "out", 0xE7: "out", 0xEE: "out", 0xEF: "out", 0xCF: "iret"}

# op r/m, r   and   op r, r/m
_ALU_RM_R = {0x01: Mnemonic.ADD, 0x09: Mnemonic.OR, 0x19: Mnemonic.SBB, 0x21: Mnemonic.AND,
             0x29: Mnemonic.SUB, 0x31: Mnemonic.XOR, 0x89: Mnemonic.MOV, 0x87: Mnemonic.XCHG}
_ALU_R_RM = {0x03: Mnemonic.ADD, 0x0B: Mnemonic.OR, 0x1B: Mnemonic.SBB, 0x23: Mnemonic.AND,
             0x2B: Mnemonic.SUB, 0x33: Mnemonic.XOR, 0x8B: Mnemonic.MOV, 0x8D: Mnemonic.LEA}
_ALU_ACC_IMM = {0x05: Mnemonic.ADD, 0x0D: Mnemonic.OR, 0x1D: Mnemonic.SBB, 0x25: Mnemonic.AND,
                0x2D: Mnemonic.SUB, 0x35: Mnemonic.XOR}
_GRP1 = {0: Mnemonic.ADD, 1: Mnemonic.OR, 3: Mnemonic.SBB, 4: Mnemonic.AND,
         5: Mnemonic.SUB, 6: Mnemonic.XOR}
_GRP2 = {4: Mnemonic.SHL, 5: Mnemonic.SHR, 7: Mnemonic.SAR}

_ARITH_FLAGS = frozenset(FLAGS)


class _Cursor:
    __slots__ = ("code", "pos", "start")

    def __init__(self, code, pos):
        self.code = code
        self.pos = pos
        self.start = pos

    def byte(self):
        if self.pos >= len(self.code):
            raise Truncated("instruction runs past end of buffer", offset=self.start)
        b = self.code[self.pos]
        self.pos += 1
        return b

    def int_le(self, n, signed=False):
        if self.pos + n > len(self.code):
            raise Truncated("immediate runs past end of buffer", offset=self.start)
        v = int.from_bytes(self.code[self.pos:self.pos + n], "little", signed=signed)
        self.pos += n
        return v


def _modrm(cur, rex, width):
    """Return (reg_field, rm_operand) for the ModRM byte at the cursor."""
    m = cur.byte()
    mod, reg, rm = m >> 6, (m >> 3) & 7, m & 7
    reg |= (rex & 4) << 1
    if mod == 3:
        return reg, Operand.r(REGS64[rm | ((rex & 1) << 3)], width)
    base = index = None
    scale = 1
    if rm == 4:
        sib = cur.byte()
        ss, idx, b = sib >> 6, (sib >> 3) & 7, sib & 7
        idx |= (rex & 2) << 2
        if idx != 4:
            index = REGS64[idx]
            scale = 1 << ss
        if b == 5 and mod == 0:
            disp = cur.int_le(4, signed=True)
            return reg, Operand("mem", width, base=None, index=index, scale=scale, disp=disp)
        base = REGS64[b | ((rex & 1) << 3)]
    elif rm == 5 and mod == 0:
        raise Unsupported("rip-relative addressing", offset=cur.start, tag="rip-relative")
    else:
        base = REGS64[rm | ((rex & 1) << 3)]
    disp = 0
    if mod == 1:
        disp = cur.int_le(1, signed=True)
    elif mod == 2:
        disp = cur.int_le(4, signed=True)
    return reg, Operand("mem", width, base=base, index=index, scale=scale, disp=disp)


def _imm(cur, size, width):
    """Read a ``size``-byte immediate sign-extended to ``width`` bits."""
    v = cur.int_le(size, signed=True)
    return Operand.i(v, width)


def _reg_only(op, cur, what):
    if op.kind != "reg":
        raise Unsupported(f"{what} with memory operand", offset=cur.start, tag="mem-form")


def decode_instruction(code, offset=0, va=0):
    """Decode one instruction of the supported subset at ``code[offset]``.

    Raises :class:`Truncated` when the bytes end mid-instruction,
    :class:`Privileged` for privileged opcodes and :class:`Unsupported` for
    anything else outside the subset.
    """
    code = bytes(code) if not isinstance(code, (bytes, bytearray, memoryview)) else code
    if offset >= len(code):
        raise Truncated("empty buffer", offset=offset)
    cur = _Cursor(code, offset)
    b = cur.byte()
    if b in _LEGACY_PREFIXES:
        raise Unsupported(f"legacy prefix {b:#04x}", offset=offset, tag="prefix")
    rex = 0
    if 0x40 <= b <= 0x4F:
        rex = b
        b = cur.byte()
        if 0x40 <= b <= 0x4F or b in _LEGACY_PREFIXES:
            raise Unsupported("prefix after REX", offset=offset, tag="prefix")
    width = 64 if rex & 8 else 32
    ext_b = (rex & 1) << 3
    stop = StopKind.NONE
    mn = None
    ops = ()

    if 0x50 <= b <= 0x57:
        mn, ops = Mnemonic.PUSH, (Operand.r(REGS64[(b - 0x50) | ext_b]),)
        width = 64
    elif 0x58 <= b <= 0x5F:
        mn, ops = Mnemonic.POP, (Operand.r(REGS64[(b - 0x58) | ext_b]),)
        width = 64
    elif 0x90 <= b <= 0x97:
        r = (b - 0x90) | ext_b
        if r == 0:
            mn = Mnemonic.NOP
        else:
            mn, ops = Mnemonic.XCHG, (Operand.r(REGS64[r], width), Operand.r("rax", width))
    elif 0xB8 <= b <= 0xBF:
        r = REGS64[(b - 0xB8) | ext_b]
        if width == 64:
            imm = Operand.i(cur.int_le(8), 64)
        else:
            imm = Operand.i(cur.int_le(4), 32)
        mn, ops = Mnemonic.MOV, (Operand.r(r, width), imm)
    elif b == 0xC3:
        mn, stop, width = Mnemonic.RET, StopKind.RET_NEAR, 64
    elif b == 0xC2:
        mn, stop, width = Mnemonic.RET, StopKind.RET_IMM, 64
        ops = (Operand.i(cur.int_le(2), 16),)
    elif b in FAR_RET_BYTES:
        raise Unsupported("far return", offset=offset, tag="far-ret")
    elif b == 0xC9:
        mn, width = Mnemonic.LEAVE, 64
    elif b in _PRIVILEGED:
        raise Privileged(_PRIVILEGED[b], offset=offset, tag="privileged")
    elif b == 0x0F:
        b2 = cur.byte()
        if b2 == 0x05:
            mn, stop, width = Mnemonic.SYSCALL, StopKind.SYSCALL, 64
        elif b2 == 0x1F:
            reg, rm = _modrm(cur, rex, width)
            if reg & 7:
                raise Unsupported("0f 1f /r with r != 0", offset=offset)
            mn, ops = Mnemonic.NOP, (rm,)
        elif b2 in (0x01, 0x06, 0x07, 0x08, 0x09, 0x30, 0x32, 0x35):
            raise Privileged(f"0f {b2:02x}", offset=offset, tag="privileged")
        else:
            raise Unsupported(f"opcode 0f {b2:02x}", offset=offset)
    elif b in _ALU_RM_R:
        mn = _ALU_RM_R[b]
        reg, rm = _modrm(cur, rex, width)
        if mn is Mnemonic.XCHG:
            _reg_only(rm, cur, "xchg")
        ops = (rm, Operand.r(REGS64[reg], width))
    elif b in _ALU_R_RM:
        mn = _ALU_R_RM[b]
        reg, rm = _modrm(cur, rex, width)
        if mn is Mnemonic.LEA and rm.kind != "mem":
            raise Unsupported("lea with register operand", offset=offset)
        ops = (Operand.r(REGS64[reg], width), rm)
    elif b in _ALU_ACC_IMM:
        mn = _ALU_ACC_IMM[b]
        ops = (Operand.r("rax", width), _imm(cur, 4, width))
    elif b in (0x81, 0x83):
        reg, rm = _modrm(cur, rex, width)
        mn = _GRP1.get(reg & 7)
        if mn is None:
            raise Unsupported(f"group-1 /{reg & 7}", offset=offset)
        ops = (rm, _imm(cur, 4 if b == 0x81 else 1, width))
    elif b == 0xC7:
        reg, rm = _modrm(cur, rex, width)
        if reg & 7:
            raise Unsupported("c7 /r with r != 0", offset=offset)
        mn, ops = Mnemonic.MOV, (rm, _imm(cur, 4, width))
    elif b in (0xC1, 0xD1):
        reg, rm = _modrm(cur, rex, width)
        mn = _GRP2.get(reg & 7)
        if mn is None:
            raise Unsupported(f"group-2 /{reg & 7}", offset=offset)
        _reg_only(rm, cur, mn.value)
        count = cur.byte() if b == 0xC1 else 1
        ops = (rm, Operand.i(count, 8))
    elif b == 0xF7:
        reg, rm = _modrm(cur, rex, width)
        if reg & 7 != 3:
            raise Unsupported(f"group-3 /{reg & 7}", offset=offset)
        _reg_only(rm, cur, "neg")
        mn, ops = Mnemonic.NEG, (rm,)
    elif b == 0xFF:
        reg, rm = _modrm(cur, rex, width)
        sub = reg & 7
        if sub in (0, 1):
            _reg_only(rm, cur, "inc/dec")
            mn, ops = (Mnemonic.INC if sub == 0 else Mnemonic.DEC), (rm,)
        elif sub in (2, 4):
            # near call/jmp are always 64-bit in long mode
            if rm.kind == "reg":
                rm = Operand.r(rm.reg, 64)
                stop = StopKind.CALL_REG if sub == 2 else StopKind.JMP_REG
            else:
                rm = Operand("mem", 64, base=rm.base, index=rm.index, scale=rm.scale, disp=rm.disp)
                stop = StopKind.CALL_MEM if sub == 2 else StopKind.JMP_MEM
            mn, ops, width = (Mnemonic.CALL if sub == 2 else Mnemonic.JMP), (rm,), 64
        else:
            raise Unsupported(f"group-5 /{sub}", offset=offset)
    else:
        raise Unsupported(f"opcode {b:#04x}", offset=offset)

    length = cur.pos - offset
    if length > 15:
        raise Unsupported("instruction longer than 15 bytes", offset=offset)
    reads, writes = _effects(mn, ops, stop)
    return Instruction(va=va, length=length, mnemonic=mn, operands=tuple(ops), width=width,
                       raw=bytes(code[offset:cur.pos]), stop_kind=stop,
                       reads=frozenset(reads), writes=frozenset(writes))


def _effects(mn, ops, stop):
    reads, writes = set(), set()
    for o in ops:
        if o.kind == "mem":
            reads |= o.regs_used()
    M = Mnemonic
    if mn in (M.PUSH, M.POP, M.RET, M.CALL, M.LEAVE):
        reads.add("rsp")
        writes.add("rsp")
    if mn is M.PUSH:
        reads.add(ops[0].reg)
    elif mn is M.POP:
        writes.add(ops[0].reg)
    elif mn is M.LEAVE:
        reads.add("rbp")
        writes.add("rbp")
    elif mn in (M.MOV, M.LEA):
        dst, src = ops
        if src.kind == "reg":
            reads.add(src.reg)
        if dst.kind == "reg":
            writes.add(dst.reg)
    elif mn in (M.ADD, M.SUB, M.AND, M.OR, M.XOR, M.SBB):
        dst, src = ops
        for o in ops:
            if o.kind == "reg":
                reads.add(o.reg)
        if dst.kind == "reg":
            writes.add(dst.reg)
        writes |= _ARITH_FLAGS
        if mn is M.SBB:
            reads.add("cf")
    elif mn in (M.INC, M.DEC, M.NEG, M.SHL, M.SHR, M.SAR):
        reads.add(ops[0].reg)
        writes.add(ops[0].reg)
        writes |= _ARITH_FLAGS
    elif mn is M.XCHG:
        for o in ops:
            reads.add(o.reg)
            writes.add(o.reg)
    if stop in (StopKind.JMP_REG, StopKind.CALL_REG):
        reads.add(ops[0].reg)
    if mn is M.SYSCALL:
        reads |= {"rax", "rdi", "rsi", "rdx", "r10", "r8", "r9"}
    return reads, writes


def decode_sequence(code, start_va=0, max_insns=5, offset=0):
    """Decode consecutive instructions up to and including the first
    control transfer.

    Raises :class:`Undecodable` (with the failing offset) or
    :class:`NoTerminator` when ``max_insns`` is exhausted first.
    """
    if max_insns < 1:
        raise ValueError("max_insns must be >= 1")
    out = []
    pos = offset
    va = start_va
    while len(out) < max_insns:
        try:
            insn = decode_instruction(code, pos, va)
        except (Unsupported, Truncated) as exc:
            raise Undecodable(f"cannot decode at offset {pos}: {exc}", offset=pos,
                              tag=getattr(exc, "tag", None)) from exc
        out.append(insn)
        if insn.is_control_transfer:
            return tuple(out)
        pos += insn.length
        va += insn.length
    raise NoTerminator(f"no control transfer within {max_insns} instructions", offset=offset)
