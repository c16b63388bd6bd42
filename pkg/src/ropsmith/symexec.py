"""Symbolic execution of gadgets into SSA bitvector formulas.

Every definition (register write, flag update, memory write) introduces a
fresh variable ``phiN`` (registers, flags) or ``MN`` (memory arrays) together
with its defining expression over earlier variables.  The same definitions
are also kept inlined over the initial variables, which is what the rewrite
prover and the summaries consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import expr as E
from .errors import UnsupportedInstr
from .x86 import MASK64, REGS64, Mnemonic, StopKind

INITIAL_MEM = "M"


@dataclass
class SymbolicState:
    regs: dict = field(default_factory=dict)     # reg -> Term (64-bit)
    flags: dict = field(default_factory=dict)    # "cf"/"zf" -> Term (1-bit)
    mem: E.Term | None = None

    def copy(self):
        return SymbolicState(dict(self.regs), dict(self.flags), self.mem)


class SymbolicRun:
    """Result of :func:`symexec_gadget`; unpacks as (initial, final, formulas)."""

    def __init__(self):
        self.initial = SymbolicState(mem=E.array_var(INITIAL_MEM))
        self.final = None
        self.formulas = []          # [(var Term, defining expr Term)]
        self.inline = {}            # var name -> inlined term
        self.mem_accesses = []      # (kind, addr_ssa, nbytes, value_ssa or None)
        self.initial_names = {}     # var name -> register/flag it stands for
        self._n = 0
        self._m = 0

    def __iter__(self):
        return iter((self.initial, self.final, self.formulas))

    # -- variables
    def reg0(self, name):
        """Initial value of a register, allocating its variable on first use."""
        t = self.initial.regs.get(name)
        if t is None:
            self._n += 1
            t = self.initial.regs[name] = E.var(f"phi{self._n}", 64)
            self.initial_names[t.args[0]] = name
        return t

    def flag0(self, name):
        t = self.initial.flags.get(name)
        if t is None:
            self._n += 1
            t = self.initial.flags[name] = E.var(f"phi{self._n}", 1)
            self.initial_names[t.args[0]] = name
        return t

    def define(self, value):
        if value.width == E.ARRAY:
            self._m += 1
            v = E.array_var(f"M{self._m}")
        else:
            self._n += 1
            v = E.var(f"phi{self._n}", value.width)
        self.formulas.append((v, value))
        self.inline[v.args[0]] = self.inlined(value)
        return v

    def inlined(self, t):
        """Rewrite an SSA term over the initial variables only."""
        return E.substitute(t, lambda leaf: self.inline.get(leaf.args[0]) if leaf.op == "var" else None)

    def final_value(self, reg):
        return self.inlined(self.final.regs.get(reg) or self.reg0(reg))

    def final_mem(self):
        return self.inlined(self.final.mem)

    def variables(self):
        """All declared variables as {name: width} (arrays have width ARRAY)."""
        out = {INITIAL_MEM: E.ARRAY}
        for t in list(self.initial.regs.values()) + list(self.initial.flags.values()):
            out[t.args[0]] = t.width
        for v, _ in self.formulas:
            out[v.args[0]] = v.width
        return out


class _Exec:
    def __init__(self, run):
        self.run = run
        self.st = SymbolicState(mem=run.initial.mem)
        self.low = {}       # reg -> variable holding its 32-bit value

    def reg(self, name, w=64):
        if w == 32 and name in self.low:
            return self.low[name]
        t = self.st.regs.get(name)
        if t is None:
            t = self.run.reg0(name)
        return t if w == 64 else E.extract(w - 1, 0, t)

    def set_reg(self, name, value):
        self.low.pop(name, None)
        if value.width < 64:
            low = self.run.define(value)
            self.st.regs[name] = self.run.define(E.zext_to(low, 64))
            self.low[name] = low
        else:
            self.st.regs[name] = self.run.define(value)

    def flag(self, name):
        t = self.st.flags.get(name)
        return t if t is not None else self.run.flag0(name)

    def set_flag(self, name, value):
        if value.width == E.BOOL:
            value = E.bool_to_bv(value)
        self.st.flags[name] = self.run.define(value)

    def address(self, op):
        a = E.const(op.disp, 64)
        if op.base:
            a = E.add(a, self.reg(op.base))
        if op.index:
            a = E.add(a, E.mul_const(op.scale, self.reg(op.index)))
        return a

    def read(self, addr, nbytes):
        value = E.read_bytes(self.st.mem, addr, nbytes)
        self.run.mem_accesses.append(("read", addr, nbytes, None))
        return value

    def write(self, addr, value):
        self.st.mem = self.run.define(E.write_bytes(self.st.mem, addr, value))
        self.run.mem_accesses.append(("write", addr, value.width // 8, value))

    def get(self, op, w):
        if op.kind == "reg":
            return self.reg(op.reg, w)
        if op.kind == "imm":
            return E.const(op.imm, w)
        return self.read(self.address(op), w // 8)

    def put(self, op, value):
        if op.kind == "reg":
            self.set_reg(op.reg, value)
        else:
            self.write(self.address(op), value)

    def push(self, value):
        rsp = E.sub(self.reg("rsp"), E.const(8, 64))
        self.set_reg("rsp", rsp)
        self.write(self.reg("rsp"), value)

    def pop(self):
        rsp = self.reg("rsp")
        v = self.read(rsp, 8)
        self.set_reg("rsp", E.add(rsp, E.const(8, 64)))
        return v

    def zs(self, r):
        self.set_flag("zf", E.eq(r, E.const(0, r.width)))

    def step(self, insn):
        M = Mnemonic
        mn, ops, w = insn.mnemonic, insn.operands, insn.width
        nxt = E.const((insn.va + insn.length) & MASK64, 64)
        zero = E.const(0, w)

        if mn in (M.ADD, M.SUB, M.SBB, M.AND, M.OR, M.XOR):
            a, b = self.get(ops[0], w), self.get(ops[1], w)
            if mn is M.ADD:
                r = E.add(a, b)
                cf = E.ult(r, a)
            elif mn is M.SUB:
                r = E.sub(a, b)
                cf = E.ult(a, b)
            elif mn is M.SBB:
                c = self.flag("cf")
                r = E.sub(E.sub(a, b), E.zext_to(c, w))
                cf = E.ite(E.eq(c, E.const(1, 1)), E.not_(E.ult(b, a)), E.ult(a, b))
            else:
                r = {M.AND: E.bvand, M.OR: E.bvor, M.XOR: E.bvxor}[mn](a, b)
                cf = E.FALSE
            self.put(ops[0], r)
            self.set_flag("cf", cf)
            self.zs(r)
        elif mn is M.MOV:
            self.put(ops[0], self.get(ops[1], w))
        elif mn is M.LEA:
            a = self.address(ops[1])
            self.put(ops[0], a if w == 64 else E.extract(w - 1, 0, a))
        elif mn is M.PUSH:
            self.push(self.reg(ops[0].reg))
        elif mn is M.POP:
            v = self.pop()
            self.set_reg(ops[0].reg, v)
        elif mn is M.XCHG:
            a, b = self.get(ops[0], w), self.get(ops[1], w)
            self.put(ops[0], b)
            self.put(ops[1], a)
        elif mn in (M.INC, M.DEC):
            a = self.get(ops[0], w)
            r = E.add(a, E.const(1 if mn is M.INC else -1, w))
            self.put(ops[0], r)
            self.zs(r)
        elif mn is M.NEG:
            a = self.get(ops[0], w)
            r = E.neg(a)
            self.put(ops[0], r)
            self.set_flag("cf", E.not_(E.eq(a, zero)))
            self.zs(r)
        elif mn in (M.SHL, M.SHR, M.SAR):
            a = self.get(ops[0], w)
            k = ops[1].imm & (63 if w == 64 else 31)
            if k == 0:
                self.put(ops[0], a)
            else:
                kt = E.const(k, w)
                if mn is M.SHL:
                    r, cf = E.shl(a, kt), E.extract(w - k, w - k, a)
                elif mn is M.SHR:
                    r, cf = E.lshr(a, kt), E.extract(k - 1, k - 1, a)
                else:
                    r, cf = E.ashr(a, kt), E.extract(k - 1, k - 1, a)
                self.put(ops[0], r)
                self.set_flag("cf", cf)
                self.zs(r)
        elif mn is M.NOP:
            pass
        elif mn is M.LEAVE:
            self.set_reg("rsp", self.reg("rbp"))
            self.set_reg("rbp", self.pop())
        elif mn is M.RET:
            nxt = self.pop()
            if insn.stop_kind is StopKind.RET_IMM:
                self.set_reg("rsp", E.add(self.reg("rsp"), E.const(insn.ret_imm, 64)))
        elif mn is M.JMP:
            nxt = self.get(ops[0], 64)
        elif mn is M.CALL:
            target = self.get(ops[0], 64)
            self.push(nxt)
            nxt = target
        elif mn is M.SYSCALL:
            pass
        else:
            raise UnsupportedInstr(mn.value)
        self.st.regs["rip"] = self.run.define(nxt)


def symexec_instrs(instrs):
    run = SymbolicRun()
    ex = _Exec(run)
    for insn in instrs:
        ex.step(insn)
    run.final = ex.st
    return run


def symexec_gadget(g):
    """Symbolically execute gadget ``g``; see :class:`SymbolicRun`."""
    return symexec_instrs(g.instrs)


class _StateVars(dict):
    def __init__(self, run, state):
        super().__init__({INITIAL_MEM: E.ArrayValue(state.initial_byte)})
        self.run, self.state = run, state

    def __missing__(self, name):
        what = self.run.initial_names[name]
        v = self.state.flag(what) if what in ("cf", "zf", "sf", "of") else self.state.reg(what)
        self[name] = v
        return v


def concrete_env(run, state):
    """Evaluation environment binding ``run``'s initial variables to the
    values held by a concrete :class:`~ropsmith.semantics.MachineState`."""
    return E.Env(_StateVars(run, state))


__all__ = ["SymbolicState", "SymbolicRun", "symexec_gadget", "symexec_instrs", "concrete_env",
           "INITIAL_MEM", "REGS64"]
