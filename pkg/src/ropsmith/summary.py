"""Gadget summaries: final register values as expressions over the initial
registers (named by register), stack slots ``slot(k)`` = 8 bytes at
``rsp + k`` and initial memory ``load(addr, n)``."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import expr as E
from .semantics import STATE_REGS
from .symexec import INITIAL_MEM, symexec_gadget

SUMMARY_REGS = STATE_REGS
SUMMARY_FLAGS = ("cf", "zf")


@dataclass(frozen=True)
class Deref:
    addr: E.Term
    width: int          # bytes
    kind: str           # "read" | "write"

    def __str__(self):
        return f"{self.kind} [{self.addr}, {self.addr} + {self.width})"


@dataclass
class GadgetSummary:
    post: dict                                   # reg -> Term
    mem_writes: list = field(default_factory=list)      # [(addr, value)], non-stack
    stack_writes: list = field(default_factory=list)    # [(offset, value)]
    preconds: list = field(default_factory=list)        # [Deref]

    def slots_read(self):
        out = set()
        for t in self.post.values():
            out |= {x.args[0] for x in E.iter_subterms(t) if x.op == "slot"}
        return out

    @property
    def rsp_delta(self):
        d = E.sub(self.post["rsp"], E.var("rsp"))
        return _signed(d.value) if d.is_const() else None

    def pure(self):
        """No memory traffic other than reads of the gadget's own stack and
        scratch writes below it."""
        if self.mem_writes or any(off >= 0 for off, _ in self.stack_writes):
            return False
        if any(k < 0 for k in self.slots_read()):
            return False
        for t in self.post.values():
            for x in E.iter_subterms(t):
                if x.op in ("load", "select", "store"):
                    return False
        return True

    def env(self, state):
        """Evaluation environment for a concrete initial state."""
        return summary_env(state)

    def lines(self):
        out = [f"{r}' = {self.post[r]}" for r in SUMMARY_REGS
               if self.post[r] != E.var(r) and r in self.post]
        out += [f"M[{a}] = {v}" for a, v in self.mem_writes]
        out += [f"precond: {d}" for d in self.preconds]
        return out


def _signed(v):
    return v - (1 << 64) if v >> 63 else v


class _Lifter:
    def __init__(self, run):
        self.run = run
        self.rsp = E.var("rsp")
        self.memo = {}

    def __call__(self, t):
        hit = self.memo.get(id(t))
        if hit is not None and hit[0] is t:
            return hit[1]
        op = t.op
        if op == "var":
            reg = self.run.initial_names.get(t.args[0])
            out = t if reg is None else E.var(reg, t.width)
        elif op == "const":
            out = t
        elif op == "select" and t.args[0].op == "var" and t.args[0].args[0] == INITIAL_MEM:
            a = self(t.args[1])
            d = E.sub(a, self.rsp)
            if d.is_const():
                k = _signed(d.value)
                base, byte = k - k % 8, k % 8
                out = E.extract(8 * byte + 7, 8 * byte, E.slot(base))
            else:
                out = E.load(a, 1)
        else:
            out = E.rebuild(t, [self(a) if isinstance(a, E.Term) else a for a in t.args])
        self.memo[id(t)] = (t, out)     # keep t alive so its id stays unique
        return out

    def stack_offset(self, a):
        d = E.sub(a, self.rsp)
        return _signed(d.value) if d.is_const() else None


def summarize(g):
    run = symexec_gadget(g)
    lift = _Lifter(run)
    post = {r: lift(run.final_value(r)) for r in SUMMARY_REGS}
    for f in SUMMARY_FLAGS:
        post[f] = lift(run.inlined(run.final.flags.get(f) or run.flag0(f)))
    mem_writes, stack_writes, preconds = [], [], []
    for kind, addr, nbytes, value in run.mem_accesses:
        a = lift(run.inlined(addr))
        preconds.append(Deref(a, nbytes, kind))
        if kind == "write":
            v = lift(run.inlined(value))
            off = lift.stack_offset(a)
            if off is None:
                mem_writes.append((a, v))
            else:
                stack_writes.append((off, v))
    return GadgetSummary(post, mem_writes, stack_writes, preconds)


def summary_env(state, rsp=None):
    regs = {r: state.reg(r) for r in SUMMARY_REGS}
    regs["cf"] = state.flag("cf")
    regs["zf"] = state.flag("zf")
    regs[INITIAL_MEM] = E.ArrayValue(state.initial_byte)
    base = state.reg("rsp") if rsp is None else rsp
    return E.Env(regs, slot=lambda k: state.initial_read(base + k, 8),
                 load=lambda a, n: state.initial_read(a, n))


def evaluate_post(summary, state):
    env = summary_env(state)
    memo = {}
    return {r: E.evaluate(t, env, memo) for r, t in summary.post.items()}
