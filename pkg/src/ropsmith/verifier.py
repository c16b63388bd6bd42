"""Claim verification: a claim holds when the negation of its
postcondition, conjoined with the gadget's SSA formulas, is unsatisfiable.

Oracles answer satisfiability of that conjunction.  ``RewriteProver``
succeeds when normalization alone reduces the postcondition to true;
``RandomOracle`` only ever finds counterexamples; ``SmtLibOracle`` talks
SMT-LIB v2 (QF_ABV) to an external solver process.
"""

from __future__ import annotations

import logging
import os
import random
import shlex
import subprocess
import zlib
from dataclasses import dataclass

from . import expr as E
from .classify import DATA_REGS, REFUTED, SYSCALL_ARGS, UNCHECKED, VERIFIED, claim_holds
from .errors import OracleFailure
from .semantics import MachineState, interpret
from .symexec import INITIAL_MEM, symexec_gadget
from .x86 import MASK64

log = logging.getLogger(__name__)

CAN_PROVE, REFUTE_ONLY = "CanProve", "RefuteOnly"
SAT, UNSAT, UNKNOWN = "sat", "unsat", "unknown"
DEFAULT_TIMEOUT = 10.0
SOLVER_ENV = "ROPSMITH_SOLVER"


@dataclass
class OracleResult:
    status: str
    model: MachineState | None = None
    detail: str = ""


@dataclass
class VerificationResult:
    status: str                         # VERIFIED / REFUTED / UNCHECKED
    counterexample: MachineState | None = None
    detail: str = ""

    def __str__(self):
        return self.status + (f" ({self.detail})" if self.detail else "")


# ---------------------------------------------------------------------------
# postconditions

_OPS = {"+": E.add, "-": E.sub, "&": E.bvand, "|": E.bvor, "^": E.bvxor,
        "<<": E.shl, ">>": E.lshr, ">>a": E.ashr}


class _View:
    """Initial/final values of one symbolic run, inlined or in SSA form."""

    def __init__(self, run, ssa):
        self.run, self.ssa = run, ssa

    def init(self, r):
        return self.run.reg0(r)

    def final(self, r):
        if self.ssa:
            return self.run.final.regs.get(r) or self.run.reg0(r)
        return self.run.final_value(r)

    def mem0(self):
        return self.run.initial.mem

    def mem1(self):
        return self.run.final.mem if self.ssa else self.run.final_mem()


def postcondition(claim, view):
    """Boolean term that holds iff the claim's relation holds."""
    p = claim.param_dict
    g = claim.gtype
    w = p.get("width", 64)
    n = w // 8

    def val(src):
        if isinstance(src, str):
            t = view.init(src)
            return t if w == 64 else E.extract(w - 1, 0, t)
        return E.const(src, w)

    def dst_is(value):
        return E.eq(view.final(p["dst"]), E.zext_to(value, 64))

    def addr():
        return E.add(view.init(p["addr"]), E.const(p["disp"], 64))

    if g == "LoadConstG":
        rsp = E.add(view.init("rsp"), E.const(p["offset"], 64))
        return dst_is(E.read_bytes(view.mem0(), rsp, 8))
    if g == "SetConstG":
        return dst_is(E.const(p["value"], 64))
    if g == "MoveRegG":
        return dst_is(val(p["src"]))
    if g == "ArithmeticG":
        return dst_is(_OPS[p["op"]](val(p["src1"]), val(p["src2"])))
    if g == "LoadMemG":
        return dst_is(E.read_bytes(view.mem0(), addr(), n))
    if g == "ArithmeticLoadG":
        return dst_is(_OPS[p["op"]](val(p["dst"]), E.read_bytes(view.mem0(), addr(), n)))
    if g == "StoreMemG":
        return E.eq(E.read_bytes(view.mem1(), addr(), n), val(p["src"]))
    if g == "ArithmeticStoreG":
        a = addr()
        return E.eq(E.read_bytes(view.mem1(), a, n),
                    _OPS[p["op"]](E.read_bytes(view.mem0(), a, n), val(p["src"])))
    if g == "SyscallG":
        return E.and_(*[E.eq(view.final(r), view.init(r)) for r in SYSCALL_ARGS])
    if g == "StackPivotG":
        return E.eq(view.final("rsp"), E.add(view.init(p["src"]), E.const(p["disp"], 64)))
    if g == "NoOpG":
        return E.and_(*[E.eq(view.final(r), view.init(r)) for r in DATA_REGS])
    raise ValueError(f"unknown gadget type {g}")


@dataclass
class Problem:
    gadget: object
    claim: object
    run: object
    goal: E.Term          # inlined postcondition
    goal_ssa: E.Term      # postcondition over the SSA variables


def make_problem(g, claim, run=None):
    run = run or symexec_gadget(g)
    goal = postcondition(claim, _View(run, ssa=False))
    goal_ssa = postcondition(claim, _View(run, ssa=True))
    return Problem(g, claim, run, goal, goal_ssa)


# ---------------------------------------------------------------------------
# oracles

class SatOracle:
    capability = REFUTE_ONLY
    name = "oracle"

    def check(self, problem):       # pragma: no cover - interface
        raise NotImplementedError


class RewriteProver(SatOracle):
    """Proves a claim when normalization turns its postcondition into true."""

    capability = CAN_PROVE
    name = "rewrite"

    def check(self, problem):
        if problem.goal == E.TRUE:
            return OracleResult(UNSAT, detail="postcondition normalizes to true")
        if problem.goal == E.FALSE:
            return OracleResult(SAT, _first_state(problem), "postcondition normalizes to false")
        return OracleResult(UNKNOWN)


def _first_state(problem):
    return MachineState.random(0)


_SPECIAL = (0, 1, 2, MASK64, MASK64 - 1, 1 << 63, (1 << 63) - 1, 0xFFFFFFFF, 1 << 32, 0x80000000)


class RandomOracle(SatOracle):
    """Searches for a counterexample among biased random states plus the
    all-zero and all-ones boundary states.  Never proves anything."""

    capability = REFUTE_ONLY
    name = "random"

    def __init__(self, samples=4096, seed=0):
        self.samples = samples
        self.seed = seed

    def states(self, problem):
        regs = sorted(set(problem.run.initial_names.values()) - {"cf", "zf", "sf", "of"})
        flags = sorted(set(problem.run.initial_names.values()) & {"cf", "zf"})
        key = zlib.crc32(f"{problem.gadget.raw_bytes.hex()}:{problem.claim.key()}".encode())
        rng = random.Random(self.seed ^ key)
        yield MachineState.boundary(0)
        yield MachineState.boundary(-1)
        for i in range(self.samples):
            vals = {}
            for r in regs:
                u = rng.random()
                if u < 0.35:
                    vals[r] = rng.choice(_SPECIAL)
                elif u < 0.5:
                    vals[r] = rng.randrange(-64, 65) & MASK64
                elif u < 0.6 and vals:
                    vals[r] = rng.choice(list(vals.values()))
                else:
                    vals[r] = rng.getrandbits(64)
            fl = {f: rng.getrandbits(1) for f in flags}
            yield MachineState(regs=vals, flags=fl, rng_seed=(key << 20) + i)

    def check(self, problem):
        f = E.compile_terms([problem.goal])
        run = problem.run
        for st in self.states(problem):
            env = {INITIAL_MEM: E.ArrayValue(st.initial_byte)}
            for name, what in run.initial_names.items():
                env[name] = st.flag(what) if what in ("cf", "zf") else st.reg(what)
            if not f(env, None, None)[0]:
                return OracleResult(SAT, st, "random search")
        return OracleResult(UNKNOWN, detail=f"no counterexample in {self.samples} samples")


class LayeredOracle(SatOracle):
    """Asks each oracle in turn until one gives a definite answer."""

    name = "layered"

    def __init__(self, oracles):
        self.oracles = list(oracles)
        self.capability = CAN_PROVE if any(o.capability == CAN_PROVE for o in self.oracles) \
            else REFUTE_ONLY

    def check(self, problem):
        notes = []
        for o in self.oracles:
            try:
                res = o.check(problem)
            except OracleFailure as exc:
                notes.append(f"{o.name}: {exc}")
                continue
            if res.status == UNSAT and o.capability != CAN_PROVE:
                res = OracleResult(UNKNOWN, detail=f"{o.name} cannot prove")
            if res.status in (SAT, UNSAT):
                return res
            if res.detail:
                notes.append(f"{o.name}: {res.detail}")
        return OracleResult(UNKNOWN, detail="; ".join(notes))


# ---------------------------------------------------------------------------
# SMT-LIB

def _sort(width):
    if width == E.ARRAY:
        return "(Array (_ BitVec 64) (_ BitVec 8))"
    if width == E.BOOL:
        return "Bool"
    return f"(_ BitVec {width})"


def _memory_reads(problem):
    """Addresses (inlined) at which the goal reads the initial array."""
    out = []
    seen = set()
    for t in E.iter_subterms(problem.goal):
        if t.op != "select":
            continue
        arr = t.args[0]
        while arr.op == "store":
            arr = arr.args[0]
        if arr.op == "var" and arr.args[0] == INITIAL_MEM and t.args[1] not in seen:
            seen.add(t.args[1])
            out.append(t.args[1])
    return out


def smtlib_script(problem):
    """The SMT-LIB v2 script checking ``not B`` for ``problem``."""
    run = problem.run
    lines = ["(set-logic QF_ABV)", "(set-option :produce-models true)"]
    for name, width in run.variables().items():
        lines.append(f"(declare-const {name} {_sort(width)})")
    for v, e in run.formulas:
        lines.append(f"(assert (= {v.args[0]} {E.to_smt(e)}))")
    lines.append(f"(assert (not {E.to_smt(problem.goal_ssa)}))")
    lines.append("(check-sat)")
    inits = sorted(run.initial_names)
    if inits:
        lines.append(f"(get-value ({' '.join(inits)}))")
    addrs = _memory_reads(problem)
    if addrs:
        lines.append(f"(get-value ({' '.join(E.to_smt(a) for a in addrs)}))")
        lines.append(f"(get-value ({' '.join(f'(select {INITIAL_MEM} {E.to_smt(a)})' for a in addrs)}))")
    return "\n".join(lines) + "\n", inits, addrs


def _sexprs(text):
    """Parse a sequence of s-expressions into nested lists of atoms."""
    stack = [[]]
    tok = ""
    for ch in text:
        if ch in "() \n\t\r":
            if tok:
                stack[-1].append(tok)
                tok = ""
            if ch == "(":
                stack.append([])
            elif ch == ")":
                if len(stack) == 1:
                    raise OracleFailure("unbalanced solver output")
                done = stack.pop()
                stack[-1].append(done)
        else:
            tok += ch
    if tok:
        stack[-1].append(tok)
    return stack[0]


def _bv_value(x):
    if isinstance(x, str):
        if x.startswith("#x"):
            return int(x[2:], 16)
        if x.startswith("#b"):
            return int(x[2:], 2)
        if x in ("true", "false"):
            return int(x == "true")
    if isinstance(x, list) and len(x) == 3 and x[0] == "_" and x[1].startswith("bv"):
        return int(x[1][2:])
    raise OracleFailure(f"cannot read solver value {x!r}")


def solver_command(path=None):
    """Resolve the solver command from ``path`` or the environment."""
    path = path or os.environ.get(SOLVER_ENV)
    if not path:
        return None
    cmd = shlex.split(path)
    if len(cmd) == 1 and os.path.basename(cmd[0]).startswith("z3"):
        cmd += ["-in", "-smt2"]
    return cmd


class SmtLibOracle(SatOracle):
    """One solver process per query, script on stdin, answers on stdout."""

    capability = CAN_PROVE
    name = "smtlib"

    def __init__(self, command, timeout=DEFAULT_TIMEOUT):
        self.command = command if isinstance(command, list) else solver_command(command)
        if not self.command:
            raise ValueError("no solver command")
        self.timeout = timeout

    def check(self, problem):
        script, inits, addrs = smtlib_script(problem)
        try:
            proc = subprocess.run(self.command, input=script, capture_output=True, text=True,
                                  timeout=self.timeout)
        except subprocess.TimeoutExpired:
            return OracleResult(UNKNOWN, detail=f"solver timeout after {self.timeout}s")
        except OSError as exc:
            raise OracleFailure(f"cannot run solver: {exc}") from exc
        items = _sexprs(proc.stdout)
        if not items or items[0] not in (SAT, UNSAT, UNKNOWN):
            raise OracleFailure(f"unexpected solver output: {proc.stdout[:200]!r} {proc.stderr[:200]!r}")
        status = items[0]
        if status != SAT:
            return OracleResult(status)
        values = [x for x in items[1:] if isinstance(x, list) and x and x[0] != "error"]
        return OracleResult(SAT, self._model(problem, values, inits, addrs), "solver model")

    @staticmethod
    def _model(problem, values, inits, addrs):
        names = problem.run.initial_names
        regs, flags, mem = {}, {}, {}
        if inits:
            for name, v in values.pop(0):
                what = names[name]
                (flags if what in ("cf", "zf") else regs)[what] = _bv_value(v)
        if addrs:
            avals = [_bv_value(v) for _, v in values.pop(0)]
            bvals = [_bv_value(v) for _, v in values.pop(0)]
            mem = dict(zip(avals, bvals))
        return MachineState(regs=regs, flags=flags, rng_seed=0, backing=mem.get)


def default_oracle(solver=None, timeout=DEFAULT_TIMEOUT, samples=4096):
    """Rewrite prover, then the external solver when one is configured,
    then random refutation."""
    layers = [RewriteProver()]
    cmd = solver_command(solver)
    if cmd:
        layers.append(SmtLibOracle(cmd, timeout))
    layers.append(RandomOracle(samples))
    return LayeredOracle(layers)


# ---------------------------------------------------------------------------

def replay_violates(g, claim, state):
    """Concrete replay of a counterexample through the interpreter."""
    fin = interpret(g.instrs, state)
    return not claim_holds(claim, state, fin)


def check_claim(g, claim, oracle=None, run=None):
    """Verify ``claim`` for gadget ``g`` with ``oracle``."""
    oracle = oracle or default_oracle()
    problem = make_problem(g, claim, run)
    try:
        res = oracle.check(problem)
    except OracleFailure as exc:
        log.warning("%#x %s: %s", g.va, claim, exc)
        return VerificationResult(UNCHECKED, detail=str(exc))
    if res.status == UNSAT:
        if oracle.capability != CAN_PROVE:
            return VerificationResult(UNCHECKED, detail="oracle cannot prove")
        return VerificationResult(VERIFIED, detail=res.detail)
    if res.status == SAT:
        if res.model is not None and replay_violates(g, claim, res.model):
            return VerificationResult(REFUTED, res.model, res.detail)
        return VerificationResult(UNCHECKED, detail="model did not replay as a violation")
    return VerificationResult(UNCHECKED, detail=res.detail)


def verify_claims(g, claims, oracle=None):
    """Return ``claims`` with their verification state filled in."""
    oracle = oracle or default_oracle()
    run = symexec_gadget(g)
    out = []
    for c in claims:
        out.append(c.with_verification(check_claim(g, c, oracle, run).status))
    return out
