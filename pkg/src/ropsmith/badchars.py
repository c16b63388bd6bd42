"""Restricted bytes: value classification and synthesis of forbidden values.

A value to load is in one of five states: ``Z`` (zero), ``SI`` (small
integer), ``GC`` (no restricted byte), ``BC`` (holds a restricted byte)
or ``T`` (loaded).  Transitions:

1. SI -> T   a gadget that sets the register to exactly this constant
2. GC -> T   pop from the stack
3. Z  -> T   xor the register with itself (any constant-zero gadget)
4. SI <-> Z  repeated inc/dec starting from zero
5. Z/BC -> GC  and/or/shift of clean operands
6. BC -> GC  add/sub/xor of two clean operands
"""

from __future__ import annotations

import logging
import random
import zlib
from dataclasses import dataclass, field

from .classify import apply_op
from .errors import CompileError, NoTransitionAvailable, SplitNotFound
from .x86 import MASK64

log = logging.getLogger(__name__)

Z, SI, GC, BC, T = "Z", "SI", "GC", "BC", "T"
DEFAULT_SI_THRESHOLD = 64
DEFAULT_SPLIT_TRIES = 10_000
MAX_SYNTH_DEPTH = 2           # nested splits (an operand that itself needs a split)
PRINTABLE_ONLY = frozenset(range(0x00, 0x20)) | frozenset(range(0x7F, 0x100))

_BITWISE = ("&", "|", "<<", ">>", ">>a")
_ARITH = ("+", "-", "^")


def parse_bad_bytes(text):
    """``"00,0a,0d"`` -> frozenset({0, 10, 13}); ``"printable"`` selects the
    printable-only preset."""
    text = (text or "").strip()
    if not text:
        return frozenset()
    if text.lower() == "printable":
        return PRINTABLE_ONLY
    out = set()
    for part in text.split(","):
        part = part.strip().lower().removeprefix("0x")
        if not part:
            continue
        v = int(part, 16)
        if not 0 <= v <= 0xFF:
            raise ValueError(f"bad byte {part!r} out of range")
        out.add(v)
    return frozenset(out)


def _signed(v):
    v &= MASK64
    return v - (1 << 64) if v >> 63 else v


def is_clean(v, bad):
    return not any(b in bad for b in (v & MASK64).to_bytes(8, "little"))


def classify_value(v, bad, si_threshold=DEFAULT_SI_THRESHOLD):
    v &= MASK64
    if v == 0:
        return Z
    if abs(_signed(v)) <= si_threshold:
        return SI
    return GC if is_clean(v, bad) else BC


# ---------------------------------------------------------------------------
# operand search

def _good_bytes(bad):
    return [b for b in range(256) if b not in bad]


def _fill_high(x, nbytes, good, rng):
    """Randomise bytes ``nbytes..7`` of ``x`` with clean bytes."""
    for i in range(nbytes, 8):
        x |= rng.choice(good) << (8 * i)
    return x


def split_value(op, v, bad, width=64, tries=DEFAULT_SPLIT_TRIES, seed=0):
    """Find clean ``(b, c)`` with ``b op c == v`` (randomised, carry-aware).

    Returns None when nothing is found within ``tries`` attempts.
    """
    good = _good_bytes(bad)
    if not good:
        return None
    nbytes = width // 8
    if width < 64 and v >> width:
        return None
    rng = random.Random((seed << 8) ^ v ^ zlib.crc32(op.encode()) ^ width)
    vb = v.to_bytes(8, "little")
    for _ in range(tries):
        b = c = 0
        carry = 0
        ok = True
        for i in range(nbytes):
            vi = vb[i]
            for _pick in range(32):
                if op == "+":
                    bi = rng.choice(good)
                    ci = (vi - bi - carry) & 0xFF
                    nc = (bi + ci + carry) >> 8
                elif op == "-":
                    ci = rng.choice(good)
                    bi = (vi + ci + carry) & 0xFF
                    nc = (vi + ci + carry) >> 8
                elif op == "^":
                    bi = rng.choice(good)
                    ci = vi ^ bi
                    nc = 0
                elif op == "&":
                    bi = vi | (rng.getrandbits(8) & ~vi & 0xFF)
                    ci = vi | (rng.getrandbits(8) & ~vi & ~bi & 0xFF)
                    nc = 0
                elif op == "|":
                    bi = vi & rng.getrandbits(8)
                    ci = (vi & ~bi) | (bi & rng.getrandbits(8))
                    nc = 0
                else:
                    return None
                if bi not in bad and ci not in bad:
                    break
            else:
                ok = False
                break
            b |= bi << (8 * i)
            c |= ci << (8 * i)
            carry = nc
        if not ok:
            continue
        b, c = _fill_high(b, nbytes, good, rng), _fill_high(c, nbytes, good, rng)
        if apply_op(op, b, c, width) == v and is_clean(b, bad) and is_clean(c, bad):
            return b, c
    return None


def solve_imm(op, k, v, bad, width=64, tries=DEFAULT_SPLIT_TRIES, seed=0):
    """Clean ``b`` with ``b op k == v`` for a fixed immediate ``k``."""
    good = _good_bytes(bad)
    m = (1 << width) - 1
    if v & ~m or not good:
        return None
    rng = random.Random((seed << 8) ^ v ^ k ^ zlib.crc32(op.encode()))
    k &= m
    for _ in range(tries):
        r = rng.getrandbits(64)
        if op == "+":
            b = (v - k) & m
        elif op == "-":
            b = (v + k) & m
        elif op == "^":
            b = v ^ k
        elif op == "&":
            if v & ~k & m:
                return None
            b = v | (r & ~k & m)
        elif op == "|":
            if k & ~v & m:
                return None
            b = (v & ~k) | (r & k & m)
        elif op in ("<<", ">>", ">>a"):
            s = k & (63 if width == 64 else 31)
            if op == "<<":
                b = (v >> s) | ((r << (width - s)) & m) if s else v
            else:
                b = ((v << s) & m) | (r & ((1 << s) - 1))
        else:
            return None
        if width < 64:
            b = _fill_high(b & m, width // 8, good, rng)
        if apply_op(op, b, k, width) == v and is_clean(b, bad):
            return b
        if op in ("+", "-", "^"):
            return None         # deterministic: one candidate only
    return None


# ---------------------------------------------------------------------------
# synthesis

@dataclass
class Synthesis:
    dst: str
    value: int
    chain: object
    slot_values: list = field(default_factory=list)
    transitions: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.chain, self.slot_values))


def _compiler(catalog, bad):
    from .chaincomp import ChainCompiler
    if isinstance(catalog, ChainCompiler):
        if catalog.bad != frozenset(bad):
            raise ValueError("compiler restricted bytes differ from the requested set")
        return catalog
    return ChainCompiler(catalog, bad)


class _Synth:
    def __init__(self, comp, dst, v, bad, threshold, seed, tries):
        from .chaincomp import Link
        self.Link = Link
        self.comp, self.dst, self.v, self.bad = comp, dst, v & MASK64, frozenset(bad)
        self.threshold, self.seed, self.tries = threshold, seed, tries
        self.saw_form = False
        self.split_failed = False

    def finish(self, links, transitions):
        comp = self.comp
        bound = comp._fold(links, {self.dst: (self.v, MASK64)})
        if bound is None:
            return None
        ch = comp.chain(bound, transitions=list(transitions))
        if not comp.emulate_goals(ch, {self.dst: (self.v, MASK64)}):
            return None
        slots = [v for l in bound for _, v in l.bindings]
        return Synthesis(self.dst, self.v, ch, slots, list(transitions))

    def routes(self, reg):
        """Move paths from ``reg`` into the destination ([] when equal)."""
        if reg == self.dst:
            return [[]]
        try:
            path = self.comp.move_path(reg, self.dst)
        except CompileError:
            return []
        return [[self.Link(r, role=f"move -> {self.dst}") for r in path]] if all(
            r.pure for r in path) else []

    # -- transitions
    def const(self):
        out = []
        for ref, e in self.comp.entries("SetConstG", value=self.v):
            for mv in self.routes(e["dst"]):
                t = 3 if self.v == 0 else 1
                out.append(([self.Link(ref, role=f"{e['dst']} = {self.v:#x}")] + mv, [t]))
        return out

    def pop(self):
        if not is_clean(self.v, self.bad):
            return []
        try:
            links = self.comp._direct_unit({self.dst})
        except CompileError:
            return []
        return [(links, [2])]

    def small(self):
        v = _signed(self.v)
        if self.v == 0 or abs(v) > self.threshold:
            return []
        steps = [(ref, e) for ref, e in self.comp.entries("ArithmeticG", dst=self.dst, src1=self.dst,
                                                           op="+", width=64)
                 if e["src2"] == (1 if v > 0 else MASK64)]
        zeros = [(ref, e) for ref, e in self.comp.entries("SetConstG", dst=self.dst, value=0)]
        if not steps or not zeros:
            return []
        self.saw_form = True
        zref, sref = zeros[0][0], steps[0][0]
        links = [self.Link(zref, role=f"{self.dst} = 0")]
        links += [self.Link(sref, role="inc" if v > 0 else "dec") for _ in range(abs(v))]
        return [(links, [3, 4])]

    def splits(self, ops):
        out = []
        for ref, e in self.comp.entries("ArithmeticG"):
            op, d, x, y, w = e["op"], e["dst"], e["src1"], e["src2"], e["width"]
            if op not in ops:
                continue
            moves = self.routes(d)
            if not moves:
                continue
            t = 5 if op in _BITWISE else 6
            self.saw_form = True
            if isinstance(y, int):
                b = solve_imm(op, y, self.v, self.bad, w, self.tries, self.seed)
                if b is None:
                    self.split_failed = True
                    continue
                goals = {x: b}
            elif x != y:
                pair = split_value(op, self.v, self.bad, w, self.tries, self.seed)
                if pair is None:
                    self.split_failed = True
                    continue
                goals = {x: pair[0], y: pair[1]}
            else:
                continue
            try:
                setup = self.comp.solve_regs(goals)
            except CompileError:
                continue
            ts = [2, t] if self.v else [5]
            out.append((setup + [self.Link(ref, role=f"{d} = {x} {op} {y}")] + moves[0], ts))
        return out

    def plan(self):
        state = classify_value(self.v, self.bad, self.threshold)
        arith = lambda: self.splits(_ARITH)      # noqa: E731
        bitwise = lambda: self.splits(_BITWISE)  # noqa: E731
        if state == Z:
            order = [self.const, self.pop, bitwise, arith]
        elif state == SI:
            order = [self.const, self.pop, arith, bitwise, self.small]
        elif state == GC:
            order = [self.pop, self.const, arith, bitwise]
        else:
            order = [self.const, arith, bitwise]
        for strategy in order:
            for links, ts in strategy():
                got = self.finish(links, ts)
                if got is not None:
                    return got
        if self.split_failed:
            raise SplitNotFound(f"no clean operands found for {self.dst} = {self.v:#x}")
        raise NoTransitionAvailable(f"no transition reaches {self.dst} = {self.v:#x} from "
                                    f"state {state}")


def synthesize_load(catalog, dst, v, bad, si_threshold=DEFAULT_SI_THRESHOLD, seed=0x5EED,
                    tries=DEFAULT_SPLIT_TRIES):
    """A sub-chain leaving exactly ``v`` in ``dst`` while every emitted
    byte avoids ``bad``.  Returns a :class:`Synthesis` (unpacks as
    ``(chain, slot_values)``)."""
    comp = _compiler(catalog, bad)
    key = (dst, v & MASK64, si_threshold)
    cache = comp.__dict__.setdefault("_synth_cache", {})
    hit = cache.get(key)
    if isinstance(hit, CompileError):
        raise hit
    if hit is None:
        depth = comp.__dict__.get("_synth_depth", 0)
        if depth >= MAX_SYNTH_DEPTH:
            raise NoTransitionAvailable(f"{dst} = {v:#x}: operand nesting too deep")
        comp._synth_depth = depth + 1
        try:
            hit = _Synth(comp, dst, v, bad, si_threshold, seed, tries).plan()
        except CompileError as exc:
            if depth == 0:
                cache[key] = exc
            raise
        finally:
            comp._synth_depth = depth
        cache[key] = hit
    return hit


__all__ = ["Z", "SI", "GC", "BC", "T", "PRINTABLE_ONLY", "classify_value", "parse_bad_bytes",
           "split_value", "solve_imm", "synthesize_load", "Synthesis", "is_clean"]
