"""Chain compilation: register-initialization search, MOV-graph paths,
clobber-aware composition of units and stack layout emission.

Chains are composed symbolically: every gadget summary is instantiated at
its frame's position in the chain, so stack slots become chain-wide slots
and each register's final value is an expression over the initial
registers and those slots.  A register is controlled when that
expression is a single slot no other register also holds.
"""

from __future__ import annotations

import itertools
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property

from . import expr as E
from .classify import DATA_REGS
from .errors import (BadcharUnavoidable, CompileError, MissingGadget, NoPath, NonComposable,
                     RopError, Unsatisfiable)
from .elf import Region
from .payload import CALL_FUNCTION, MEM_WRITE, SET_REGS, SYSCALL, PayloadSpec
from .summary import summarize
from .x86 import MASK64

log = logging.getLogger(__name__)

CHAIN_REGS = DATA_REGS                       # every GPR but rsp
FLAG_KEYS = ("cf", "zf")
_KEY_REGS = CHAIN_REGS + FLAG_KEYS
_STATE_KEYS = _KEY_REGS + ("rsp",)

DEFAULT_MAX_LEN = 6
DEFAULT_BUDGET = 200_000
MAX_ORDERS = 720
FILLER_BYTES = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ"
HALT_BYTES = bytes([0xEE, 0xDD, 0xBB, 0xAB, 0x99, 0x77]) + FILLER_BYTES


def has_bad_byte(value, bad, nbytes=8):
    return bool(bad) and any(b in bad for b in (value & MASK64).to_bytes(8, "little")[:nbytes])


@dataclass(frozen=True)
class Hole:
    """A symbolic slot value bound later (carried in the layout symbol table)."""

    tag: str


class GadgetRef:
    """One gadget of the catalog, with every claim recorded for it."""

    def __init__(self, entries):
        self.entries = tuple(entries)
        e = self.entries[0]
        self.va, self.raw, self.frame, self.text = e.va, e.raw, e.frame, e.text

    def __repr__(self):
        return f"GadgetRef({self.va:#x}: {self.text})"

    @property
    def gadget(self):
        return self.entries[0].gadget

    @property
    def frame_size(self):
        return self.frame.frame_size

    @property
    def next_offset(self):
        return self.frame.next_addr_offset if self.frame.next_kind == "stack" else None

    def claims(self, gtype):
        return [e for e in self.entries if e.gtype == gtype]

    @cached_property
    def summary(self):
        try:
            return summarize(self.gadget)
        except RopError as exc:
            log.debug("%#x: no summary: %s", self.va, exc)
            return None

    @cached_property
    def composable(self):
        """Summary usable for composition: constant frame, register effects
        free of memory loads, stack reads confined to the frame."""
        s, f = self.summary, self.frame
        if s is None or f is None or not f.constant or s.rsp_delta != f.frame_size:
            return False
        if any(k < 0 or k + 8 > f.frame_size for k in s.slots_read()):
            return False
        for r in _STATE_KEYS:
            if any(x.op in ("load", "select", "store") for x in E.iter_subterms(s.post[r])):
                return False
        if f.next_kind == "stack" and s.post["rip"] != E.slot(f.next_addr_offset):
            return False
        return True

    @cached_property
    def pure(self):
        return self.composable and self.frame.chainable and self.summary.pure()

    @cached_property
    def changed(self):
        post = self.summary.post
        return frozenset(r for r in CHAIN_REGS if post[r] != E.var(r))

    @cached_property
    def sources(self):
        out = set()
        for r in self.changed:
            out |= {n for n in E.free_vars(self.summary.post[r]) if n in CHAIN_REGS}
        return frozenset(out)

    def summary_key(self):
        post = self.summary.post
        return (self.frame_size, self.next_offset, tuple(post[r] for r in _KEY_REGS))


@dataclass(frozen=True)
class Link:
    ref: GadgetRef
    bindings: tuple = ()            # ((frame offset, int | Hole), ...)
    role: str = ""

    @property
    def binding_map(self):
        return dict(self.bindings)

    def bind(self, offset, value):
        b = dict(self.bindings)
        b[offset] = value
        return replace(self, bindings=tuple(sorted(b.items())))


@dataclass
class Chain:
    links: list = field(default_factory=list)
    final_target: int | None = None      # next address after the last link
    bad_bytes: frozenset = frozenset()
    filler: int = 0x41
    halt_va: int | None = None
    payload: PayloadSpec | None = None
    transitions: list = field(default_factory=list)
    assumed: list = field(default_factory=list)     # [(addr, bytes)] relied on, not written

    def __len__(self):
        return len(self.links)

    def __iter__(self):
        return iter(self.links)

    @property
    def gadgets(self):
        return [l.ref for l in self.links]

    def offsets(self):
        """Chain-wide start offset of each frame (0 = first frame)."""
        out, c = [], 0
        for l in self.links:
            out.append(c)
            c += l.ref.frame_size
        return out

    @property
    def clobbers(self):
        out = set()
        for l in self.links:
            out |= l.ref.changed
        return frozenset(out)

    def extend(self, other):
        self.links = self.links + list(other.links)
        self.transitions += other.transitions
        self.assumed += other.assumed
        return self

    def describe(self):
        lines = []
        for l, off in zip(self.links, self.offsets()):
            b = ", ".join(f"+{k:#x}={v:#x}" if isinstance(v, int) else f"+{k:#x}={v.tag}"
                          for k, v in l.bindings)
            lines.append(f"{l.ref.va:#x}  {l.ref.text}" + (f"   [{b}]" if b else "")
                         + (f"   ; {l.role}" if l.role else ""))
        return lines


# ---------------------------------------------------------------------------
# composition

def initial_state():
    st = {r: E.var(r, 64) for r in CHAIN_REGS}
    st.update({f: E.var(f, 1) for f in FLAG_KEYS})
    st["rsp"] = E.var("rsp", 64)
    return st


def marker(i):
    return E.var(f"_next{i}", 64)


def apply_gadget(state, ref, base, index):
    """State after running ``ref`` whose frame starts at chain offset ``base``."""
    if not ref.composable:
        raise NonComposable(f"{ref.va:#x} ({ref.text}) cannot be composed")
    nxt = ref.next_offset

    def leaf(t):
        if t.op == "var":
            return state.get(t.args[0])
        if t.op == "slot":
            k = t.args[0]
            return marker(index) if k == nxt else E.slot(base + k)
        return None

    memo = {}
    post = ref.summary.post
    return {r: E.substitute(post[r], leaf, memo) for r in _STATE_KEYS}


def compose(refs):
    state, base = initial_state(), 0
    for i, ref in enumerate(refs):
        state = apply_gadget(state, ref, base, i)
        base += ref.frame_size
    return state


def controlled(state):
    slots = {}
    for r in CHAIN_REGS:
        t = state[r]
        if t.op == "slot":
            slots.setdefault(t.args[0], []).append(r)
    return frozenset(rs[0] for rs in slots.values() if len(rs) == 1)


def controlled_registers(chain, catalog=None):
    """Registers whose final value is a distinct stack slot of ``chain``."""
    refs = chain.gadgets if isinstance(chain, Chain) else [getattr(x, "ref", x) for x in chain]
    for r in refs:
        if not r.frame or not r.frame.chainable:
            raise NonComposable(f"{r.va:#x}: next address does not come from the stack")
    return controlled(compose(refs))


def canonical_key(state):
    """State identity up to renaming of slots and next-address markers."""
    names = {}
    for r in _KEY_REGS:
        for x in E.iter_subterms(state[r]):
            if x.op == "slot":
                names.setdefault(("s", x.args[0]), len(names))
            elif x.op == "var" and x.args[0].startswith("_next"):
                names.setdefault(("m", x.args[0]), len(names))

    def leaf(t):
        if t.op == "slot":
            return E.slot(names[("s", t.args[0])])
        if t.op == "var" and t.args[0].startswith("_next"):
            return E.var(f"_m{names[('m', t.args[0])]}", 64)
        return None

    memo = {}
    return tuple(E.substitute(state[r], leaf, memo) for r in _KEY_REGS)


# ---------------------------------------------------------------------------
# the compiler

class _EntryImage:
    """Gadget bytes of a catalog arranged as an image the emulator can run."""

    def __init__(self, refs):
        mem = {}
        for r in refs:
            for i, b in enumerate(r.raw):
                mem[r.va + i] = b
        regions, run = [], []
        for va in sorted(mem):
            if run and va != run[0] + len(run[1]):
                regions.append(Region(run[0], bytes(run[1]), True, False))
                run = []
            if not run:
                run = [va, bytearray()]
            run[1].append(mem[va])
        if run:
            regions.append(Region(run[0], bytes(run[1]), True, False))
        self.regions = tuple(regions)
        self.path = "<catalog>"


def _pick_byte(candidates, bad, avoid=()):
    for b in candidates:
        if b not in bad and b not in avoid:
            return b
    for b in range(1, 256):
        if b not in bad and b not in avoid:
            return b
    raise BadcharUnavoidable("every byte value is restricted")


def halt_sentinel(bad, regions=()):
    """Address the emulator treats as a clean end of chain: a repeated clean
    byte that maps to no region."""
    for b in HALT_BYTES:
        if b in bad:
            continue
        va = int.from_bytes(bytes([b]) * 8, "little")
        if not any(r.contains(va) for r in regions):
            return va
    raise BadcharUnavoidable("no clean halt address available")


class ChainCompiler:
    """Compiles payloads over the compile-eligible entries of a catalog."""

    def __init__(self, catalog, bad_bytes=None, platform=None, image=None, max_len=DEFAULT_MAX_LEN,
                 budget=DEFAULT_BUDGET, emu_cfg=None, validate=True, si_threshold=64,
                 force_fsm=False, seed=0x5EED):
        if bad_bytes is None:
            bad_bytes = catalog.bad_bytes or ()
        self.bad = frozenset(bad_bytes)
        self.platform = platform
        self.max_len = max_len
        self.budget = budget
        self.validate = validate
        self.si_threshold = si_threshold
        self.force_fsm = force_fsm
        self.seed = seed
        entries = catalog.eligible() if hasattr(catalog, "eligible") else list(catalog)
        groups = {}
        for e in entries:
            groups.setdefault((e.va, e.raw), []).append(e)
        all_refs = [GadgetRef(es) for es in groups.values()]
        self.refs = [r for r in all_refs if not has_bad_byte(r.va, self.bad)]
        self.dropped = [r for r in all_refs if has_bad_byte(r.va, self.bad)]
        if self.dropped:
            log.info("%d gadgets unusable: address holds a restricted byte", len(self.dropped))
        self.image = image if image is not None else _EntryImage(all_refs)
        self.filler = _pick_byte(FILLER_BYTES, self.bad)
        self.halt_va = self._pick_halt()
        self.emu_cfg = emu_cfg
        self._setreg_cache = {}
        self._emu = None

    # -- helpers
    @property
    def filler_word(self):
        return int.from_bytes(bytes([self.filler]) * 8, "little")

    def _pick_halt(self):
        return halt_sentinel(self.bad, getattr(self.image, "regions", ()))

    def entries(self, gtype, **params):
        out = []
        for ref in self.refs:
            for e in ref.claims(gtype):
                p = dict(e.params)
                if all(p.get(k) == v for k, v in params.items()):
                    out.append((ref, e))
        return out

    def require(self, gtype, found, detail=""):
        if found:
            return found
        if any(r.claims(gtype) for r in self.dropped):
            raise BadcharUnavoidable(f"every {gtype} gadget address holds a restricted byte")
        raise MissingGadget(gtype, detail)

    def chain(self, links=(), final_target=None, **kw):
        return Chain(list(links), final_target if final_target is not None else self.halt_va,
                     self.bad, self.filler, self.halt_va, **kw)

    # -- shortest register-setting search
    def setreg_pool(self, target=None):
        pool = [r for r in self.refs if r.pure]
        if target:
            need = set(target)
            while True:
                grown = set(need)
                for r in pool:
                    if r.changed & need:
                        grown |= r.sources
                if grown == need:
                    break
                need = grown
            pool = [r for r in pool if r.changed & need]
        seen, out = set(), []
        for r in pool:
            k = r.summary_key()
            if k not in seen:
                seen.add(k)
                out.append(r)
        return out

    def setreg_map(self, target=None, max_len=None, budget=None):
        """Breadth-first search over chains; maps each controlled register
        set to the first (hence shortest) chain achieving it.  With a
        target the search stops at the first chain covering it."""
        target = frozenset(target) if target else None
        max_len = self.max_len if max_len is None else max_len
        budget = self.budget if budget is None else budget
        pool = self.setreg_pool(target)
        start = initial_state()
        seen = {canonical_key(start)}
        best = {}
        frontier = [((), start, 0)]
        for _ in range(max_len):
            nxt = []
            for chain, state, base in frontier:
                for ref in pool:
                    s2 = apply_gadget(state, ref, base, len(chain))
                    key = canonical_key(s2)
                    if key in seen:
                        continue
                    seen.add(key)
                    ch = chain + (ref,)
                    cs = controlled(s2)
                    if cs and cs not in best:
                        best[cs] = ch
                        if target is not None and target <= cs:
                            return best
                    nxt.append((ch, s2, base + ref.frame_size))
                    if len(seen) >= budget:
                        log.warning("register search stopped after %d states", len(seen))
                        return best
            frontier = nxt
            if not frontier:
                break
        return best

    def covering_chain(self, target):
        """Shortest chain controlling every register of ``target``."""
        target = frozenset(target)
        hit = self._setreg_cache.get(target)
        if hit is None:
            best = self.setreg_map(target)
            cands = [ch for cs, ch in best.items() if target <= cs]
            hit = min(cands, key=len) if cands else False
            self._setreg_cache[target] = hit
        if hit is False:
            if not any(r.claims("LoadConstG") for r in self.refs + self.dropped):
                raise MissingGadget("LoadConstG", "no gadget loads a register from the stack")
            if not any(r.claims("LoadConstG") for r in self.refs):
                raise BadcharUnavoidable("every LoadConstG address holds a restricted byte")
            raise Unsatisfiable(target)
        return hit

    # -- MOV graph
    def move_edges(self, width=64):
        edges = {}
        for ref, e in self.entries("MoveRegG"):
            if width is not None and e["width"] != width:
                continue
            edges.setdefault(e["src"], []).append((e["dst"], ref))
        return edges

    def move_path(self, src, dst, max_len=4, width=64):
        if src == dst:
            return []
        edges = self.move_edges(width)
        prev = {src: None}
        q = deque([(src, 0)])
        while q:
            r, d = q.popleft()
            if d >= max_len:
                continue
            for nd, ref in edges.get(r, ()):
                if nd in prev:
                    continue
                prev[nd] = (r, ref)
                if nd == dst:
                    path = []
                    cur = nd
                    while prev[cur] is not None:
                        p, pref = prev[cur]
                        path.append(pref)
                        cur = p
                    return path[::-1]
                q.append((nd, d + 1))
        raise NoPath(f"no MOV path {src} -> {dst}")

    # -- goal binding
    def _fold(self, links, goals, final_target=None, strict_bad=True):
        """Bind the slots that realise ``goals`` ({reg: (value, mask)}) at the
        end of ``links``; returns the bound links or None."""
        refs = [l.ref for l in links]
        try:
            state = compose(refs)
        except NonComposable:
            return None
        offs, c = [], 0
        for r in refs:
            offs.append(c)
            c += r.frame_size
        binds = {}
        for l, base in zip(links, offs):
            for k, v in l.bindings:
                binds[base + k] = v
        marks = {f"_next{i}": E.const(refs[i + 1].va, 64) for i in range(len(refs) - 1)}
        if final_target is not None and refs:
            marks[f"_next{len(refs) - 1}"] = E.const(final_target, 64)

        def partial(t):
            def leaf(x):
                if x.op == "slot" and x.args[0] in binds:
                    return E.const(binds[x.args[0]], 64)
                if x.op == "var":
                    return marks.get(x.args[0])
                return None
            return E.substitute(t, leaf)

        for r, (want, _mask) in goals.items():
            e = partial(state[r])
            if e.op == "slot":
                if strict_bad and has_bad_byte(want, self.bad):
                    return None
                binds[e.args[0]] = want
        fill = self.filler_word

        def full(x):
            if x.op == "slot":
                return E.const(binds.get(x.args[0], fill), 64)
            if x.op == "var":
                return marks.get(x.args[0])
            return None

        memo = {}
        for r, (want, mask) in goals.items():
            e = E.substitute(state[r], full, memo)
            if not e.is_const() or (e.value ^ want) & mask:
                return None
        out = []
        for l, base, ref in zip(links, offs, refs):
            local = {k - base: v for k, v in binds.items() if base <= k < base + ref.frame_size}
            out.append(replace(l, bindings=tuple(sorted(local.items()))))
        return out

    # -- validation by emulation
    @property
    def emulator(self):
        if self._emu is None:
            from .chainemu import EmuConfig, Emulator
            cfg = self.emu_cfg or EmuConfig(seeds=(1, 2), record_memory=False)
            self._emu = Emulator(self.image, cfg)
        return self._emu

    def emulate_goals(self, chain, goals, writes=(), trap=False):
        """Run ``chain`` under the validation seeds and compare registers
        (masked) and memory."""
        if not self.validate:
            return True
        try:
            layout = emit_stack(chain)
        except BadcharUnavoidable:
            return False
        from .chainemu import HALT, SYSCALL_EVENT
        for res in self.emulator.run_all(layout):
            term = res.terminal
            if term is None:
                return False
            if trap:
                if term.kind != SYSCALL_EVENT:
                    return False
                values = dict(term.regs)
            else:
                if term.kind != HALT or term.va != (chain.final_target if chain.final_target
                                                    is not None else chain.halt_va):
                    return False
                values = res.state.snapshot()
            if any((values[r] ^ v) & m for r, (v, m) in goals.items()):
                return False
            for addr, data in writes:
                if bytes(res.state.read_byte(addr + i) for i in range(len(data))) != data:
                    return False
        return True

    # -- units
    def _direct_unit(self, regs):
        ch = self.covering_chain(regs)
        return [Link(ref, role="set " + ",".join(sorted(regs))) for ref in ch]

    def _move_units(self, dst):
        """Load some register, then move it into ``dst``."""
        edges = self.move_edges()
        srcs = [s for s in edges if s != dst]
        out = []
        for src in sorted(srcs):
            try:
                path = self.move_path(src, dst)
                loader = self.covering_chain({src})
            except (NoPath, CompileError):
                continue
            if not all(r.pure for r in path):
                continue
            out.append([Link(ref, role=f"set {src}") for ref in loader]
                       + [Link(ref, role=f"move -> {dst}") for ref in path])
        out.sort(key=len)
        return out

    def _synth_unit(self, reg, value, mask=MASK64):
        from .badchars import synthesize_load
        syn = synthesize_load(self, reg, value, self.bad, si_threshold=self.si_threshold,
                              seed=self.seed)
        return syn

    def _unit_candidates(self, reg, value, mask):
        """Alternatives for setting one register, best first."""
        good = not has_bad_byte(value, self.bad)
        out = []
        if good:
            try:
                out.append(("direct", self._direct_unit({reg}), []))
            except CompileError:
                pass
            out += [("move", u, []) for u in self._move_units(reg)[:3]]
        try:
            syn = self._synth_unit(reg, value, mask)
            out.append(("synth", list(syn.chain.links), syn.transitions))
        except CompileError as exc:
            log.debug("synthesis of %s=%#x failed: %s", reg, value, exc)
        return out

    @staticmethod
    def _order(units):
        """Topological order: a unit that clobbers another's registers runs first."""
        n = len(units)
        changed = [frozenset().union(*(l.ref.changed for l in u[1])) for u in units]
        after = {i: set() for i in range(n)}     # i must run after the set
        for i in range(n):
            for j in range(n):
                if i != j and changed[j] & units[i][0]:
                    after[i].add(j)
        order, done = [], set()
        while len(order) < n:
            ready = [i for i in range(n) if i not in done and after[i] <= done]
            if not ready:
                ready = [min(i for i in range(n) if i not in done)]
            order.append(ready[0])
            done.add(ready[0])
        return [units[i] for i in order]

    def _arrangements(self, units):
        first = self._order(units)
        yield first
        for k, perm in enumerate(itertools.permutations(units)):
            if k >= MAX_ORDERS:
                return
            if list(perm) != first:
                yield list(perm)

    def solve_regs(self, goals, tail=(), final_target=None, trap=False):
        """Links setting ``goals`` ({reg: (value, mask)}) as seen after the
        ``tail`` links run (e.g. a syscall gadget)."""
        norm = {}
        for r, vm in goals.items():
            v, m = vm if isinstance(vm, tuple) else (vm, MASK64)
            norm[r] = (v & MASK64, m)
        goals = norm
        tail = list(tail)
        final_target = final_target if final_target is not None else (None if trap else self.halt_va)
        if not goals:
            return tail

        def attempt(units):
            for arr in self._arrangements(units):
                links = [l for _, u, _ in arr for l in u] + tail
                bound = self._fold(links, goals, final_target)
                if bound is None:
                    continue
                ch = self.chain(bound, final_target)
                if self.emulate_goals(ch, goals, trap=trap):
                    return bound, [t for *_, ts in arr for t in ts]
            return None

        good = {r for r, (v, _) in goals.items() if not has_bad_byte(v, self.bad)}
        bad = [r for r in goals if r not in good]
        # one search for the plain registers, synthesis for the rest
        if good:
            try:
                combined = [(frozenset(good), self._direct_unit(good), [])]
            except CompileError:
                combined = None
        else:
            combined = []
        if combined is not None:
            synth = []
            for r in sorted(bad):
                try:
                    syn = self._synth_unit(r, *goals[r])
                except CompileError:
                    synth = None
                    break
                synth.append((frozenset({r}), list(syn.chain.links), syn.transitions))
            if synth is not None:
                got = attempt(combined + synth)
                if got:
                    return self._finish(*got)

        # one unit per register, trying alternatives in preference order
        cands = {}
        for r in sorted(goals):
            cs = self._unit_candidates(r, *goals[r])
            if not cs:
                self._no_unit(r, goals[r][0])
            cands[r] = cs
        regs = sorted(goals)
        depth = max(len(c) for c in cands.values())
        tried = set()
        for level in range(depth):
            for r in regs:
                pick = {x: cands[x][min(level if x == r else 0, len(cands[x]) - 1)] for x in regs}
                key = tuple(id(pick[x][1]) for x in regs)
                if key in tried:
                    continue
                tried.add(key)
                units = [(frozenset({x}), pick[x][1], pick[x][2]) for x in regs]
                got = attempt(units)
                if got:
                    return self._finish(*got)
        raise Unsatisfiable(frozenset(goals), "no clobber-free ordering of the register loads")

    def _finish(self, links, transitions):
        self._last_transitions = transitions
        return links

    def _no_unit(self, reg, value):
        if not any(r.claims("LoadConstG") for r in self.refs):
            self.require("LoadConstG", [], f"nothing can set {reg}")
        raise Unsatisfiable({reg}, f"no way to materialise {value:#x}")

    # -- memory writes
    def _store_candidates(self):
        out = []
        for ref, e in self.entries("StoreMemG"):
            if isinstance(e["src"], str) and e["src"] != e["addr"] and e["width"] in (64, 32):
                out.append((ref, e))
        out.sort(key=lambda p: (-p[1]["width"], p[1].order_key()))
        return out

    def _words(self, addr, data, width):
        """Split ``data`` into store-sized pieces; returns ([(addr, bytes)], assumed)."""
        n = width // 8
        assumed = []
        if 0 in self.bad and not self.force_fsm and data.endswith(b"\0") and data.rstrip(b"\0"):
            body = data.rstrip(b"\0")
            assumed.append((addr + len(body), data[len(body):]))
            if len(body) < n:
                pad = n - len(body)
                addr, body = addr - pad, bytes([self.filler]) * pad + body
            data = body
        words = []
        if len(data) >= n:
            for i in range(0, len(data), n):
                start = min(i, len(data) - n)
                words.append((addr + start, data[start:start + n]))
        else:
            words.append((addr, data + b"\0" * (n - len(data))))
        return words, assumed

    def _store_links(self, addr, word, ref, e):
        n = e["width"] // 8
        value = int.from_bytes(word, "little")
        mask = (1 << (8 * n)) - 1
        if n < 8:
            value |= self.filler_word & ~mask & MASK64
        goals = {e["addr"]: ((addr - e["disp"]) & MASK64, MASK64), e["src"]: (value, mask)}
        if e["addr"] == e["src"]:
            return None
        tail = Link(ref, role=f"store {e['width']}-bit")
        links = self.solve_regs(goals)
        return links + [tail]

    def compile_write(self, addr, data):
        """Links writing ``data`` at ``addr``; returns (links, written, assumed)."""
        stores = self._store_candidates()
        errors = []
        for ref, e in stores:
            words, assumed = self._words(addr, bytes(data), e["width"])
            try:
                links = []
                for a, w in words:
                    links += self._store_links(a, w, ref, e)
            except CompileError as exc:
                errors.append(exc)
                continue
            ch = self.chain(links)
            if self.emulate_goals(ch, {}, writes=words):
                return links, words, assumed
        got = self._write_by_arith(addr, bytes(data))
        if got is not None:
            return got
        if errors:
            raise errors[0]
        self.require("StoreMemG", [], "no gadget stores a register to memory")
        raise Unsatisfiable({"memory"}, "no store gadget can be driven")

    def _write_by_arith(self, addr, data):
        """Zeroing store followed by an add/or/xor into memory."""
        zeros = [(ref, e) for ref, e in self.entries("StoreMemG")
                 if e["src"] == 0 and e["width"] == 64]
        ariths = [(ref, e) for ref, e in self.entries("ArithmeticStoreG")
                  if e["op"] in ("+", "|", "^") and e["width"] == 64 and e["src"] != e["addr"]]
        for (zref, ze), (aref, ae) in itertools.product(zeros, ariths):
            words, assumed = self._words(addr, data, 64)
            try:
                links = []
                for a, w in words:
                    v = int.from_bytes(w, "little")
                    links += self.solve_regs({ze["addr"]: (a - ze["disp"]) & MASK64})
                    links.append(Link(zref, role="zero store"))
                    links += self.solve_regs({ae["addr"]: (a - ae["disp"]) & MASK64, ae["src"]: v})
                    links.append(Link(aref, role=f"store via {ae['op']}="))
            except CompileError:
                continue
            if self.emulate_goals(self.chain(links), {}, writes=words):
                return links, words, assumed
        return None

    # -- payloads
    def compile(self, payload):
        if payload.bad_bytes and payload.bad_bytes != self.bad:
            raise ValueError("payload restricted bytes differ from the compiler's")
        links, transitions, assumed, written = [], [], [], []
        for addr, data in payload.writes:
            ls, words, asm = self.compile_write(addr, data)
            links += ls
            written += words
            assumed += asm
        goals = payload.register_goals()
        self._last_transitions = []
        if payload.kind in (SET_REGS, MEM_WRITE):
            links += self.solve_regs(goals)
            final = self.halt_va
        elif payload.kind == CALL_FUNCTION:
            links += self.solve_regs(goals, final_target=payload.target)
            final = payload.target
        else:
            cands = self.require("SyscallG", [(ref, e) for ref, e in self.entries("SyscallG")
                                             if ref.frame and ref.frame.next_kind == "trap"])
            errors = []
            for ref, _ in cands:
                try:
                    links += self.solve_regs(goals, tail=[Link(ref, role="syscall")], trap=True)
                    break
                except CompileError as exc:
                    errors.append(exc)
            else:
                raise errors[0]
            final = None
        transitions += self._last_transitions
        chain = self.chain(links, final, payload=payload, transitions=transitions,
                           assumed=assumed)
        if final is None:
            chain.final_target = None
        emit_stack(chain)           # raises BadcharUnavoidable with the offending offset
        if self.validate and written and not self.emulate_goals(
                chain, {}, writes=written, trap=payload.kind == SYSCALL):
            raise CompileError("memory writes do not survive the register setup")
        log.info("compiled %s into %d gadgets", payload.describe(), len(chain))
        return chain


# ---------------------------------------------------------------------------
# stack layouts

@dataclass(frozen=True)
class LayoutWord:
    offset: int
    value: int
    role: str
    comment: str = ""


@dataclass
class StackLayout:
    bytes: bytes
    words: list
    symbols: dict = field(default_factory=dict)
    halt_va: int | None = None
    final_target: int | None = None

    @property
    def halt_addresses(self):
        return tuple(x for x in {self.halt_va, self.final_target} if x is not None)

    def __len__(self):
        return len(self.bytes)

    def render_text(self):
        return "".join(f"+{w.offset:#06x}  {w.value:#018x}  {w.role:<8} {w.comment}".rstrip() + "\n"
                       for w in self.words)

    def to_json(self):
        return {"bytes": self.bytes.hex(), "length": len(self.bytes),
                "halt_va": self.halt_va, "final_target": self.final_target,
                "symbols": self.symbols,
                "words": [{"offset": w.offset, "value": w.value, "value_hex": f"{w.value:#x}",
                           "role": w.role, "comment": w.comment} for w in self.words]}


def emit_stack(chain):
    """Concrete stack bytes for ``chain``; the first word overwrites the
    return address, then each frame follows with its next-address slot."""
    if not chain.links:
        raise ValueError("empty chain")
    bad = chain.bad_bytes
    fill = int.from_bytes(bytes([chain.filler]) * 8, "little")
    words, symbols = [], {}

    def put(value, role, comment=""):
        off = len(words) * 8
        if isinstance(value, Hole):
            raise ValueError(f"unbound hole {value.tag} at +{off:#x}")
        if has_bad_byte(value, bad):
            raise BadcharUnavoidable(f"{role} word {value:#x} at stack offset {off:#x} holds a "
                                     "restricted byte", offset=off)
        words.append(LayoutWord(off, value & MASK64, role, comment))

    first = chain.links[0].ref
    put(first.va, "gadget", first.text)
    final = chain.final_target
    for i, link in enumerate(chain.links):
        ref = link.ref
        f = ref.frame
        if f is None or not f.constant or f.frame_size % 8:
            raise NonComposable(f"{ref.va:#x}: frame geometry unknown")
        nxt = ref.next_offset
        if nxt is None and i + 1 < len(chain.links):
            raise NonComposable(f"{ref.va:#x} does not continue from the stack")
        b = link.binding_map
        for off in range(0, f.frame_size, 8):
            if off == nxt:
                if i + 1 < len(chain.links):
                    r2 = chain.links[i + 1].ref
                    put(r2.va, "gadget", r2.text)
                elif final is not None:
                    role = "halt" if final == chain.halt_va else "target"
                    put(final, role)
                else:
                    raise ValueError("chain has no final target")
            elif off in b:
                v = b[off]
                if isinstance(v, Hole):
                    symbols[v.tag] = len(words) * 8
                put(v, "operand", f"{link.role}" if link.role else "")
            else:
                put(fill, "padding")
        for off in b:
            if off >= f.frame_size or off == nxt:
                raise ValueError(f"binding +{off:#x} outside the frame of {ref.va:#x}")
    raw = b"".join(w.value.to_bytes(8, "little") for w in words)
    return StackLayout(raw, words, symbols, chain.halt_va,
                       final if final is not None and final != chain.halt_va else None)


def decode_layout(layout, chain):
    """Recover each link's slot values from ``layout`` (inverse of emission)."""
    raw = layout.bytes if isinstance(layout, StackLayout) else layout
    out, pos = [], 8
    for link in chain.links:
        f = link.ref.frame
        vals = {}
        for off in range(0, f.frame_size, 8):
            if off in link.binding_map:
                vals[off] = int.from_bytes(raw[pos + off:pos + off + 8], "little")
        out.append(vals)
        pos += f.frame_size
    return out


# ---------------------------------------------------------------------------
# module-level entry points

def shortest_setreg_chains(catalog, target_regs=None, max_len=DEFAULT_MAX_LEN, bad_bytes=None,
                           budget=DEFAULT_BUDGET):
    """Map of controlled register sets to their shortest chains.

    Raises :class:`Unsatisfiable` when ``target_regs`` is given and no
    chain controls all of them."""
    comp = catalog if isinstance(catalog, ChainCompiler) else ChainCompiler(catalog, bad_bytes)
    best = comp.setreg_map(target_regs, max_len, budget)
    out = {cs: comp.chain([Link(r) for r in ch]) for cs, ch in best.items()}
    if target_regs:
        t = frozenset(target_regs)
        if not any(t <= cs for cs in out):
            if not any(r.pure and r.changed & t for r in comp.refs):
                raise Unsatisfiable(t, "no gadget writes these registers")
            raise Unsatisfiable(t)
    return out


def find_move_path(catalog, src, dst, max_len=4, width=None):
    """Shortest MoveRegG sequence moving ``src`` into ``dst``."""
    comp = catalog if isinstance(catalog, ChainCompiler) else ChainCompiler(catalog)
    path = comp.move_path(src, dst, max_len, width)
    ch = comp.chain([Link(r, role="move") for r in path])
    return ch


def compile_payload(catalog, payload, image=None, **kw):
    comp = ChainCompiler(catalog, payload.bad_bytes, payload.platform, image=image, **kw)
    return comp.compile(payload)


__all__ = ["Hole", "GadgetRef", "Link", "Chain", "StackLayout", "LayoutWord", "ChainCompiler",
           "controlled_registers", "shortest_setreg_chains", "find_move_path", "compile_payload",
           "emit_stack", "decode_layout", "halt_sentinel", "compose", "initial_state", "canonical_key"]
