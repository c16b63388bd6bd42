"""Bitvector and byte-array terms with simplifying constructors.

Terms are immutable and hashable.  The constructors normalize as they build
(constant folding, linear normal form for addition, store/select
resolution when addresses differ by a constant, extract/concat fusion), so
two terms that are syntactically equal after construction are equal for
every assignment.  The converse does not hold; equality checking that needs
more than normalization is delegated to a solver.

Boolean terms have width 0, array terms have width ``ARRAY``.
"""

from __future__ import annotations

ARRAY = -1
BOOL = 0


def mask(width):
    return (1 << width) - 1


class Term:
    __slots__ = ("op", "args", "width", "_hash", "_key")

    def __init__(self, op, args, width):
        self.op = op
        self.args = args
        self.width = width
        self._hash = hash((op, args, width))
        self._key = None

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Term) or self._hash != other._hash:
            return False
        return self.op == other.op and self.width == other.width and self.args == other.args

    def __ne__(self, other):
        return not self == other

    @property
    def key(self):
        """Deterministic total-order key used to sort commutative operands."""
        if self._key is None:
            self._key = (self.op == "const", _RANK.get(self.op, 9), self.sexpr())
        return self._key

    def is_const(self):
        return self.op == "const"

    @property
    def value(self):
        assert self.op == "const"
        return self.args[0]

    def sexpr(self):
        return to_smt(self, strict=False)

    def __repr__(self):
        return self.sexpr()

    def __str__(self):
        return pretty(self)


_RANK = {"var": 0, "slot": 1, "load": 2, "select": 3}


# -- leaves ------------------------------------------------------------------

def const(value, width):
    if width == BOOL:
        return TRUE if value else FALSE
    return Term("const", (value & mask(width),), width)


TRUE = Term("const", (1,), BOOL)
FALSE = Term("const", (0,), BOOL)


def var(name, width=64):
    return Term("var", (name,), width)


def array_var(name):
    return Term("var", (name,), ARRAY)


def slot(offset):
    """8-byte value on the initial stack at ``rsp + offset`` (summaries)."""
    return Term("slot", (offset,), 64)


def load(addr, nbytes):
    """``nbytes`` little-endian bytes of initial memory at ``addr`` (summaries)."""
    return Term("load", (addr, nbytes), 8 * nbytes)


# -- arithmetic --------------------------------------------------------------

def _linear(t):
    """Decompose into ({term: coef}, constant)."""
    w = t.width
    if t.op == "const":
        return {}, t.value
    if t.op == "add":
        coefs, c = {}, 0
        for a in t.args:
            ac, acst = _linear(a)
            for k, v in ac.items():
                coefs[k] = (coefs.get(k, 0) + v) & mask(w)
            c = (c + acst) & mask(w)
        return coefs, c
    if t.op == "mul":
        k, inner = t.args
        return {inner: k.value}, 0
    return {t: 1}, 0


def _from_linear(coefs, c, w):
    parts = []
    for t, k in coefs.items():
        k &= mask(w)
        if k == 0:
            continue
        parts.append(t if k == 1 else Term("mul", (const(k, w), t), w))
    if not parts:
        return const(c, w)
    parts.sort(key=lambda t: t.key)
    if c & mask(w):
        parts.append(const(c, w))
    if len(parts) == 1:
        return parts[0]
    return Term("add", tuple(parts), w)


def add(*terms):
    w = terms[0].width
    coefs, c = {}, 0
    for t in terms:
        assert t.width == w, (t, w)
        tc, tcst = _linear(t)
        for k, v in tc.items():
            coefs[k] = coefs.get(k, 0) + v
        c += tcst
    return _from_linear(coefs, c & mask(w), w)


def mul_const(k, t):
    w = t.width
    k &= mask(w)
    coefs, c = _linear(t)
    return _from_linear({x: v * k for x, v in coefs.items()}, (c * k) & mask(w), w)


def neg(t):
    return mul_const(-1, t)


def sub(a, b):
    return add(a, neg(b))


def _bitwise(op, terms):
    w = terms[0].width
    flat = []
    for t in terms:
        if t.op == op:
            flat.extend(t.args)
        else:
            flat.append(t)
    cval = {"and": mask(w), "or": 0, "xor": 0}[op]
    rest = []
    for t in flat:
        if t.is_const():
            if op == "and":
                cval &= t.value
            elif op == "or":
                cval |= t.value
            else:
                cval ^= t.value
        else:
            rest.append(t)
    if op == "xor":
        counts = {}
        for t in rest:
            counts[t] = counts.get(t, 0) ^ 1
        rest = [t for t, n in counts.items() if n]
    else:
        rest = list(dict.fromkeys(rest))
        if op == "and" and cval == 0:
            return const(0, w)
        if op == "or" and cval == mask(w):
            return const(cval, w)
    identity = {"and": mask(w), "or": 0, "xor": 0}[op]
    rest.sort(key=lambda t: t.key)
    if cval != identity:
        rest.append(const(cval, w))
    if not rest:
        return const(identity, w)
    if len(rest) == 1:
        return rest[0]
    return Term(op, tuple(rest), w)


def bvand(*terms):
    return _bitwise("and", terms)


def bvor(*terms):
    return _bitwise("or", terms)


def bvxor(*terms):
    return _bitwise("xor", terms)


def bvnot(t):
    return bvxor(t, const(mask(t.width), t.width))


def _shift(op, t, amount):
    w = t.width
    if amount.width != w:
        amount = zext_to(amount, w) if amount.width < w else extract(w - 1, 0, amount)
    if not amount.is_const():
        return Term(op, (t, amount), w)
    k = amount.value
    if op != "ashr" and k >= w:
        return const(0, w)
    k = min(k, w - 1) if op == "ashr" else k
    if k == 0:
        return t
    if t.is_const():
        v = t.value
        if op == "shl":
            return const(v << k, w)
        if op == "lshr":
            return const(v >> k, w)
        sv = v - (1 << w) if v >> (w - 1) else v
        return const(sv >> k, w)
    if op == "shl":
        return concat(extract(w - 1 - k, 0, t), const(0, k))
    if op == "lshr":
        return concat(const(0, k), extract(w - 1, k, t))
    return Term(op, (t, const(k, w)), w)


def shl(t, amount):
    return _shift("shl", t, amount)


def lshr(t, amount):
    return _shift("lshr", t, amount)


def ashr(t, amount):
    return _shift("ashr", t, amount)


# -- bit slicing -------------------------------------------------------------

def concat(*parts):
    """Concatenate, most significant part first."""
    flat = []
    for p in parts:
        if p.op == "concat":
            flat.extend(p.args)
        elif p.width > 0:
            flat.append(p)
    merged = []
    for p in flat:
        if merged:
            q = merged[-1]
            if q.is_const() and p.is_const():
                merged[-1] = const((q.value << p.width) | p.value, q.width + p.width)
                continue
            if (q.op == "extract" and p.op == "extract" and q.args[2] == p.args[2]
                    and q.args[1] == p.args[0] + 1):
                merged[-1] = extract(q.args[0], p.args[1], q.args[2])
                continue
            if q.op == "load" and p.op == "load":
                d = sub(q.args[0], p.args[0])
                if d.is_const() and d.value == p.args[1]:
                    merged[-1] = load(p.args[0], p.args[1] + q.args[1])
                    continue
        merged.append(p)
    if len(merged) == 1:
        return merged[0]
    return Term("concat", tuple(merged), sum(p.width for p in merged))


def extract(hi, lo, t):
    w = t.width
    assert 0 <= lo <= hi < w, (hi, lo, w)
    if lo == 0 and hi == w - 1:
        return t
    n = hi - lo + 1
    if t.is_const():
        return const(t.value >> lo, n)
    if t.op == "extract":
        ihi, ilo, inner = t.args
        return extract(ilo + hi, ilo + lo, inner)
    if t.op == "concat":
        pieces = []
        top = w
        for p in t.args:
            p_hi, p_lo = top - 1, top - p.width
            top = p_lo
            if p_lo > hi or p_hi < lo:
                continue
            pieces.append(extract(min(hi, p_hi) - p_lo, max(lo, p_lo) - p_lo, p))
        return concat(*pieces)
    if t.op in ("and", "or", "xor"):
        return _bitwise(t.op, [extract(hi, lo, a) for a in t.args])
    if t.op == "ite":
        c, a, b = t.args
        return ite(c, extract(hi, lo, a), extract(hi, lo, b))
    if lo == 0 and n >= 16 and t.op in ("add", "mul"):
        # low bits of a sum depend only on low bits of the operands (single
        # bytes are left alone so byte-wise stores fuse back together)
        coefs, c = _linear(t)
        return _from_linear({extract(hi, 0, x): k for x, k in coefs.items()}, c & mask(n), n)
    return Term("extract", (hi, lo, t), n)


def zext(n, t):
    if n == 0:
        return t
    return concat(const(0, n), t)


def zext_to(t, width):
    return zext(width - t.width, t)


def sext_to(t, width):
    n = width - t.width
    if n == 0:
        return t
    sign = extract(t.width - 1, t.width - 1, t)
    return concat(ite(eq(sign, const(1, 1)), const(mask(n), n), const(0, n)), t)


# -- booleans ----------------------------------------------------------------

def eq(a, b):
    if a == b:
        return TRUE
    if a.width > 0:
        d = sub(a, b)
        if d.is_const():
            return TRUE if d.value == 0 else FALSE
    if a.is_const() and b.is_const():
        return TRUE if a.value == b.value else FALSE
    if b.key < a.key:
        a, b = b, a
    return Term("eq", (a, b), BOOL)


def ult(a, b):
    if a == b:
        return FALSE
    if a.is_const() and b.is_const():
        return TRUE if a.value < b.value else FALSE
    if b.is_const() and b.value == 0:
        return FALSE
    return Term("ult", (a, b), BOOL)


def not_(c):
    if c.is_const():
        return FALSE if c.value else TRUE
    if c.op == "not":
        return c.args[0]
    return Term("not", (c,), BOOL)


def and_(*cs):
    rest = []
    for c in cs:
        if c.is_const():
            if not c.value:
                return FALSE
            continue
        rest.extend(c.args if c.op == "band" else (c,))
    rest = list(dict.fromkeys(rest))
    if not rest:
        return TRUE
    if len(rest) == 1:
        return rest[0]
    return Term("band", tuple(rest), BOOL)


def or_(*cs):
    rest = []
    for c in cs:
        if c.is_const():
            if c.value:
                return TRUE
            continue
        rest.extend(c.args if c.op == "bor" else (c,))
    rest = list(dict.fromkeys(rest))
    if not rest:
        return FALSE
    if len(rest) == 1:
        return rest[0]
    return Term("bor", tuple(rest), BOOL)


def ite(c, a, b):
    if c.is_const():
        return a if c.value else b
    if a == b:
        return a
    if c.op == "not":
        return ite(c.args[0], b, a)
    return Term("ite", (c, a, b), a.width)


def bool_to_bv(c):
    return ite(c, const(1, 1), const(0, 1))


# -- memory ------------------------------------------------------------------

def _same_address(a, b):
    """True/False when the addresses are provably equal/different, else None."""
    d = sub(a, b)
    if d.is_const():
        return d.value == 0
    return None


def select(arr, idx):
    a = arr
    while a.op == "store":
        inner, sidx, val = a.args
        same = _same_address(sidx, idx)
        if same is True:
            return val
        if same is None:
            break
        a = inner
    return Term("select", (a, idx), 8)


def store(arr, idx, val):
    assert val.width == 8
    return Term("store", (arr, idx, val), ARRAY)


def read_bytes(arr, addr, nbytes):
    """Little-endian read: the highest address is the most significant byte."""
    w = addr.width
    return concat(*[select(arr, add(addr, const(i, w))) for i in reversed(range(nbytes))])


def write_bytes(arr, addr, value):
    w = addr.width
    for i in range(value.width // 8):
        arr = store(arr, add(addr, const(i, w)), extract(8 * i + 7, 8 * i, value))
    return arr


# -- traversal ---------------------------------------------------------------

def _children(t):
    if t.op in ("const", "var", "slot"):
        return ()
    if t.op == "load":
        return (t.args[0],)
    if t.op == "extract":
        return (t.args[2],)
    return t.args


def iter_subterms(t):
    seen = set()
    stack = [t]
    while stack:
        x = stack.pop()
        if id(x) in seen:
            continue
        seen.add(id(x))
        yield x
        stack.extend(c for c in _children(x) if isinstance(c, Term))


def free_vars(t):
    return {x.args[0]: x.width for x in iter_subterms(t) if x.op == "var"}


def substitute(t, mapping, memo=None):
    """Rebuild ``t`` replacing leaves.

    ``mapping`` is a callable taking a leaf term (var/slot/load after its
    address is rewritten) and returning a replacement or None.
    """
    if memo is None:
        memo = {}
    hit = memo.get(id(t))
    if hit is not None and hit[0] is t:
        return hit[1]
    op, args = t.op, t.args
    if op == "const":
        out = t
    elif op in ("var", "slot"):
        out = mapping(t) or t
    elif op == "load":
        a = substitute(args[0], mapping, memo)
        leaf = t if a is args[0] else load(a, args[1])
        out = mapping(leaf) or leaf
    else:
        out = rebuild(t, [substitute(a, mapping, memo) if isinstance(a, Term) else a for a in args])
    memo[id(t)] = (t, out)
    return out


def rebuild(t, args):
    op = t.op
    if op == "add":
        return add(*args)
    if op == "mul":
        return mul_const(args[0].value, args[1])
    if op in ("and", "or", "xor"):
        return _bitwise(op, args)
    if op in ("shl", "lshr", "ashr"):
        return _shift(op, args[0], args[1])
    if op == "concat":
        return concat(*args)
    if op == "extract":
        return extract(args[0], args[1], args[2])
    if op == "eq":
        return eq(*args)
    if op == "ult":
        return ult(*args)
    if op == "not":
        return not_(*args)
    if op == "band":
        return and_(*args)
    if op == "bor":
        return or_(*args)
    if op == "ite":
        return ite(*args)
    if op == "select":
        return select(*args)
    if op == "store":
        return store(*args)
    raise ValueError(f"cannot rebuild {op}")


# -- evaluation --------------------------------------------------------------

class ArrayValue:
    """Concrete byte array: a base function plus stored overrides."""

    __slots__ = ("base", "over")

    def __init__(self, base, over=None):
        self.base = base
        self.over = over or {}

    def get(self, addr):
        v = self.over.get(addr)
        return self.base(addr) if v is None else v

    def set(self, addr, val):
        over = dict(self.over)
        over[addr] = val
        return ArrayValue(self.base, over)


class Env:
    """Assignment for evaluation.

    ``vars`` maps bitvector variable names to ints and array names to
    :class:`ArrayValue`.  ``slot`` and ``load`` resolve summary leaves.
    """

    def __init__(self, vars=None, slot=None, load=None):
        self.vars = vars or {}
        self.slot = slot
        self.load = load


def evaluate(t, env, memo=None):
    if memo is None:
        memo = {}
    key = id(t)
    if key in memo:
        return memo[key]
    op, args, w = t.op, t.args, t.width
    if op == "const":
        v = args[0]
    elif op == "var":
        v = env.vars[args[0]]
    elif op == "slot":
        v = env.slot(args[0])
    elif op == "load":
        v = env.load(evaluate(args[0], env, memo), args[1])
    elif op == "add":
        v = sum(evaluate(a, env, memo) for a in args) & mask(w)
    elif op == "mul":
        v = (args[0].value * evaluate(args[1], env, memo)) & mask(w)
    elif op in ("and", "or", "xor"):
        vals = [evaluate(a, env, memo) for a in args]
        v = vals[0]
        for x in vals[1:]:
            v = v & x if op == "and" else v | x if op == "or" else v ^ x
    elif op in ("shl", "lshr", "ashr"):
        x, k = evaluate(args[0], env, memo), evaluate(args[1], env, memo)
        if op == "shl":
            v = (x << k) & mask(w) if k < w else 0
        elif op == "lshr":
            v = x >> k if k < w else 0
        else:
            sx = x - (1 << w) if x >> (w - 1) else x
            v = (sx >> min(k, w - 1)) & mask(w)
    elif op == "concat":
        v = 0
        for a in args:
            v = (v << a.width) | evaluate(a, env, memo)
    elif op == "extract":
        hi, lo, inner = args
        v = (evaluate(inner, env, memo) >> lo) & mask(hi - lo + 1)
    elif op == "ite":
        v = evaluate(args[1] if evaluate(args[0], env, memo) else args[2], env, memo)
    elif op == "eq":
        v = int(evaluate(args[0], env, memo) == evaluate(args[1], env, memo))
    elif op == "ult":
        v = int(evaluate(args[0], env, memo) < evaluate(args[1], env, memo))
    elif op == "not":
        v = 1 - evaluate(args[0], env, memo)
    elif op == "band":
        v = int(all(evaluate(a, env, memo) for a in args))
    elif op == "bor":
        v = int(any(evaluate(a, env, memo) for a in args))
    elif op == "select":
        v = evaluate(args[0], env, memo).get(evaluate(args[1], env, memo))
    elif op == "store":
        arr = evaluate(args[0], env, memo)
        v = arr.set(evaluate(args[1], env, memo), evaluate(args[2], env, memo))
    else:
        raise ValueError(f"cannot evaluate {op}")
    memo[key] = v
    return v


# -- printing ----------------------------------------------------------------

_SMT_OPS = {"add": "bvadd", "mul": "bvmul", "and": "bvand", "or": "bvor", "xor": "bvxor",
            "shl": "bvshl", "lshr": "bvlshr", "ashr": "bvashr", "concat": "concat",
            "eq": "=", "ult": "bvult", "not": "not", "band": "and", "bor": "or",
            "ite": "ite", "select": "select", "store": "store"}


def smt_const(v, w):
    if w == BOOL:
        return "true" if v else "false"
    if w % 4 == 0:
        return "#x" + format(v, f"0{w // 4}x")
    return "#b" + format(v, f"0{w}b")


def to_smt(t, strict=True):
    """SMT-LIB v2 rendering.  Summary leaves are rendered only when
    ``strict`` is false (for display)."""
    op, args = t.op, t.args
    if op == "const":
        return smt_const(args[0], t.width)
    if op == "var":
        return args[0]
    if op == "slot":
        if strict:
            raise ValueError("slot leaves have no SMT-LIB form")
        return f"(slot {args[0]})"
    if op == "load":
        if strict:
            raise ValueError("load leaves have no SMT-LIB form")
        return f"(load{args[1]} {to_smt(args[0], strict)})"
    if op == "extract":
        return f"((_ extract {args[0]} {args[1]}) {to_smt(args[2], strict)})"
    inner = " ".join(to_smt(a, strict) for a in args)
    return f"({_SMT_OPS[op]} {inner})"


_INFIX = {"add": "+", "and": "&", "or": "|", "xor": "^"}


def pretty(t):
    """Compact human-readable rendering used in listings and catalogs."""
    op, args = t.op, t.args
    if op == "const":
        return hex(args[0]) if t.width else ("true" if args[0] else "false")
    if op == "var":
        return args[0]
    if op == "slot":
        return f"[rsp+{args[0]:#x}]"
    if op == "load":
        return f"M{args[1] * 8}[{pretty(args[0])}]"
    if op in _INFIX:
        return "(" + f" {_INFIX[op]} ".join(pretty(a) for a in args) + ")"
    if op == "mul":
        k = args[0].value
        if k == mask(t.width):
            return f"-{pretty(args[1])}"
        return f"{k:#x}*{pretty(args[1])}"
    if op == "extract":
        return f"{pretty(args[2])}[{args[0]}:{args[1]}]"
    if op == "concat":
        return "{" + ", ".join(pretty(a) for a in args) + "}"
    return "(" + op + " " + " ".join(pretty(a) if isinstance(a, Term) else str(a) for a in args) + ")"


# -- compilation to Python ------------------------------------------------------

def compile_terms(terms):
    """Compile terms into ``f(vars, slot, load) -> tuple of values``.

    Equivalent to :func:`evaluate` on each term, but shared subterms are
    computed once and the per-call cost is straight-line Python.
    """
    names = {}
    lines = []

    def emit(t):
        k = id(t)
        if k in names:
            return names[k]
        op, args, w = t.op, t.args, t.width
        m = mask(w) if w > 0 else 0
        if op == "const":
            names[k] = repr(args[0])
            return names[k]
        if op == "var":
            code = f"V[{args[0]!r}]"
        elif op == "slot":
            code = f"S({args[0]})"
        elif op == "load":
            code = f"L({emit(args[0])}, {args[1]})"
        elif op == "add":
            code = f"({' + '.join(emit(a) for a in args)}) & {m}"
        elif op == "mul":
            code = f"({args[0].value} * {emit(args[1])}) & {m}"
        elif op in ("and", "or", "xor"):
            sym = {"and": " & ", "or": " | ", "xor": " ^ "}[op]
            code = sym.join(emit(a) for a in args)
        elif op == "shl":
            x, kk = emit(args[0]), emit(args[1])
            code = f"(({x} << {kk}) & {m}) if {kk} < {w} else 0"
        elif op == "lshr":
            x, kk = emit(args[0]), emit(args[1])
            code = f"({x} >> {kk}) if {kk} < {w} else 0"
        elif op == "ashr":
            x, kk = emit(args[0]), emit(args[1])
            code = f"(({x} - ({x} >> {w - 1} << {w})) >> min({kk}, {w - 1})) & {m}"
        elif op == "concat":
            parts, shift = [], 0
            for a in reversed(args):
                parts.append(f"({emit(a)} << {shift})" if shift else emit(a))
                shift += a.width
            code = " | ".join(parts)
        elif op == "extract":
            hi, lo, inner = args
            code = f"({emit(inner)} >> {lo}) & {mask(hi - lo + 1)}"
        elif op == "ite":
            c, a, b = (emit(x) for x in args)
            code = f"{a} if {c} else {b}"
        elif op == "eq":
            code = f"int({emit(args[0])} == {emit(args[1])})"
        elif op == "ult":
            code = f"int({emit(args[0])} < {emit(args[1])})"
        elif op == "not":
            code = f"1 - {emit(args[0])}"
        elif op == "band":
            code = f"int({' and '.join(emit(a) for a in args)})"
        elif op == "bor":
            code = f"int({' or '.join(emit(a) for a in args)})"
        elif op == "select":
            code = f"{emit(args[0])}.get({emit(args[1])})"
        elif op == "store":
            code = f"{emit(args[0])}.set({emit(args[1])}, {emit(args[2])})"
        else:
            raise ValueError(f"cannot compile {op}")
        name = f"t{len(lines)}"
        lines.append(f"    {name} = {code}")
        names[k] = name
        return name

    outs = [emit(t) for t in terms]
    src = "def _f(V, S, L):\n" + "\n".join(lines) + f"\n    return ({', '.join(outs)},)\n"
    ns = {}
    exec(compile(src, "<terms>", "exec"), ns)
    return ns["_f"]
