"""The gadget catalog: verified claims grouped by gadget type.

Each entry carries a semantic description, the gadget address, its
machine instructions, the parameter bindings and its side effects, plus
frame geometry and verification state.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from .classify import (REFUTED, UNCHECKED, VERIFIED, GadgetFrame, TypedClaim, _GTYPE_ORDER,
                       classify)
from .errors import ParseError, VersionMismatch
from .scan import Gadget, ScanConfig, galileo_scan
from .verifier import default_oracle, verify_claims

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

SEMANTICS = {
    "LoadConstG": "dst <- [rsp + offset]",
    "SetConstG": "dst <- value",
    "MoveRegG": "dst <- src",
    "ArithmeticG": "dst <- src1 op src2",
    "LoadMemG": "dst <- [addr + disp]",
    "StoreMemG": "[addr + disp] <- src",
    "ArithmeticLoadG": "dst <- dst op [addr + disp]",
    "ArithmeticStoreG": "[addr + disp] <- [addr + disp] op src",
    "SyscallG": "syscall",
    "StackPivotG": "rsp <- src + disp",
    "NoOpG": "nop",
}


@lru_cache(maxsize=None)
def _decode(raw, va):
    return Gadget.from_bytes(raw, va)


@dataclass(frozen=True)
class CatalogEntry:
    gtype: str
    params: tuple
    va: int
    text: str
    raw: bytes
    clobbers: frozenset = frozenset()
    unknown_side_effect: bool = False
    frame: GadgetFrame | None = None
    verification: str = UNCHECKED
    n_insns: int = 0
    derefs: bool = False

    @property
    def semantic_description(self):
        return SEMANTICS[self.gtype]

    @property
    def gadget(self):
        return _decode(self.raw, self.va)

    @property
    def claim(self):
        return TypedClaim(self.gtype, self.params, self.clobbers, self.frame, self.verification,
                          self.unknown_side_effect, self.derefs)

    def __getitem__(self, key):
        return self.claim[key]

    def get(self, key, default=None):
        return self.claim.get(key, default)

    @property
    def compile_eligible(self):
        if self.unknown_side_effect or self.frame is None:
            return False
        if self.gtype == "SyscallG":
            return self.frame.next_kind == "trap"
        return self.frame.chainable

    def order_key(self):
        size = self.frame.frame_size if self.frame and self.frame.constant else 1 << 30
        return (self.n_insns, size, self.va, len(self.raw), _GTYPE_ORDER[self.gtype],
                tuple((k, str(v)) for k, v in self.params))

    def describe(self):
        return self.claim.describe()

    def __str__(self):
        return f"{self.va:#x} {self.gtype}({self.describe()}) : {self.text}"

    # -- serialization
    def to_json(self):
        return {
            "semantic_description": self.semantic_description,
            "va": self.va,
            "va_hex": f"{self.va:#x}",
            "machine_instructions": {"text": self.text, "bytes": self.raw.hex()},
            "parameters": dict(self.params),
            "side_effects": {"clobbers": sorted(self.clobbers),
                             "unknown_side_effect": self.unknown_side_effect,
                             "derefs": self.derefs},
            "frame": self.frame.to_json() if self.frame else None,
            "verification": self.verification,
            "n_insns": self.n_insns,
        }

    @classmethod
    def from_json(cls, gtype, d):
        se = d["side_effects"]
        return cls(gtype, tuple(d["parameters"].items()), int(d["va"]),
                   d["machine_instructions"]["text"], bytes.fromhex(d["machine_instructions"]["bytes"]),
                   frozenset(se["clobbers"]), bool(se["unknown_side_effect"]),
                   GadgetFrame.from_json(d["frame"]) if d["frame"] else None,
                   d["verification"], int(d["n_insns"]), bool(se.get("derefs", False)))


@dataclass
class Catalog:
    entries: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    bad_bytes: frozenset | None = None
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = sorted(self.entries, key=CatalogEntry.order_key)

    @property
    def groups(self):
        out = {}
        for e in sorted(self.entries, key=lambda e: (_GTYPE_ORDER[e.gtype], e.order_key())):
            out.setdefault(e.gtype, []).append(e)
        return out

    def eligible(self):
        """Entries the chain compiler may use."""
        return [e for e in self.entries if e.compile_eligible]

    def coverage(self):
        return {g: len(v) for g, v in self.groups.items()}

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return (isinstance(other, Catalog) and self.entries == other.entries
                and self.bad_bytes == other.bad_bytes and self.provenance == other.provenance)

    # -- serialization
    def to_json(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "provenance": self.provenance,
            "bad_bytes": sorted(self.bad_bytes) if self.bad_bytes is not None else None,
            "stats": self.stats,
            "groups": [{"gtype": g, "semantic_description": SEMANTICS[g],
                        "entries": [e.to_json() for e in es]}
                       for g, es in self.groups.items()],
        }

    def dumps(self):
        return json.dumps(self.to_json(), indent=1) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"catalog is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or "schema_version" not in doc:
            raise ParseError("catalog lacks schema_version")
        if doc["schema_version"] != SCHEMA_VERSION:
            raise VersionMismatch(f"catalog schema {doc['schema_version']}, expected {SCHEMA_VERSION}")
        try:
            entries = [CatalogEntry.from_json(grp["gtype"], e)
                       for grp in doc["groups"] for e in grp["entries"]]
            bad = doc["bad_bytes"]
            return cls(entries, doc["provenance"], frozenset(bad) if bad is not None else None,
                       doc.get("stats", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed catalog: {exc!r}") from exc

    @classmethod
    def load(cls, path):
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def roundtrip(catalog):
    return Catalog.loads(catalog.dumps())


def address_has_bad_byte(va, bad):
    return any(b in bad for b in va.to_bytes(8, "little"))


def build_catalog(items, bad_bytes=None, include_unverified=False, provenance=None):
    """Build a catalog from ``(gadget, claims)`` pairs.

    Refuted claims are dropped, unverified ones too unless
    ``include_unverified``; entries whose address contains a bad byte are
    filtered out and counted.
    """
    bad = frozenset(bad_bytes) if bad_bytes else None
    stats = {"refuted": 0, "unverified": 0, "bad_address": 0}
    staged = []
    for g, claims in items:
        for c in claims:
            if c.verified == REFUTED:
                stats["refuted"] += 1
                continue
            if c.verified != VERIFIED and not include_unverified:
                stats["unverified"] += 1
                continue
            if bad and address_has_bad_byte(g.va, bad):
                stats["bad_address"] += 1
                continue
            staged.append((g, c))
    if stats["bad_address"]:
        log.info("dropped %d entries whose address contains a bad byte", stats["bad_address"])

    settable = {c["dst"] for _, c in staged if c.gtype == "LoadConstG" and c.frame.chainable}
    seen = set()
    entries = []
    for g, c in staged:
        key = (g.va, len(g.raw_bytes), c.gtype, c.params)
        if key in seen:
            continue
        seen.add(key)
        unknown = c.side_writes
        if c.gtype in ("StoreMemG", "ArithmeticStoreG") and c["addr"] not in settable:
            unknown = True
        entries.append(CatalogEntry(c.gtype, c.params, g.va, g.text, g.raw_bytes, c.clobbers,
                                    unknown, c.frame, c.verified, len(g.instrs), c.derefs))
    stats["entries"] = len(entries)
    return Catalog(entries, provenance or {}, bad, stats)


def analyze(gadgets, seeds=None, oracle=None):
    """Classify and verify each gadget; yields ``(gadget, claims)``."""
    oracle = oracle or default_oracle()
    for g in gadgets:
        try:
            claims = classify(g, seeds) if seeds else classify(g)
        except Exception as exc:       # a single odd gadget must not sink the catalog
            log.warning("%#x: classification failed: %s", g.va, exc)
            continue
        if claims:
            yield g, verify_claims(g, claims, oracle)


def catalog_from_image(image, scan_cfg=None, seeds=None, oracle=None, bad_bytes=None,
                       include_unverified=False):
    scan_cfg = scan_cfg or ScanConfig()
    gadgets = galileo_scan(image, scan_cfg)
    prov = {
        "image": image.path,
        "sha256": image.sha256,
        "scan": {"max_insns": scan_cfg.max_insns, "max_back_bytes": scan_cfg.max_back_bytes,
                 "terminators": sorted(t.value for t in scan_cfg.enabled_terminators),
                 "skip_writable_exec": scan_cfg.skip_writable_exec},
        "classify": {"seeds": list(seeds) if seeds else "default"},
        "gadgets_scanned": len(gadgets),
    }
    return build_catalog(analyze(gadgets, seeds, oracle), bad_bytes, include_unverified, prov)


# ---------------------------------------------------------------------------
# queries

_PATTERN = re.compile(r"^\s*(\w+)\s*(?:\((.*)\))?\s*$")


def parse_pattern(text):
    """``"LoadConstG(dst=rdi, offset=*)"`` -> ``("LoadConstG", {"dst": "rdi"})``."""
    m = _PATTERN.match(text)
    if not m:
        raise ValueError(f"bad pattern {text!r}")
    params = {}
    for part in filter(None, (p.strip() for p in (m.group(2) or "").split(","))):
        k, _, v = part.partition("=")
        k, v = k.strip(), v.strip()
        if not k or not v:
            raise ValueError(f"bad pattern parameter {part!r}")
        if v == "*":
            continue
        try:
            params[k] = int(v, 0)
        except ValueError:
            params[k] = v
    return m.group(1), params


def query(catalog, gtype, eligible_only=False, **params):
    """Entries of type ``gtype`` whose parameters match ``params`` (a value
    of ``None`` or ``"*"`` matches anything).  ``gtype`` may also be a full
    pattern such as ``"MoveRegG(dst=rax, src=*)"``."""
    if "(" in gtype:
        gtype, fixed = parse_pattern(gtype)
        params = {**fixed, **params}
    want = {k: v for k, v in params.items() if v is not None and v != "*"}
    pool = catalog.eligible() if eligible_only else catalog.entries
    out = []
    for e in pool:
        if e.gtype != gtype:
            continue
        p = dict(e.params)
        if all(k in p and p[k] == v for k, v in want.items()):
            out.append(e)
    return sorted(out, key=CatalogEntry.order_key)
