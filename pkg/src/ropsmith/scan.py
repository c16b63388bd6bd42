"""Exhaustive gadget discovery (the Galileo backward scan).

For each byte offset that decodes to an enabled control transfer, every
start offset up to ``max_back_bytes`` before it is tried; a start yields a
gadget when straight-line decoding from it lands exactly on that transfer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .errors import DecodeError
from .x86 import FAR_RET_BYTES, StopKind, decode_instruction, format_seq

log = logging.getLogger(__name__)

DEFAULT_TERMINATORS = frozenset({StopKind.RET_NEAR, StopKind.RET_IMM, StopKind.SYSCALL,
                                 StopKind.JMP_REG, StopKind.JMP_MEM,
                                 StopKind.CALL_REG, StopKind.CALL_MEM})
MAX_RET_IMM = 256


@dataclass(frozen=True)
class Gadget:
    va: int
    instrs: tuple
    raw_bytes: bytes

    @property
    def terminator(self):
        return self.instrs[-1].stop_kind

    @property
    def length(self):
        return len(self.raw_bytes)

    @property
    def text(self):
        return format_seq(self.instrs)

    def __str__(self):
        return f"{self.va:#x}: {self.text}"

    @classmethod
    def from_bytes(cls, raw, va=0, max_insns=64):
        """Decode ``raw`` as a complete gadget starting at ``va``."""
        from .x86 import decode_sequence
        instrs = decode_sequence(raw, va, max_insns)
        used = sum(i.length for i in instrs)
        if used != len(raw):
            raise ValueError(f"gadget bytes continue past the terminator at {va + used:#x}")
        return cls(va, instrs, bytes(raw))


@dataclass(frozen=True)
class ScanConfig:
    max_insns: int = 5
    max_back_bytes: int = 25
    enabled_terminators: frozenset = field(default=DEFAULT_TERMINATORS)
    skip_writable_exec: bool = True

    def __post_init__(self):
        if self.max_insns < 1:
            raise ValueError("max_insns must be >= 1")
        if self.max_back_bytes < self.max_insns:
            raise ValueError("max_back_bytes must be >= max_insns")


def _terminator_ok(insn, cfg):
    kind = insn.stop_kind
    if kind not in cfg.enabled_terminators:
        return False
    if kind is StopKind.RET_IMM:
        n = insn.ret_imm
        return n <= MAX_RET_IMM and n % 8 == 0
    return True


class _RegionDecoder:
    """Memoized single-instruction decoding over one byte region."""

    def __init__(self, code, base_va):
        self.code = code
        self.base_va = base_va
        self._cache = {}

    def at(self, off):
        try:
            return self._cache[off]
        except KeyError:
            pass
        try:
            insn = decode_instruction(self.code, off, self.base_va + off)
        except DecodeError:
            insn = None
        self._cache[off] = insn
        return insn

    def sequence(self, start, end_off, max_insns):
        """Instructions from ``start`` when they end exactly at the
        transfer beginning at ``end_off``; otherwise None."""
        out = []
        off = start
        while len(out) < max_insns and off <= end_off:
            insn = self.at(off)
            if insn is None:
                return None
            out.append(insn)
            if insn.is_control_transfer:
                return tuple(out) if off == end_off else None
            off += insn.length
        return None


def scan_bytes(code, base_va, cfg=None):
    """Scan one code blob; returns gadgets sorted by (va, length)."""
    cfg = cfg or ScanConfig()
    dec = _RegionDecoder(code, base_va)
    found = {}
    for term_off in range(len(code)):
        insn = dec.at(term_off)
        if insn is None or not insn.is_control_transfer or not _terminator_ok(insn, cfg):
            continue
        for start in range(max(0, term_off - cfg.max_back_bytes), term_off + 1):
            seq = dec.sequence(start, term_off, cfg.max_insns)
            if seq is None:
                continue
            end = term_off + insn.length
            g = Gadget(base_va + start, seq, bytes(code[start:end]))
            found[(g.va, g.length)] = g
    return [found[k] for k in sorted(found)]


def galileo_scan(image, cfg=None):
    """Find every gadget in the executable regions of ``image``."""
    cfg = cfg or ScanConfig()
    found = {}
    for region in image.regions:
        if not region.executable:
            continue
        if region.writable and cfg.skip_writable_exec:
            log.info("skipping W+X region at %#x", region.base_va)
            continue
        for g in scan_bytes(region.bytes, region.base_va, cfg):
            found[(g.va, g.length)] = g
    return [found[k] for k in sorted(found)]


def far_return_sites(image):
    """Virtual addresses of far-return bytes, kept for diagnostics only."""
    out = []
    for region in image.executable_regions(include_wx=True):
        out.extend(region.base_va + i for i, b in enumerate(region.bytes) if b in FAR_RET_BYTES)
    return out
