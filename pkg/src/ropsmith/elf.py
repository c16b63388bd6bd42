"""ELF64 little-endian loading from program headers.

Section headers are never consulted; an image is the list of its PT_LOAD
segments.  :func:`write_elf` produces minimal executables for fixtures.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .errors import BadMagic, MalformedHeaders, NoExecutableCode

log = logging.getLogger(__name__)

PT_LOAD = 1
PF_X, PF_W, PF_R = 1, 2, 4

_EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
_PHDR = struct.Struct("<IIQQQQQQ")


@dataclass(frozen=True)
class Region:
    base_va: int
    bytes: bytes
    executable: bool
    writable: bool

    @property
    def end_va(self):
        return self.base_va + len(self.bytes)

    @property
    def wx(self):
        """True for segments violating W^X."""
        return self.executable and self.writable

    def contains(self, va, size=1):
        return self.base_va <= va and va + size <= self.end_va


@dataclass(frozen=True)
class BinaryImage:
    path: str
    regions: tuple
    entry_va: int = 0
    sha256: str = field(default="", compare=False)

    def executable_regions(self, include_wx=False):
        return [r for r in self.regions if r.executable and (include_wx or not r.writable)]

    def writable_regions(self):
        return [r for r in self.regions if r.writable and not r.executable]

    def region_at(self, va):
        for r in self.regions:
            if r.contains(va):
                return r
        return None

    def read(self, va, size):
        r = self.region_at(va)
        if r is None or not r.contains(va, size):
            raise KeyError(f"{va:#x} not mapped")
        off = va - r.base_va
        return r.bytes[off:off + size]


def parse_image(data, path="<memory>"):
    """Build a :class:`BinaryImage` from raw ELF bytes."""
    if len(data) < 16 or data[:4] != b"\x7fELF":
        raise BadMagic(f"{path}: not an ELF file")
    if data[4] != 2 or data[5] != 1:
        raise BadMagic(f"{path}: not ELF64 little-endian")
    if len(data) < _EHDR.size:
        raise MalformedHeaders(f"{path}: truncated ELF header")
    (_ident, _etype, _machine, _version, entry, phoff, _shoff, _flags,
     _ehsize, phentsize, phnum, _shentsize, _shnum, _shstrndx) = _EHDR.unpack_from(data)
    if phnum and phentsize < _PHDR.size:
        raise MalformedHeaders(f"{path}: bad e_phentsize {phentsize}")
    if phoff + phnum * phentsize > len(data):
        raise MalformedHeaders(f"{path}: program headers run past end of file")

    regions = []
    for i in range(phnum):
        p_type, p_flags, p_offset, p_vaddr, _paddr, p_filesz, p_memsz, _align = \
            _PHDR.unpack_from(data, phoff + i * phentsize)
        if p_type != PT_LOAD:
            continue
        if p_offset + p_filesz > len(data) or p_filesz > p_memsz:
            raise MalformedHeaders(f"{path}: segment {i} exceeds file or memsz")
        if p_vaddr + p_memsz > 1 << 64:
            raise MalformedHeaders(f"{path}: segment {i} wraps the address space")
        body = bytes(data[p_offset:p_offset + p_filesz]) + bytes(p_memsz - p_filesz)
        if not body:
            continue
        regions.append(Region(p_vaddr, body, bool(p_flags & PF_X), bool(p_flags & PF_W)))

    regions.sort(key=lambda r: r.base_va)
    for a, b in zip(regions, regions[1:]):
        if a.end_va > b.base_va:
            raise MalformedHeaders(f"{path}: overlapping segments at {b.base_va:#x}")
    if not any(r.executable for r in regions):
        raise NoExecutableCode(f"{path}: no executable segments")
    for r in regions:
        if r.wx:
            log.warning("%s: segment at %#x is writable and executable", path, r.base_va)
    return BinaryImage(str(path), tuple(regions), entry, hashlib.sha256(data).hexdigest())


def load_image(path):
    """Load every PT_LOAD segment of the ELF64 file at ``path``."""
    data = Path(path).read_bytes()
    return parse_image(data, str(path))


def write_elf(path, segments, entry=None):
    """Write a minimal ELF64 executable.

    ``segments`` is a list of ``(vaddr, data, flags)`` or
    ``(vaddr, data, flags, memsz)`` tuples; ``flags`` is a string over
    ``"rwx"``.  Returns the bytes written.
    """
    phnum = len(segments)
    hdr_size = _EHDR.size + phnum * _PHDR.size
    offset = (hdr_size + 0xFFF) & ~0xFFF
    phdrs = []
    blobs = []
    for seg in segments:
        vaddr, body, flags = seg[:3]
        memsz = seg[3] if len(seg) > 3 else len(body)
        pf = (PF_R if "r" in flags else 0) | (PF_W if "w" in flags else 0) | (PF_X if "x" in flags else 0)
        # keep file offset congruent with vaddr modulo the page size
        offset += (vaddr - offset) & 0xFFF
        phdrs.append(_PHDR.pack(PT_LOAD, pf, offset, vaddr, vaddr, len(body), memsz, 0x1000))
        blobs.append((offset, bytes(body)))
        offset += len(body)
    if entry is None:
        entry = next((s[0] for s in segments if "x" in s[2]), 0)
    ident = b"\x7fELF" + bytes([2, 1, 1, 0]) + bytes(8)
    ehdr = _EHDR.pack(ident, 2, 0x3E, 1, entry, _EHDR.size, 0, 0, _EHDR.size,
                      _PHDR.size, phnum, 0, 0, 0)
    out = bytearray(ehdr + b"".join(phdrs))
    for off, body in blobs:
        if len(out) < off:
            out += bytes(off - len(out))
        out += body
    Path(path).write_bytes(bytes(out))
    return bytes(out)
