import random

import pytest
from hypothesis import given, settings, strategies as st

from ropsmith.errors import DecodeError
from ropsmith.scan import ScanConfig, far_return_sites, galileo_scan, scan_bytes
from ropsmith.x86 import StopKind, decode_sequence

from conftest import image_of

# bytes that make random blobs gadget-rich
_RICH = [0xC3, 0xC2, 0x08, 0x00, 0x58, 0x5F, 0x41, 0x48, 0x01, 0xD8, 0x0F, 0x05, 0x89, 0x31,
         0xC0, 0xFF, 0xE0, 0x90, 0xCB]


def brute_force(code, base, cfg):
    """Attempt a sequence decode from every offset and keep the ones that
    end on an acceptable terminator within the back-scan window."""
    out = set()
    for start in range(len(code)):
        try:
            seq = decode_sequence(code, base + start, cfg.max_insns, offset=start)
        except DecodeError:
            continue
        last = seq[-1]
        term_off = last.va - base
        if term_off - start > cfg.max_back_bytes:
            continue
        if last.stop_kind not in cfg.enabled_terminators:
            continue
        if last.stop_kind is StopKind.RET_IMM and (last.ret_imm > 256 or last.ret_imm % 8):
            continue
        out.add((base + start, bytes(code[start:term_off + last.length])))
    return out


def listing(gadgets):
    return [(g.va - 0x1000, g.text) for g in gadgets]


def test_unaligned_pop():
    gs = scan_bytes(bytes([0x41, 0x5F, 0xC3]), 0x1000)
    assert listing(gs) == [(0, "pop r15 ; ret"), (1, "pop rdi ; ret"), (2, "ret")]


def test_ret_inside_immediate():
    gs = scan_bytes(bytes([0xB8, 0xC3, 0x00, 0x00, 0x00, 0xC3]), 0x1000)
    offs = {off for off, _ in listing(gs)}
    assert 1 in offs and 5 in offs
    assert (1, "ret") in listing(gs)
    assert (0, "mov eax, 0xc3 ; ret") in listing(gs)


def test_syscall_terminator():
    gs = scan_bytes(bytes([0x0F, 0x05, 0xC3]), 0x1000)
    assert (0, "syscall") in listing(gs)
    assert (2, "ret") in listing(gs)
    assert gs[0].terminator is StopKind.SYSCALL
    no_sc = ScanConfig(enabled_terminators=frozenset({StopKind.RET_NEAR}))
    assert listing(scan_bytes(bytes([0x0F, 0x05, 0xC3]), 0x1000, no_sc)) == [(2, "ret")]


def test_empty_region():
    assert scan_bytes(b"", 0x1000) == []


def test_ret_imm_limits():
    assert listing(scan_bytes(bytes.fromhex("c20800"), 0x1000)) == [(0, "ret 8")]
    assert scan_bytes(bytes.fromhex("c20300"), 0x1000) == []
    assert scan_bytes(bytes.fromhex("c20801"), 0x1000) == []


def test_far_returns_reported_not_chained():
    img = image_of(bytes.fromhex("5fcb90c3"))
    assert far_return_sites(img) == [0x401001]
    assert [g.text for g in galileo_scan(img)] == ["nop ; ret", "ret"]


def test_config_invariants():
    with pytest.raises(ValueError):
        ScanConfig(max_insns=0)
    with pytest.raises(ValueError):
        ScanConfig(max_insns=6, max_back_bytes=5)


def test_random_blobs_match_oracle():
    rng = random.Random(7)
    cfg = ScanConfig()
    for _ in range(100):
        n = rng.randint(1, 64)
        code = bytes(rng.choice(_RICH) if rng.random() < 0.6 else rng.randrange(256)
                     for _ in range(n))
        got = {(g.va, g.raw_bytes) for g in scan_bytes(code, 0x1000, cfg)}
        assert got == brute_force(code, 0x1000, cfg), code.hex()


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from(_RICH) | st.integers(0, 255), max_size=64).map(bytes),
       st.integers(1, 6), st.integers(6, 30))
def test_completeness_property(code, max_insns, back):
    cfg = ScanConfig(max_insns=max_insns, max_back_bytes=back)
    gs = scan_bytes(code, 0x1000, cfg)
    assert {(g.va, g.raw_bytes) for g in gs} == brute_force(code, 0x1000, cfg)
    for g in gs:
        transfers = [i.is_control_transfer for i in g.instrs]
        assert transfers[-1] and not any(transfers[:-1])
        assert decode_sequence(g.raw_bytes, g.va, max_insns) == g.instrs
    assert [(g.va, g.length) for g in gs] == sorted({(g.va, g.length) for g in gs})


def test_region_order_does_not_matter(tmp_path):
    from ropsmith.elf import load_image, write_elf
    a = (0x401000, bytes.fromhex("5fc35ec3"), "rx")
    b = (0x402000, bytes.fromhex("4801d8c3"), "rx")
    write_elf(tmp_path / "ab.elf", [a, b])
    write_elf(tmp_path / "ba.elf", [b, a])
    ga = galileo_scan(load_image(tmp_path / "ab.elf"))
    gb = galileo_scan(load_image(tmp_path / "ba.elf"))
    assert [(g.va, g.raw_bytes) for g in ga] == [(g.va, g.raw_bytes) for g in gb]
