import os
import random
import shutil
import tempfile

import pytest

from ropsmith.catalog import analyze, build_catalog
from ropsmith.elf import parse_image, write_elf
from ropsmith.scan import Gadget
from ropsmith.verifier import solver_command

TEXT_BASE = 0x401000
DATA_BASE = 0x601000

# pop rdi/rsi/rdx/rax/rbx, a store, syscall, add, zeroing and moves
EXECVE_GADGETS = ["5fc3", "5ec3", "5ac3", "58c3", "5bc3", "488917c3", "0f05", "4801d8c3",
                  "4831c0c3", "48ffc0c3", "31d2c3", "31f6c3", "4889c7c3"]

# Addresses whose every byte is printable and non-NUL, so a {0x00, 0x0a}
# restriction does not rule the whole image out.
CLEAN_TEXT = 0x4141414141414000
CLEAN_DATA = 0x4242424242424000


def gadgets_at(hexes, base=TEXT_BASE, gap=0):
    """Place gadget encodings back to back from ``base``."""
    out, va = [], base
    for h in hexes:
        raw = bytes.fromhex(h)
        out.append(Gadget.from_bytes(raw, va))
        va += len(raw) + gap
    return out


def catalog_of(hexes, base=TEXT_BASE, bad=None, gap=0, include_unverified=False):
    return build_catalog(analyze(gadgets_at(hexes, base, gap)), bad, include_unverified)


def elf_bytes(tmp_path, code, text=TEXT_BASE, data=DATA_BASE, name="fixture.elf", data_size=0x1000):
    path = tmp_path / name
    segs = [(text, code, "rx")]
    if data is not None:
        segs.append((data, bytes(0x40), "rw", data_size))
    write_elf(path, segs)
    return path


def image_of(code, text=TEXT_BASE, data=DATA_BASE):
    """In-memory image with one code segment and an optional data segment."""
    segs = [(text, code, "rx")]
    if data is not None:
        segs.append((data, bytes(0x40), "rw", 0x1000))
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "img.elf")
        return parse_image(write_elf(path, segs), path)


@pytest.fixture
def execve_elf(tmp_path):
    return elf_bytes(tmp_path, b"".join(bytes.fromhex(h) for h in EXECVE_GADGETS))


@pytest.fixture
def clean_execve_elf(tmp_path):
    return elf_bytes(tmp_path, b"".join(bytes.fromhex(h) for h in EXECVE_GADGETS),
                     text=CLEAN_TEXT, data=CLEAN_DATA, name="clean.elf")


@pytest.fixture(scope="session")
def smt_solver():
    cmd = solver_command(os.environ.get("ROPSMITH_SOLVER") or shutil.which("z3"))
    if cmd is None:
        pytest.skip("no SMT-LIB solver available")
    return cmd


# opcode and ModRM bytes that make random code rich in decodable gadgets
GADGET_RICH = [0xC3, 0x58, 0x59, 0x5A, 0x5B, 0x5D, 0x5E, 0x5F, 0x41, 0x48, 0x49, 0x4C, 0x01,
               0x29, 0x31, 0x21, 0x09, 0x89, 0x8B, 0x87, 0xD8, 0xC8, 0x07, 0x17, 0x0F, 0x05,
               0xFF, 0xF7, 0xC1, 0xE0, 0x90, 0x8D, 0x83, 0x19, 0xC7]


def random_gadgets(blobs=30, seed=1, size=200):
    """Deterministic pool of gadgets scanned out of random code."""
    from ropsmith.scan import scan_bytes
    rng = random.Random(seed)
    pool = []
    for i in range(blobs):
        code = bytes(rng.choice(GADGET_RICH) if rng.random() < 0.7 else rng.randrange(256)
                     for _ in range(size))
        pool += scan_bytes(code, 0x400000 + i * 0x1000)
    return pool


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
