"""Regenerate decoder_golden.json with capstone as the reference disassembler.

Run offline (``pip install capstone``); the test suite only reads the JSON.
Windows are drawn until 10,000 of them decode successfully with ropsmith;
any disagreement with capstone aborts generation.
"""

import json
import random
import sys
from pathlib import Path

import capstone
from capstone import x86 as cx

from ropsmith.errors import DecodeError
from ropsmith.x86 import decode_instruction

OUT = Path(__file__).with_name("decoder_golden.json")
N = 10_000

_LEADS = [0x50, 0x58, 0x90, 0xB8, 0xC3, 0xC2, 0xC9, 0x0F, 0x01, 0x03, 0x05, 0x09, 0x0B,
          0x0D, 0x19, 0x1B, 0x1D, 0x21, 0x23, 0x25, 0x29, 0x2B, 0x2D, 0x31, 0x33, 0x35,
          0x81, 0x83, 0x87, 0x89, 0x8B, 0x8D, 0xC1, 0xC7, 0xD1, 0xF7, 0xFF]


def window(rng):
    n = rng.randint(1, 15)
    body = [rng.randrange(256) for _ in range(n)]
    if rng.random() < 0.85:
        lead = rng.choice(_LEADS)
        if lead in (0x50, 0x58, 0x90, 0xB8):
            lead += rng.randrange(8)
        head = [lead]
        if lead == 0x0F:
            head.append(rng.choice([0x05, 0x1F]))
        if rng.random() < 0.6:
            head.insert(0, 0x40 | rng.randrange(16))
        body = head + body
    return bytes(body[:15])


def cs_canon(insn):
    mn = {"movabs": "mov"}.get(insn.mnemonic, insn.mnemonic)
    ops = []
    for op in insn.operands:
        if op.type == cx.X86_OP_REG:
            ops.append(["reg", insn.reg_name(op.reg)])
        elif op.type == cx.X86_OP_IMM:
            ops.append(["imm", op.imm & ((1 << (8 * op.size)) - 1)])
        else:
            m = op.mem
            index = insn.reg_name(m.index) if m.index else None
            scale = m.scale
            if index == "riz":      # SIB with no index register
                index, scale = None, 1
            ops.append(["mem", insn.reg_name(m.base) if m.base else None,
                        index, scale, m.disp, 8 * op.size])
    if mn == "xchg":
        ops.sort()
    return {"mnemonic": mn, "length": insn.size, "operands": ops}


def ours_canon(insn):
    ops = []
    for o in insn.operands:
        if o.kind == "reg":
            ops.append(["reg", str(o)])
        elif o.kind == "imm":
            ops.append(["imm", o.imm])
        else:
            ops.append(["mem", o.base, o.index, o.scale, o.disp, o.width])
    if insn.mnemonic.value == "xchg":
        ops.sort()
    return {"mnemonic": insn.mnemonic.value, "length": insn.length, "operands": ops}


def main(seed=2024):
    rng = random.Random(seed)
    md = capstone.Cs(capstone.CS_ARCH_X86, capstone.CS_MODE_64)
    md.detail = True
    rows, seen = [], set()
    while len(rows) < N:
        w = window(rng)
        try:
            ours = decode_instruction(w, 0, 0x1000)
        except DecodeError:
            continue
        if w[:ours.length] in seen:
            continue
        seen.add(w[:ours.length])
        ref = next(md.disasm(w, 0x1000, 1), None)
        if ref is None:
            sys.exit(f"capstone rejects {w.hex()} decoded by us as {ours}")
        canon = cs_canon(ref)
        if canon != ours_canon(ours):
            sys.exit(f"mismatch on {w.hex()}:\n ours {ours_canon(ours)}\n  ref {canon}")
        rows.append({"bytes": w.hex(), **canon})
    OUT.write_text(json.dumps({"reference": f"capstone {capstone.__version__}", "seed": seed,
                               "windows": rows}, indent=0))
    print(f"wrote {len(rows)} windows to {OUT}")


if __name__ == "__main__":
    main()
