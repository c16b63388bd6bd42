"""Command-line front end: scan, catalog, chain, emulate, verify."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .badchars import parse_bad_bytes
from .catalog import Catalog, catalog_from_image
from .chaincomp import ChainCompiler, emit_stack, halt_sentinel
from .chainemu import EmuConfig, Emulator, check_payload
from .classify import DEFAULT_SEEDS
from .elf import load_image
from .errors import RopError
from .payload import Platform, PayloadSpec
from .scan import ScanConfig, galileo_scan
from .verifier import SOLVER_ENV, check_claim, default_oracle

log = logging.getLogger("ropsmith")

PAYLOADS = ("setregs", "memwrite", "syscall", "call", "execve")


class UsageError(Exception):
    pass


def _int(text):
    try:
        return int(text, 0)
    except ValueError:
        raise UsageError(f"not an integer: {text!r}") from None


def _seeds(n):
    if n is None:
        return None
    if n < 1:
        raise UsageError("--seeds must be at least 1")
    return tuple(DEFAULT_SEEDS[i] if i < len(DEFAULT_SEEDS) else 0x5EED0001 + i for i in range(n))


def _scan_cfg(args):
    try:
        return ScanConfig(max_insns=args.max_insns, max_back_bytes=args.max_back_bytes,
                          skip_writable_exec=not args.include_wx)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _bad(args):
    try:
        return parse_bad_bytes(args.bad_bytes)
    except ValueError as exc:
        raise UsageError(f"--bad-bytes: {exc}") from None


def _write_out(args, data):
    if isinstance(data, str):
        data = data.encode()
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


# ---------------------------------------------------------------------------
# payload arguments

def _data_arg(text):
    if text.startswith("hex:"):
        return bytes.fromhex(text[4:])
    return text.encode().decode("unicode_escape").encode("latin-1")


def writable_address(image, nbytes, bad=frozenset()):
    """A spot inside a writable region with room for ``nbytes``, preferring
    an address free of restricted bytes."""
    regions = image.writable_regions() if image is not None else []
    first = None
    for r in regions:
        for va in range(r.base_va + 0x10, r.end_va - nbytes - 0x10, 8):
            if first is None:
                first = va
            if not any(b in bad for b in va.to_bytes(8, "little")):
                return va
            if va - r.base_va > 0x4000:
                break
    if first is None:
        raise UsageError("image has no writable region; pass --binsh-addr")
    return first


def build_payload(args, image, bad, platform):
    kind, rest = args.payload, list(args.values)
    kw = {"bad_bytes": bad, "platform": platform}
    if kind == "setregs":
        regs = {}
        for item in rest:
            r, sep, v = item.partition("=")
            if not sep:
                raise UsageError(f"setregs expects reg=value, got {item!r}")
            regs[r.strip()] = _int(v)
        if not regs:
            raise UsageError("setregs needs at least one reg=value")
        return PayloadSpec.set_regs(regs, **kw)
    if kind == "memwrite":
        if len(rest) != 2:
            raise UsageError("memwrite expects ADDR DATA (DATA as text or hex:...)")
        return PayloadSpec.mem_write(_int(rest[0]), _data_arg(rest[1]), **kw)
    if kind == "syscall":
        if not rest:
            raise UsageError("syscall expects NUMBER|NAME [ARG...]")
        num = _int(rest[0]) if rest[0][0].isdigit() else rest[0]
        return PayloadSpec.syscall(num, [_int(a) for a in rest[1:]], **kw)
    if kind == "call":
        if not rest:
            raise UsageError("call expects ADDR [ARG...]")
        return PayloadSpec.call_function(_int(rest[0]), [_int(a) for a in rest[1:]], **kw)
    # execve
    path = b"/bin/sh\0"
    addr = _int(args.binsh_addr) if args.binsh_addr else None
    if args.binsh:
        if addr is None:
            addr = writable_address(image, len(path), bad)
        return PayloadSpec.execve(addr, path, **kw)
    if addr is None:
        raise UsageError("execve needs --binsh or --binsh-addr pointing at an existing path")
    return PayloadSpec.syscall("execve", (addr, 0, 0), **kw)


# ---------------------------------------------------------------------------
# subcommands

def cmd_scan(args):
    image = load_image(args.image)
    gadgets = galileo_scan(image, _scan_cfg(args))
    if args.format == "json":
        doc = [{"va": g.va, "va_hex": f"{g.va:#x}", "bytes": g.raw_bytes.hex(), "text": g.text,
                "terminator": g.terminator.value} for g in gadgets]
        _write_out(args, json.dumps(doc, indent=1) + "\n")
    else:
        _write_out(args, "".join(f"{g.va:#x}: {g.text}\n" for g in gadgets))
    log.info("%d gadgets", len(gadgets))
    return 0


def cmd_catalog(args):
    image = load_image(args.image)
    oracle = default_oracle(args.solver)
    cat = catalog_from_image(image, _scan_cfg(args), _seeds(args.seeds), oracle, _bad(args) or None,
                             args.include_unverified)
    _write_out(args, cat.dumps())
    print(f"{len(cat)} entries; " + ", ".join(f"{g}: {n}" for g, n in cat.coverage().items()),
          file=sys.stderr)
    return 0


def _image_for(args, cat=None):
    if args.image:
        return load_image(args.image)
    if cat is not None:
        p = cat.provenance.get("image")
        if p and os.path.exists(p):
            img = load_image(p)
            if img.sha256 == cat.provenance.get("sha256"):
                return img
            log.warning("%s changed since the catalog was built; not using it", p)
    return None


def cmd_chain(args):
    bad = _bad(args)
    platform = Platform.load(args.syscall_table)
    if args.catalog:
        cat = Catalog.load(args.catalog)
        image = _image_for(args, cat)
    elif args.image:
        image = load_image(args.image)
        cat = catalog_from_image(image, _scan_cfg(args), _seeds(args.seeds),
                                 default_oracle(args.solver), None, args.include_unverified)
    else:
        raise UsageError("chain needs --image or --catalog")
    payload = build_payload(args, image, bad, platform)
    comp = ChainCompiler(cat, bad, platform, image=image, force_fsm=args.force_fsm)
    chain = comp.compile(payload)
    layout = emit_stack(chain)
    text = layout.render_text()
    if args.format == "raw":
        body = layout.bytes
    elif args.format == "json":
        doc = layout.to_json()
        doc["payload"] = payload.describe()
        doc["gadgets"] = chain.describe()
        body = json.dumps(doc, indent=1) + "\n"
    else:
        body = text
    _write_out(args, body)
    if args.out:
        sys.stdout.write(text)
    return 0


def _load_layout(path):
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError):
        return raw, None
    if not isinstance(doc, dict) or "bytes" not in doc:
        return raw, None
    halt = tuple(x for x in (doc.get("halt_va"), doc.get("final_target")) if x is not None)
    return bytes.fromhex(doc["bytes"]), halt


def cmd_emulate(args):
    image = load_image(args.image)
    bad = _bad(args)
    payload = build_payload(args, image, bad, Platform.load(args.syscall_table))
    raw, halt = _load_layout(args.layout)
    if halt is None:
        halt = (halt_sentinel(bad, image.regions),)
        if payload.target is not None:
            halt += (payload.target,)
    n = args.seeds or 10
    cfg = EmuConfig(seeds=tuple(range(1, n + 1)))
    emu = Emulator(image, cfg)
    ok = True
    dumps = []
    for res in emu.run_all(raw, halt=halt):
        r = check_payload(res.trace, res.state, payload)
        ok &= r.ok
        print(f"seed {res.seed}: {r.report()}")
        dumps.append(f"# seed {res.seed}\n" + res.trace.dump())
    if args.trace:
        Path(args.trace).write_text("".join(dumps), encoding="utf-8")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_verify(args):
    cat = Catalog.load(args.catalog)
    oracle = default_oracle(args.solver)
    counts = {}
    for e in cat.entries:
        res = check_claim(e.gadget, e.claim, oracle)
        counts[res.status] = counts.get(res.status, 0) + 1
        changed = "" if res.status == e.verification else f" (was {e.verification})"
        print(f"{e.va:#x} {e.gtype}({e.describe()}): {res.status}{changed}")
    print(", ".join(f"{k}: {v}" for k, v in sorted(counts.items())), file=sys.stderr)
    return 1 if counts.get("Refuted") else 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="ropsmith", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def scan_opts(sp):
        sp.add_argument("--max-insns", type=int, default=5)
        sp.add_argument("--max-back-bytes", type=int, default=25)
        sp.add_argument("--include-wx", action="store_true",
                        help="also scan writable+executable segments")

    def oracle_opts(sp):
        sp.add_argument("--solver", help=f"SMT-LIB solver executable (env {SOLVER_ENV})")
        sp.add_argument("--seeds", type=int, help="number of random seeds")
        sp.add_argument("--include-unverified", action="store_true")

    def payload_opts(sp):
        sp.add_argument("--payload", choices=PAYLOADS, required=True)
        sp.add_argument("values", nargs="*", help="payload operands, e.g. rax=7")
        sp.add_argument("--binsh", action="store_true", help="write /bin/sh for execve")
        sp.add_argument("--binsh-addr", help="address for the execve path")
        sp.add_argument("--bad-bytes", default="", help='restricted bytes, e.g. "00,0a"')
        sp.add_argument("--syscall-table", help="syscall table JSON (default: bundled)")

    sp = sub.add_parser("scan", help="list gadgets")
    sp.add_argument("--image", required=True)
    sp.add_argument("--format", choices=("text", "json"), default="text")
    sp.add_argument("--out")
    scan_opts(sp)
    sp.set_defaults(func=cmd_scan)

    sp = sub.add_parser("catalog", help="scan, classify and verify into a catalog file")
    sp.add_argument("--image", required=True)
    sp.add_argument("--out")
    sp.add_argument("--bad-bytes", default="")
    scan_opts(sp)
    oracle_opts(sp)
    sp.set_defaults(func=cmd_catalog)

    sp = sub.add_parser("chain", help="compile a payload into a stack layout")
    sp.add_argument("--image")
    sp.add_argument("--catalog")
    sp.add_argument("--format", choices=("raw", "text", "json"), default="text")
    sp.add_argument("--out")
    sp.add_argument("--force-fsm", action="store_true",
                    help="never rely on pre-zeroed memory for string terminators")
    scan_opts(sp)
    oracle_opts(sp)
    payload_opts(sp)
    sp.set_defaults(func=cmd_chain)

    sp = sub.add_parser("emulate", help="run a layout and check the payload")
    sp.add_argument("--image", required=True)
    sp.add_argument("--layout", required=True, help="raw or JSON layout from `chain`")
    sp.add_argument("--seeds", type=int, default=10)
    sp.add_argument("--trace", help="write the event trace here")
    payload_opts(sp)
    sp.set_defaults(func=cmd_emulate)

    sp = sub.add_parser("verify", help="re-verify every catalog claim")
    sp.add_argument("--catalog", required=True)
    sp.add_argument("--solver")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ropsmith: error: {exc}", file=sys.stderr)
        return 2
    except RopError as exc:
        name, msg = type(exc).__name__, str(exc)
        print(f"ropsmith: {msg if msg.startswith(name) else f'{name}: {msg}'}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"ropsmith: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"ropsmith: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
