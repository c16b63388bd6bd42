"""Payload specifications and the platform syscall / calling convention table."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .x86 import MASK64, REGS64

DEFAULT_TABLE = "syscalls_linux_x86_64.json"

SET_REGS = "SetRegs"
MEM_WRITE = "MemWrite"
SYSCALL = "Syscall"
CALL_FUNCTION = "CallFunction"
KINDS = (SET_REGS, MEM_WRITE, SYSCALL, CALL_FUNCTION)


@dataclass(frozen=True)
class Platform:
    name: str
    number_register: str
    syscall_args: tuple
    call_args: tuple
    syscalls: dict = field(default_factory=dict, compare=False, hash=False)

    def number(self, name):
        if isinstance(name, int):
            return name
        try:
            return self.syscalls[name]
        except KeyError:
            raise ValueError(f"unknown syscall {name!r} for {self.name}") from None

    @classmethod
    def from_json(cls, doc):
        return cls(f"{doc.get('os', '?')}-{doc['arch']}", doc["syscall_number_register"],
                   tuple(doc["syscall_args"]), tuple(doc["call_args"]), dict(doc["syscalls"]))

    @classmethod
    def load(cls, path=None):
        """Load a table file, or the bundled Linux x86-64 table."""
        if path is None:
            res = resources.files("ropsmith").joinpath("data").joinpath(DEFAULT_TABLE)
            text = res.read_text("utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_json(json.loads(text))


_DEFAULT_PLATFORM = None


def default_platform():
    global _DEFAULT_PLATFORM
    if _DEFAULT_PLATFORM is None:
        _DEFAULT_PLATFORM = Platform.load()
    return _DEFAULT_PLATFORM


@dataclass(frozen=True)
class Pointer:
    """An argument that points at ``data`` placed at ``addr``."""

    addr: int
    data: bytes

    def __int__(self):
        return self.addr


def arg_value(a):
    return int(a) & MASK64


@dataclass(frozen=True)
class PayloadSpec:
    kind: str
    regs: tuple = ()            # ((reg, value), ...)
    writes: tuple = ()          # ((addr, bytes), ...)
    number: int | None = None
    args: tuple = ()            # ints or Pointer
    target: int | None = None
    bad_bytes: frozenset = frozenset()
    platform: Platform | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown payload kind {self.kind!r}")
        if self.platform is None:
            object.__setattr__(self, "platform", default_platform())
        object.__setattr__(self, "bad_bytes", frozenset(self.bad_bytes))
        for r, _ in self.regs:
            if r not in REGS64 or r == "rsp":
                raise ValueError(f"cannot target register {r!r}")
        for _, data in self.writes:
            if not data:
                raise ValueError("memory writes need at least one byte")
        if self.kind == MEM_WRITE and not self.writes:
            raise ValueError("MemWrite payload without data")
        order = self.arg_registers
        if len(self.args) > len(order):
            raise ValueError(f"{len(self.args)} arguments, at most {len(order)} supported")

    # -- constructors
    @classmethod
    def set_regs(cls, regs, **kw):
        return cls(SET_REGS, regs=tuple(sorted((r, v & MASK64) for r, v in dict(regs).items())), **kw)

    @classmethod
    def mem_write(cls, addr, data, **kw):
        return cls(MEM_WRITE, writes=((addr, bytes(data)),), **kw)

    @classmethod
    def syscall(cls, number, args=(), writes=(), platform=None, **kw):
        platform = platform or default_platform()
        return cls(SYSCALL, number=platform.number(number), args=tuple(args),
                   writes=tuple(writes), platform=platform, **kw)

    @classmethod
    def call_function(cls, target, args=(), writes=(), **kw):
        return cls(CALL_FUNCTION, target=target, args=tuple(args), writes=tuple(writes), **kw)

    @classmethod
    def execve(cls, binsh_addr, path=b"/bin/sh\0", **kw):
        ptr = Pointer(binsh_addr, path)
        return cls.syscall("execve", (ptr, 0, 0), writes=((binsh_addr, path),), **kw)

    # -- derived views
    @property
    def arg_registers(self):
        if self.kind == SYSCALL:
            return self.platform.syscall_args
        return self.platform.call_args

    def register_goals(self):
        """Register values the payload needs when its last gadget runs."""
        if self.kind == SET_REGS:
            return dict(self.regs)
        out = {r: arg_value(a) for r, a in zip(self.arg_registers, self.args)}
        if self.kind == SYSCALL:
            out[self.platform.number_register] = self.number & MASK64
        return out

    def pointer_args(self):
        return [(r, a) for r, a in zip(self.arg_registers, self.args) if isinstance(a, Pointer)]

    def describe(self):
        if self.kind == SET_REGS:
            return "SetRegs(" + ", ".join(f"{r}={v:#x}" for r, v in self.regs) + ")"
        if self.kind == MEM_WRITE:
            return "MemWrite(" + ", ".join(f"{a:#x}={d!r}" for a, d in self.writes) + ")"
        args = ", ".join(f"&{a.data!r}" if isinstance(a, Pointer) else hex(a) for a in self.args)
        if self.kind == SYSCALL:
            return f"Syscall({self.number}, {args})"
        return f"CallFunction({self.target:#x}, {args})"
