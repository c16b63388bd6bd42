"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`RopError`,
which the CLI maps to exit status 1.
"""


class RopError(Exception):
    """Base class for domain errors."""


# -- image loading -----------------------------------------------------------

class LoadError(RopError):
    pass


class BadMagic(LoadError):
    pass


class MalformedHeaders(LoadError):
    pass


class NoExecutableCode(LoadError):
    pass


# -- decoding ----------------------------------------------------------------

class DecodeError(RopError):
    def __init__(self, message, offset=None, tag=None):
        super().__init__(message)
        self.offset = offset
        self.tag = tag


class Truncated(DecodeError):
    pass


class Unsupported(DecodeError):
    pass


class Privileged(Unsupported):
    pass


class Undecodable(DecodeError):
    """A sequence could not be decoded; ``offset`` names the failing byte."""


class NoTerminator(DecodeError):
    pass


# -- semantics / verification ---------------------------------------------

class UnsupportedInstr(RopError):
    pass


class StepFault(RopError):
    pass


class NonConstantStackOffset(RopError):
    pass


class OracleFailure(RopError):
    pass


# -- catalog -----------------------------------------------------------------

class CatalogError(RopError):
    pass


class VersionMismatch(CatalogError):
    pass


class ParseError(CatalogError):
    pass


# -- chain compilation -------------------------------------------------------

class CompileError(RopError):
    pass


class MissingGadget(CompileError):
    def __init__(self, gtype, detail=""):
        msg = f"MissingGadget({gtype})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.gtype = gtype


class Unsatisfiable(CompileError):
    def __init__(self, regs, detail=""):
        names = ",".join(sorted(regs)) if not isinstance(regs, str) else regs
        msg = f"Unsatisfiable({names})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.regs = regs


class NonComposable(CompileError):
    pass


class NoPath(CompileError):
    pass


class BadcharUnavoidable(CompileError):
    def __init__(self, detail, offset=None):
        super().__init__(f"BadcharUnavoidable: {detail}")
        self.offset = offset


class NoTransitionAvailable(CompileError):
    pass


class SplitNotFound(NoTransitionAvailable):
    pass
