"""ROP gadget discovery, classification, verification and chain compilation
for x86-64 ELF images."""

import logging

from .errors import RopError

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = ["RopError", "__version__"]
