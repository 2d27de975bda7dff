"""Errors and non-fatal diagnostics raised across the pipeline."""

from dataclasses import dataclass
from typing import Optional


class HashswapError(Exception):
    """Base class for user/input errors. The CLI exits with ``exit_code``."""

    exit_code = 1

    def __init__(self, message: str, vaddr: Optional[int] = None):
        self.vaddr = vaddr
        if vaddr is not None:
            message = f"{message} (at {vaddr:#x})"
        super().__init__(message)


class InvariantViolation(HashswapError):
    exit_code = 2


class ConfigError(HashswapError):
    pass


# binary model

class MalformedElf(HashswapError):
    pass


class TruncatedFile(MalformedElf):
    pass


class UndecodableInstruction(HashswapError):
    pass


class EncodingUnsupported(HashswapError):
    def __init__(self, mnemonic: str, detail: str = "", vaddr: Optional[int] = None):
        self.mnemonic = mnemonic
        message = f"cannot encode {mnemonic}"
        if detail:
            message += f": {detail}"
        super().__init__(message, vaddr)


# signature database

class UnknownAlgorithm(HashswapError):
    pass


# executor

class ExecutionError(HashswapError):
    """A run stopped before the routine or program finished."""


class GasExhausted(ExecutionError):
    pass


class MemoryFault(ExecutionError):
    pass


class UnsupportedInstruction(ExecutionError):
    pass


class UnresolvedExternalCall(ExecutionError):
    pass


class ModelMissing(ExecutionError):
    def __init__(self, name: str, vaddr: Optional[int] = None):
        self.name = name
        super().__init__(f"no model for libc routine {name}", vaddr)


# taint scope

class TargetNeverCalled(HashswapError):
    pass


class RecursiveTarget(HashswapError):
    pass


# rewriter

class RewriteError(HashswapError):
    pass


class DisplacementOverflow(RewriteError):
    pass


class OffsetInsideExpandedTail(RewriteError):
    pass


class NoPrologueFound(RewriteError):
    pass


class NonImmediateAllocationSize(RewriteError):
    pass


class RoutineTooSmall(RewriteError):
    pass


class StaleEdit(RewriteError):
    pass


class BundleError(HashswapError):
    pass


# reports

class ReportMismatch(HashswapError):
    pass


@dataclass(frozen=True)
class Diagnostic:
    """A finding worth reporting that does not stop the pipeline."""

    kind: str
    vaddr: int
    detail: str = ""

    def render(self) -> str:
        line = f"diagnostic {self.kind} {self.vaddr:x}"
        if self.detail:
            line += f" {self.detail}"
        return line
