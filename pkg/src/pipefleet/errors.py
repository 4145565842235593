"""Exception types shared across the foreman, workers, transport and SDK."""

from __future__ import annotations


class PipefleetError(Exception):
    """Base class for every error raised by this package."""

    code = "Error"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        base = super().__str__()
        return f"{self.code}: {base}" if base else self.code


class PipelineValidationError(PipefleetError):
    """Pipeline submission rejected; carries every violated invariant."""

    code = "ValidationFailure"

    def __init__(self, violations: list[tuple[str, str]]):
        self.violations = list(violations)
        summary = "; ".join(f"{code}: {msg}" for code, msg in self.violations)
        super().__init__(summary)

    def codes(self) -> list[str]:
        return [code for code, _ in self.violations]


class ChecksumMismatch(PipefleetError):
    code = "ChecksumMismatch"


# -- task graph -------------------------------------------------------------

class UnknownTask(PipefleetError):
    code = "UnknownTask"


class InvalidState(PipefleetError):
    code = "InvalidState"


class ShapeMismatch(PipefleetError):
    code = "ShapeMismatch"


# -- transport ---------------------------------------------------------------

class TransportError(PipefleetError):
    code = "TransportError"


class Base64Error(TransportError):
    code = "Base64Error"


class DecompressError(TransportError):
    code = "DecompressError"


class LengthMismatch(TransportError):
    code = "LengthMismatch"


class StoreWriteError(TransportError):
    code = "StoreWriteError"


class MissingKey(TransportError):
    code = "MissingKey"


class HashMismatch(TransportError):
    code = "HashMismatch"


# -- scheduler ---------------------------------------------------------------

class DegenerateMatrix(PipefleetError):
    code = "DegenerateMatrix"


class EmptyEligibleSet(PipefleetError):
    code = "EmptyEligibleSet"


class NoWorkersAvailable(PipefleetError):
    code = "NoWorkersAvailable"


# -- foreman / worker --------------------------------------------------------

class UnknownWorker(PipefleetError):
    code = "UnknownWorker"


class WrongWorker(PipefleetError):
    code = "WrongWorker"


class ResidencyViolation(PipefleetError):
    code = "ResidencyViolation"


class NotResident(PipefleetError):
    code = "NotResident"


class PartitionNotResident(PipefleetError):
    code = "PartitionNotResident"


# -- harness -----------------------------------------------------------------

class ConfigError(PipefleetError):
    code = "ConfigError"


class UnsupportedConfig(PipefleetError):
    code = "UnsupportedConfig"
