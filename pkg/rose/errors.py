from typing import Optional, Sequence


class RoseError(Exception):
    """Base class for every error raised by the rose package."""


class StructuralError(RoseError, ValueError):
    """Shape, channel or argument contract violated."""


class NumericFault(RoseError, ArithmeticError):
    """A NaN or Inf showed up in an activation, gradient or loss."""

    def __init__(self, layer: str, batch: Optional[int] = None):
        self.layer = layer
        self.batch = batch
        where = f"layer '{layer}'"
        if batch is not None:
            where += f" at batch {batch}"
        super().__init__(f"Non-finite values in {where}")


class WeightsFormatError(RoseError):
    """Weights file could not be decoded."""


class BadMagicError(WeightsFormatError):
    def __init__(self, found: bytes):
        self.found = found
        super().__init__(f"bad magic: expected b'ROSEW', found {found!r}")


class VersionMismatchError(WeightsFormatError):
    def __init__(self, found: int, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(f"version mismatch: file has version {found}, reader supports {expected}")


class TruncatedFileError(WeightsFormatError):
    def __init__(self, tensor: str):
        self.tensor = tensor
        super().__init__(f"truncated file while reading tensor '{tensor}'")


class ShapeMismatchError(WeightsFormatError):
    def __init__(self, tensor: str, expected: Optional[Sequence[int]], found: Optional[Sequence[int]]):
        self.tensor = tensor
        self.expected = tuple(expected) if expected is not None else None
        self.found = tuple(found) if found is not None else None
        super().__init__(
            f"shape mismatch for tensor '{tensor}': expected {self.expected}, found {self.found}"
        )


class DatasetError(RoseError):
    """Annotation file or referenced image could not be ingested."""

    def __init__(self, message: str, path: Optional[str] = None,
                 line: Optional[int] = None, record: Optional[int] = None):
        self.path = path
        self.line = line
        self.record = record
        super().__init__(message)
