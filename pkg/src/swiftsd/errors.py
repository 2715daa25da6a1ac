"""Exception hierarchy shared by every module of the engine."""

from __future__ import annotations


class SwiftError(Exception):
    """Base class for all engine errors."""


# ---- model io -------------------------------------------------------------


class ModelFormatError(SwiftError):
    pass


class BadMagic(ModelFormatError):
    pass


class MissingTensor(ModelFormatError):
    def __init__(self, name: str):
        super().__init__(f"missing tensor {name!r}")
        self.name = name


class ShapeMismatch(ModelFormatError):
    def __init__(self, name: str, expected, got):
        super().__init__(f"tensor {name!r}: expected {expected}, got {got}")
        self.name = name
        self.expected = expected
        self.got = got


class NonFiniteWeight(ModelFormatError):
    def __init__(self, name: str):
        super().__init__(f"tensor {name!r} contains non-finite values")
        self.name = name


class BadPlantIndex(SwiftError):
    pass


class IoError(SwiftError, OSError):
    pass


class BadConfig(SwiftError):
    pass


# ---- transformer core -----------------------------------------------------


class CacheOverflow(SwiftError):
    pass


class MaskLengthMismatch(SwiftError):
    pass


class DanglingAncestor(SwiftError):
    pass


class StaleMark(SwiftError):
    pass


class NonFiniteInput(SwiftError):
    pass


class CommitError(SwiftError):
    pass


# ---- drafting / verification ----------------------------------------------


class OutOfRange(SwiftError):
    pass


class EmptyTree(SwiftError):
    pass


class InvalidDistribution(SwiftError):
    pass


class DegenerateResidual(SwiftError):
    pass


# ---- optimizer ------------------------------------------------------------


class RatioTooLarge(SwiftError):
    pass


class InsufficientContext(SwiftError):
    pass


# ---- orchestration / harness ----------------------------------------------


class BadRequest(SwiftError):
    pass


class DivZero(SwiftError, ZeroDivisionError):
    pass


class DatasetError(SwiftError):
    pass


class MalformedRecord(DatasetError):
    def __init__(self, line_no: int, reason: str = "missing 'prompt'"):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
