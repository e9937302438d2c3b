"""Exception hierarchy shared by all sdg_lab modules."""

from __future__ import annotations


class SdgLabError(Exception):
    """Base class for every error raised by the package."""


class NonFiniteCoefficient(SdgLabError):
    pass


class DimensionMismatch(SdgLabError):
    pass


class SignConditionViolated(SdgLabError):
    def __init__(self, message: str, witness=None):
        super().__init__(message)
        self.witness = witness


class AllocationTooLarge(SdgLabError):
    pass


class GridMismatch(SdgLabError):
    pass


class SpaceMismatch(SdgLabError):
    pass


class NotAPartition(SdgLabError):
    def __init__(self, message: str, path_index: int | None = None):
        super().__init__(message)
        self.path_index = path_index


class MissingNeutralizer(SdgLabError):
    pass


class NoZeroFound(SdgLabError):
    pass


class GrowthViolated(SdgLabError):
    def __init__(self, message: str, witness=None):
        super().__init__(message)
        self.witness = witness


class NonFiniteState(SdgLabError):
    def __init__(self, message: str, witness=None):
        super().__init__(message)
        self.witness = witness


class PreconditionViolated(SdgLabError):
    pass


class DeltaOutOfRange(SdgLabError):
    pass


class SingularRegression(SdgLabError):
    """Raised only when even the ridge fallback cannot be factorised."""


class NonFiniteValue(SdgLabError):
    pass


class GridTooCoarse(SdgLabError):
    pass


class EmptyGrid(SdgLabError):
    pass


class CflViolated(SdgLabError):
    pass


class NonFiniteSolution(SdgLabError):
    pass


class BoundaryPoint(SdgLabError):
    pass


class ConfigInvalid(SdgLabError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class KindMismatch(SdgLabError):
    pass
