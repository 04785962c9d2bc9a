"""Exception hierarchy shared by all geode modules."""


class GeodeError(Exception):
    """Base class for all errors raised by geode."""


class DataError(GeodeError, ValueError):
    """Problems with the input data (shape, missingness, emptiness)."""


class EmptyData(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class NoObservedEntries(DataError):
    pass


class ConfigError(GeodeError, ValueError):
    """Invalid run configuration or hyperparameters."""


class InvalidScenario(ConfigError):
    pass


class NumericError(GeodeError, ArithmeticError):
    """A numerical routine failed or produced an inconsistent value."""


class InvalidRank(NumericError, ValueError):
    pass


class InvalidRate(NumericError, ValueError):
    pass


class NonFiniteInput(NumericError):
    pass


class NotPositiveDefinite(NumericError):
    pass


class SingularSystem(NumericError):
    pass


class AllZeroWeights(NumericError):
    pass


class NegativeQuadForm(NumericError):
    pass


class DrawCountMismatch(GeodeError, ValueError):
    pass


class NoAdaptationSteps(GeodeError, ValueError):
    pass


class ModelFileError(GeodeError, ValueError):
    """Malformed or incompatible model file."""


class DegenerateCellWarning(UserWarning):
    """A cell whose points coincide was asked to split; it stays a leaf."""


class EmptyCellAtScale(UserWarning):
    """A cell had too few rows for a local regression; cell mean used instead."""
