"""Exception and warning types.

Every error carries an ``exit_code`` so the command line tool can map
failures onto its stable exit-status contract (2 usage, 3 data, 4 numerical).
"""


class BSSError(Exception):
    exit_code = 3


class UsageError(BSSError):
    exit_code = 2


class UnknownAlgo(UsageError):
    pass


# data errors
class DataError(BSSError):
    exit_code = 3


class EmptySignal(DataError):
    pass


class BadGeometry(DataError):
    pass


class GeometryError(DataError):
    pass


class LengthMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class RirTooLong(DataError):
    pass


class BadMaskHeader(DataError):
    pass


class SilentReference(DataError):
    pass


# numerical errors
class NumericalError(BSSError):
    exit_code = 4


class SingularMatrix(NumericalError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class DegenerateDirection(NumericalError):
    pass


class ZeroMaskEnergy(UserWarning):
    """Some frequency bins had an all-zero mask; those fell back to pure loading."""


class PermutationMismatch(UserWarning):
    """Two reports being compared resolved different source permutations."""
