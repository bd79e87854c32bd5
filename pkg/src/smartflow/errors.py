"""Exception hierarchy shared by every subsystem."""


class SmartError(Exception):
    """Base class for all errors raised by smartflow."""


class ShapeMismatchError(SmartError, ValueError):
    pass


class InvalidConfigError(SmartError, ValueError):
    pass


class NonFiniteError(SmartError, FloatingPointError):
    pass


class NotScalarError(SmartError, ValueError):
    pass


class EmptyGeometryError(SmartError, ValueError):
    pass


class EmptyQuerySetError(SmartError, ValueError):
    pass


# file formats


class FormatError(SmartError, ValueError):
    pass


class TruncatedError(FormatError):
    pass


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class EmptyMeshError(FormatError):
    pass


# training / evaluation


class ZeroNormTargetError(SmartError, ValueError):
    pass


class SubsampleTooLargeError(SmartError, ValueError):
    pass


class NonFiniteLossError(NonFiniteError):
    pass


class InvalidFlowConstantsError(SmartError, ValueError):
    pass


class NonUnitNormalError(SmartError, ValueError):
    pass


class DegenerateBoundsWarning(UserWarning):
    """A coordinate axis has zero extent; normalization is identity on it."""
