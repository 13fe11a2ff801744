"""Exception hierarchy shared across the package."""


class AdmmForgeError(Exception):
    """Base class for all errors raised by admmforge."""


class ShapeError(AdmmForgeError):
    """Tensor shapes are incompatible with the requested operation."""


class InputError(AdmmForgeError):
    """An argument value is outside the operation's domain."""


class NumericError(AdmmForgeError):
    """A computation produced NaN/inf where finite values are required."""


class ConfigError(AdmmForgeError):
    """A plan or run configuration is inconsistent or incomplete."""


class StateError(AdmmForgeError):
    """Solver state does not match the network it is applied to."""


class FormatError(AdmmForgeError):
    """A file does not conform to its declared binary format."""


class CorruptionError(FormatError):
    """Stored data fails its integrity check."""


class VersionError(FormatError):
    """A stored artifact was written by an incompatible format version."""


class FeasibilityError(AdmmForgeError):
    """A model violates the compression constraints it claims to satisfy."""
