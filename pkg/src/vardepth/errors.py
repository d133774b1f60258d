"""Exception hierarchy shared across the package.

Every error raised on purpose derives from VardepthError so callers (and the
CLI exit-code mapping) can tell deliberate contract violations apart from
genuine bugs.
"""


class VardepthError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VardepthError):
    """Operands have incompatible or unexpected shapes."""


class ContractError(VardepthError):
    """An API was called in a way its contract forbids."""


class NonFiniteError(VardepthError):
    """An operation produced NaN or Inf while finite checks were enabled."""


class ConfigError(VardepthError):
    """A configuration file or value is invalid."""


class DataError(VardepthError):
    """Input data is unusable (empty dataset, bad pixel values, ...)."""


class DegenerateMaskError(DataError):
    """A mask selects nothing (no valid pixels, fully masked attention row)."""


class DegenerateFitError(DataError):
    """A least-squares fit has no unique solution (constant predictions)."""


class DegenerateNormalizationError(DataError):
    """Depth normalization bounds collapsed (flat depth map)."""


class DependencyError(VardepthError):
    """A required artifact (checkpoint, dataset directory) is missing."""


class CompatibilityError(VardepthError):
    """Two checkpoints disagree on fields that must match to run together."""


class IOFormatError(VardepthError):
    """A file's bytes do not parse as the expected format."""
