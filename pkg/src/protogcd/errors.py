"""Exception types shared across the package.

Plain ``ValueError`` is used for mathematical domain errors (zero vectors,
dimension mismatches, bad temperatures); the classes below mark conditions
a caller may want to handle separately.
"""


class ProtoGcdError(Exception):
    """Base class for package-specific errors."""


class ConfigError(ProtoGcdError):
    """Invalid or inconsistent configuration."""


class DataFormatError(ProtoGcdError):
    """On-disk container is malformed (bad magic, version, truncation)."""


class IntegrityError(ProtoGcdError):
    """Data violates a structural invariant (labeling rule, norms)."""


class UndefinedLossError(ProtoGcdError):
    """A loss term is undefined for the given batch (e.g. no positive pairs)."""


class NonFiniteError(ProtoGcdError):
    """A loss or gradient became NaN/inf; carries a diagnostic message."""
