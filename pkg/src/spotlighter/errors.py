"""Exception hierarchy shared across the package.

Every error raised by public operations derives from SpotlighterError so
callers can catch the whole family at once. The CLI maps subfamilies to
distinct exit codes (see cli.EXIT_*).
"""


class SpotlighterError(Exception):
    """Base class for all package errors."""


# --- numeric domain errors ------------------------------------------------

class ZeroVector(SpotlighterError):
    """A vector with (near-)zero norm where a direction is required."""


class DimMismatch(SpotlighterError):
    """Operands disagree on a shared dimension."""


class NonPositiveTemperature(SpotlighterError):
    """Softmax/scaling temperature must be strictly positive."""


class NotADistribution(SpotlighterError):
    """Input does not sum to one or has negative entries."""


class NonFiniteLoss(SpotlighterError):
    """A loss or objective evaluated to NaN/Inf."""


# --- configuration & request errors ---------------------------------------

class ConfigError(SpotlighterError):
    """Invalid or unknown configuration key/value."""


class InvalidSpec(SpotlighterError):
    """Synthetic feature specification violates its invariants."""


class InvalidK(SpotlighterError):
    """Prototype count K must be at least 1."""


class KOutOfRange(SpotlighterError):
    """Selection size k outside [1, n_tokens]."""


class LabelOutOfRange(SpotlighterError):
    """Category label not within [0, n_classes)."""


class EmptySelection(SpotlighterError):
    """Stratification requires a nonempty selected set."""


class EmptySplit(SpotlighterError):
    """Evaluation split contains no items."""


class WorkloadTooSmall(SpotlighterError):
    """Benchmark workload below the minimum item count."""


# --- file format errors ----------------------------------------------------

class BadMagic(SpotlighterError):
    """File does not start with the expected magic bytes."""


class TruncatedFile(SpotlighterError):
    """File ends before the declared payload is complete."""


class HeaderMismatch(SpotlighterError):
    """Declared header sizes disagree with the payload length."""


class VersionMismatch(SpotlighterError):
    """File format version not supported by this build."""
