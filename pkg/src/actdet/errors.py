"""Exception hierarchy shared across the package."""


class ActdetError(Exception):
    """Base class for all package errors."""


class FormatError(ActdetError):
    """Malformed binary file: bad magic, bad version, or truncated payload."""


class DataError(ActdetError):
    """Structurally valid file carrying invalid values (NaN/Inf)."""


class IoError(ActdetError):
    """Filesystem-level failure wrapped with context."""


class ManifestError(ActdetError):
    """Dataset manifest violates its invariants."""


class GenerationError(ActdetError):
    """Synthetic dataset could not be generated under the given config."""


class SplitError(ActdetError):
    """Train/test split cannot be formed."""


class ShapeError(ActdetError):
    """Tensor dimensions inconsistent with the model configuration."""


class GradientError(ActdetError):
    """Analytic gradient failed verification against finite differences."""


class MetricError(ActdetError):
    """Metric undefined for the given inputs (e.g. no positive labels)."""


class TrainingError(ActdetError):
    """Training aborted (non-finite loss or unusable split)."""


class ConfigError(ActdetError):
    """Invalid or unparseable configuration."""
