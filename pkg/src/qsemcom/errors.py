"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, runtime
failures exit 2, partial results (e.g. missing codec backend) exit 3.
"""


class QsemcomError(Exception):
    """Base class for all package errors."""


class ConfigError(QsemcomError):
    """Invalid or unknown configuration keys/values."""


class DatasetError(QsemcomError):
    """Dataset loading or invariant violations."""


class CapabilityError(QsemcomError):
    """A pluggable backend (pretrained encoder, external scorer, codec)
    is not available in this environment."""


class ChannelError(QsemcomError):
    """Physical-layer misconfiguration (unknown scheme, bad shapes)."""


class TrainingDiverged(QsemcomError):
    """Non-finite loss encountered; a diagnostic snapshot was written."""


class PartialResult(QsemcomError):
    """The run completed but some component was skipped (exit code 3)."""
