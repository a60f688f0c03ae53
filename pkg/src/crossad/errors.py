"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class CrossadError(Exception):
    """Base class for toolkit errors."""


class ConfigError(CrossadError):
    """Invalid configuration, arguments, or API misuse."""


class DataError(CrossadError):
    """Malformed or contract-violating input data."""


class DimensionError(DataError):
    """Tensor shape mismatch; the message names the offending axis."""


class NumericalError(CrossadError):
    """Non-finite values or a failed numerical operation."""


class AudioError(DataError):
    """Base for WAV container violations."""


class UnsupportedContainerError(AudioError):
    pass


class UnsupportedFormatError(AudioError):
    pass


class TruncatedDataError(AudioError):
    pass


class TooShortError(AudioError):
    pass
