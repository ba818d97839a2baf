"""Exception hierarchy. The CLI maps each family onto a process exit code."""


class UnlearnError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(UnlearnError, ValueError):
    """Tensor dimensions are incompatible for the requested op."""


class NumericError(UnlearnError, ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class GraphError(UnlearnError, RuntimeError):
    """Misuse of the differentiation graph (non-scalar loss, repeated backward)."""


class ConfigError(UnlearnError, ValueError):
    """Invalid configuration value."""


class DataError(UnlearnError, ValueError):
    """Malformed input data: bad records, out-of-range token ids, empty corpora."""


class FormatError(DataError):
    """A serialized file does not follow the expected binary or text layout."""


class ShardError(UnlearnError, RuntimeError):
    """A shard worker failed; the sharded run is abandoned without partial results."""
