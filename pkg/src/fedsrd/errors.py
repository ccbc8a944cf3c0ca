"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates a precondition (non-finite entries, bad probability, ...)."""


class InvalidRankError(ValueError):
    """Requested approximation rank lies outside [1, min(rows, cols)]."""


class EmptyInputError(ValueError):
    """An operation that needs at least one value received none."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DivergenceError(RuntimeError):
    """Local training produced a non-finite loss or non-finite parameters."""


class EmptyCohortError(ValueError):
    """An aggregation step received zero clients."""


class ConfigError(ValueError):
    """A simulation config file is malformed or contains unknown keys."""


class WireError(ValueError):
    """Base class for payload encoding/decoding failures."""


class FormatError(WireError):
    """Payload does not start with the expected magic/version/flags."""


class TruncatedPayloadError(WireError):
    """Payload ends before a complete section could be read."""


class CorruptPayloadError(WireError):
    """Payload is structurally complete but internally inconsistent."""
