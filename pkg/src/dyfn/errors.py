"""Exception hierarchy shared by every module of the package."""


class DyfnError(Exception):
    """Base class for all package errors."""


class RejectedInputError(DyfnError, ValueError):
    """Argument shapes or values violate an operation's preconditions."""


class ConfigError(RejectedInputError):
    pass


# --- tensor container parsing -------------------------------------------------


class NTFParseError(DyfnError):
    pass


class MalformedHeaderError(NTFParseError):
    pass


class TruncatedPayloadError(NTFParseError):
    pass


class PayloadSizeError(NTFParseError):
    """Payload is longer than the header's shape implies."""


# --- sequence loading ---------------------------------------------------------


class SequenceError(DyfnError):
    pass


class MissingFileError(SequenceError, FileNotFoundError):
    pass


class FrameShapeError(SequenceError):
    pass


class MaskValidationError(SequenceError):
    pass


class GeometryValidationError(SequenceError):
    pass


# --- numerics -----------------------------------------------------------------


class NumericError(DyfnError):
    pass


class InsufficientDataError(NumericError):
    pass


class DegenerateFitError(NumericError):
    pass


class DegenerateGeometryError(NumericError):
    pass


class NoConsensusError(NumericError):
    pass


class EmptyCorrespondenceError(NumericError):
    pass


class NonFiniteError(NumericError):
    pass


class LossComponentError(NumericError):
    """A component of the total loss failed; ``component`` names it."""

    def __init__(self, component: str, cause: Exception):
        super().__init__(f"loss component '{component}' failed: {cause}")
        self.component = component
        self.cause = cause
