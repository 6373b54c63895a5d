"""Exception hierarchy shared by every fedclaims module."""


class FedClaimsError(Exception):
    """Base class for all library errors."""


class ConfigError(FedClaimsError, ValueError):
    pass


class ShapeError(FedClaimsError, ValueError):
    pass


class InputError(FedClaimsError, ValueError):
    pass


class NumericError(FedClaimsError, ArithmeticError):
    pass


class IngestionError(FedClaimsError, ValueError):
    pass


class AggregationError(FedClaimsError, ValueError):
    pass


class UndefinedDenominatorError(FedClaimsError, ZeroDivisionError):
    """Percentage error requested on labels that sum to zero."""


class ReportError(FedClaimsError, ValueError):
    pass


class TrainingDivergedError(FedClaimsError):
    def __init__(self, message, round=None, collaborator=None):
        super().__init__(message)
        self.round = round
        self.collaborator = collaborator


# -- wire protocol -----------------------------------------------------------


class EncodeError(FedClaimsError, ValueError):
    pass


class DecodeError(FedClaimsError, ValueError):
    """Base class for malformed frames."""


class BadMagicError(DecodeError):
    pass


class UnsupportedVersionError(DecodeError):
    def __init__(self, message, version=None, sender_id=None):
        super().__init__(message)
        self.version = version
        self.sender_id = sender_id


class UnknownMessageTypeError(DecodeError):
    pass


class TruncatedFrameError(DecodeError):
    pass


class LengthMismatchError(DecodeError):
    pass


class TrailingBytesError(DecodeError):
    pass


class InvalidPayloadError(DecodeError):
    pass


class ChannelError(FedClaimsError):
    pass


class ChannelTimeout(ChannelError, TimeoutError):
    pass


class ChannelClosed(ChannelError):
    pass


class ProtocolError(FedClaimsError):
    pass


class ProtocolVersionError(ProtocolError):
    pass


class OrchestrationError(FedClaimsError):
    def __init__(self, message, round=None, collaborator=None):
        super().__init__(message)
        self.round = round
        self.collaborator = collaborator


class ModelFileError(FedClaimsError, ValueError):
    """Model file that cannot be parsed."""
