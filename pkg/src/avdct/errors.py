"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures
onto its documented exit statuses without a lookup table.
"""


class AvdctError(Exception):
    exit_code = 1


class ConfigError(AvdctError, ValueError):
    """Bad shapes, bad hyperparameters, mismatched architectures."""

    exit_code = 2


class InvalidInputError(ConfigError):
    pass


class InvalidParameterError(ConfigError):
    pass


class CheckpointError(ConfigError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class IngestionError(AvdctError):
    exit_code = 3


class RecordingParseError(IngestionError):
    pass


class LengthMismatchError(IngestionError):
    pass


class NonFiniteValueError(IngestionError):
    pass


class DegenerateSignalError(AvdctError, ValueError):
    """PRD or PRDN is undefined for the supplied original."""

    exit_code = 3


class BitstreamError(AvdctError):
    exit_code = 4


class QuantizationOverflowError(BitstreamError):
    pass


class MalformedStreamError(BitstreamError):
    pass


class BadMagicError(MalformedStreamError):
    pass


class UnsupportedVersionError(MalformedStreamError):
    pass


class TruncatedFrameError(MalformedStreamError):
    pass


class ElementCountError(MalformedStreamError):
    pass


class ProtocolError(AvdctError):
    exit_code = 4

    def __init__(self, message, expected=None, received=None):
        super().__init__(message)
        self.expected = expected
        self.received = received


class DuplicateSequenceError(ProtocolError):
    pass


class SequenceGapError(ProtocolError):
    pass


class SessionError(AvdctError):
    exit_code = 4

    def __init__(self, message, last_sequence=None):
        super().__init__(message)
        self.last_sequence = last_sequence


class DivergenceError(AvdctError, ArithmeticError):
    exit_code = 5

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
