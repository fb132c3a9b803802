"""Exception hierarchy shared by every ufedgan module.

Each error carries an ``exit_code`` so the command-line runner can map
failures onto stable process exit statuses.
"""


class UFedGanError(Exception):
    exit_code = 1


class ConfigError(UFedGanError):
    exit_code = 2


class DataError(UFedGanError):
    exit_code = 3


class ParseError(DataError):
    """Malformed input file; ``offset`` is the byte position of the defect."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(UFedGanError):
    exit_code = 4


class FrameError(ProtocolError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LinkError(ProtocolError):
    pass


class ReplayError(ProtocolError):
    """Transcript consumed out of order or structurally incompatible."""

    def __init__(self, message, cursor=None):
        if cursor is not None:
            message = f"{message} (transcript cursor {cursor})"
        super().__init__(message)
        self.cursor = cursor


class NumericalError(UFedGanError):
    exit_code = 5


class DimensionError(NumericalError, ValueError):
    pass


class DomainError(NumericalError, ValueError):
    pass


class ContractError(UFedGanError, ValueError):
    pass


class TapeStateError(UFedGanError, RuntimeError):
    pass


class TrainingError(NumericalError):
    pass


class TranscriptError(DataError):
    """Corrupt transcript file; ``frame_index`` names the offending frame."""

    def __init__(self, message, frame_index=None, offset=None):
        if frame_index is not None:
            message = f"{message} (frame {frame_index})"
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.frame_index = frame_index
        self.offset = offset
