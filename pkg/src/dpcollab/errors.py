"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes (see cli.py), so new error
conditions should subclass one of the categories below rather than raising
bare ValueError.
"""


class DpCollabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DpCollabError):
    """Invalid parameters, shapes, or session configuration."""


class FormatError(DpCollabError):
    """Malformed external input (IDX files, checkpoints, ledger files)."""


class NumericError(DpCollabError):
    """Non-finite intermediate values or failed numerical procedures."""


class CalibrationError(DpCollabError):
    """Noise calibration cannot meet the requested privacy budget."""


class ProtocolError(DpCollabError):
    """Violation of the session protocol (bad messages, mismatched state)."""


class TamperError(ProtocolError):
    """Authenticated decryption failed: ciphertext or key is wrong."""


class ReplayError(ProtocolError):
    """Envelope sequence number did not advance: replayed or stale message."""


class SynchronizationError(ProtocolError):
    """Missing, duplicate, or out-of-iteration component messages."""


class ProtocolAbort(ProtocolError):
    """A component failed mid-session; carries component id and iteration."""

    def __init__(self, component_id: str, iteration: int, reason: str):
        self.component_id = component_id
        self.iteration = iteration
        self.reason = reason
        super().__init__(f"{component_id} aborted at iteration {iteration}: {reason}")
