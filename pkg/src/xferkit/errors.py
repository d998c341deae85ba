"""Error taxonomy shared across connectors, the engine, and the control plane.

Retryable errors are transient backend conditions; the engine retries them
with backoff up to the task's retry budget. Everything else fails fast.
"""


class TransferError(Exception):
    """Base class for all toolkit errors."""


class RetryableError(TransferError):
    """Transient condition; safe to retry the operation."""


class AuthFailed(TransferError):
    pass


class ConfigInvalid(TransferError):
    pass


class SessionClosed(TransferError):
    pass


class NotFound(TransferError):
    pass


class PermissionDenied(TransferError):
    pass


class AlreadyExists(TransferError):
    pass


class Unsupported(TransferError):
    pass


class RangeInvalid(TransferError):
    pass


class NoSpace(TransferError):
    pass


class BackendThrottled(RetryableError):
    """Backend rejected the operation due to rate/quota limits (e.g. HTTP 429/503)."""


class IOFault(RetryableError):
    """Injected or real transient I/O failure."""


class SourceNotFound(TransferError):
    pass


class EndpointUnreachable(TransferError):
    pass


class UnknownTask(TransferError):
    pass


class AlreadyTerminal(TransferError):
    pass


class JournalCorrupt(TransferError):
    pass


class ProtocolError(TransferError):
    """Malformed or out-of-contract control-channel traffic."""
