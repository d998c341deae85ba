"""Uniform storage-access interface.

Every storage backend plugs in as a Connector that opens Sessions. The
transfer engine drives any backend through the same seven entry points:
start, destroy, stat, command, send, recv, set_credential. Data moves as
(offset, payload) blocks so out-of-order and holey transfers work the
same everywhere.
"""

from __future__ import annotations

import enum
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

from ..errors import ConfigInvalid, SessionClosed
from ..ranges import ByteRangeSet

DEFAULT_BLOCKSIZE = 1024 * 1024
MIN_BLOCKSIZE = 4096

_session_ids = itertools.count(1)


class CredentialKind(enum.Enum):
    LOCAL_USER = "local-user"
    ACCESS_KEY_PAIR = "access-key-pair"
    BEARER_TOKEN = "bearer-token"


@dataclass(frozen=True)
class Credential:
    """Authentication material for one storage endpoint.

    The payload is secret: it travels only client->endpoint and endpoint->
    backend, never through the coordinator (the control plane enforces and
    tests this).
    """

    kind: CredentialKind
    payload: bytes = b""
    endpoint_scope: str = ""

    def __repr__(self):  # keep secrets out of logs and tracebacks
        return f"Credential(kind={self.kind.value!r}, scope={self.endpoint_scope!r})"


LOCAL_USER = Credential(CredentialKind.LOCAL_USER)


class EntryKind(enum.Enum):
    FILE = "file"
    DIRECTORY = "directory"
    OBJECT = "object"


@dataclass(frozen=True)
class StatEntry:
    """Metadata for one file, directory, or object."""

    name: str
    size: int
    mtime: float
    kind: EntryKind
    permissions: int | None = None


class CommandKind(enum.Enum):
    MKDIR = "mkdir"
    DELETE = "delete"
    RENAME = "rename"
    CHECKSUM = "checksum"


# progress callback: (offset, length) of a block durably written
ProgressSink = Callable[[int, int], None]
# data sink for send(): called with (offset, payload) blocks
DataSink = Callable[[int, bytes], None]
# data source for recv(): yields (offset, payload) blocks in any order
DataSource = Iterable[tuple[int, bytes]]


@dataclass
class HostContext:
    """Per-transfer knobs the host application hands to a session.

    concurrency_hint mirrors the host's parallel-stream count; connectors
    may use it for outstanding reads/writes. requested_ranges limits send()
    to a subset of the file (None means the whole file); progress_sink
    receives a (offset, length) event per durably-written block.
    """

    concurrency_hint: int = 1
    blocksize: int = DEFAULT_BLOCKSIZE
    requested_ranges: ByteRangeSet | None = None
    progress_sink: ProgressSink | None = None

    def __post_init__(self):
        if self.concurrency_hint < 1:
            raise ValueError("concurrency_hint must be >= 1")
        if self.blocksize < MIN_BLOCKSIZE:
            raise ValueError(f"blocksize must be >= {MIN_BLOCKSIZE}")

    def emit(self, offset: int, length: int) -> None:
        if self.progress_sink is not None:
            self.progress_sink(offset, length)


@dataclass
class TransferOutcome:
    """Result of one send() or recv() call."""

    bytes_moved: int = 0
    blocks: int = 0
    throttle_retries: int = 0


class SessionState(enum.Enum):
    ACTIVE = "active"
    DESTROYED = "destroyed"


class Session:
    """One single-owner storage session.

    At most one operation may be in flight per session; the engine opens
    one session per concurrent file instead of sharing. Subclasses
    implement the do_* hooks; the base class owns the lifecycle.
    """

    def __init__(self, storage_root: str, credential: Credential):
        self.session_id = f"s{next(_session_ids)}"
        self.storage_root = storage_root
        self.credential = credential
        self.state = SessionState.ACTIVE
        self._lock = threading.Lock()

    # -- lifecycle ---------------------------------------------------------

    def _check_active(self) -> None:
        if self.state is not SessionState.ACTIVE:
            raise SessionClosed(f"session {self.session_id} is destroyed")

    def destroy(self) -> None:
        """Terminate the session. Idempotent."""
        if self.state is SessionState.DESTROYED:
            return
        self.state = SessionState.DESTROYED
        self.do_destroy()

    def do_destroy(self) -> None:
        pass

    # -- interface operations ----------------------------------------------

    def stat(self, path: str) -> StatEntry | list[StatEntry]:
        self._check_active()
        return self.do_stat(path)

    def command(self, kind: CommandKind, *args: str) -> str:
        self._check_active()
        return self.do_command(kind, *args)

    def send(self, path: str, host: HostContext, sink: DataSink) -> TransferOutcome:
        self._check_active()
        return self.do_send(path, host, sink)

    def recv(self, path: str, host: HostContext, source: DataSource) -> TransferOutcome:
        self._check_active()
        return self.do_recv(path, host, source)

    def set_credential(self, credential: Credential) -> None:
        """Swap the credential; validation is lazy (next backend call)."""
        self._check_active()
        self.credential = credential
        self.do_set_credential(credential)

    def do_set_credential(self, credential: Credential) -> None:
        pass

    # -- backend hooks -------------------------------------------------------

    def do_stat(self, path: str) -> StatEntry | list[StatEntry]:
        raise NotImplementedError

    def do_command(self, kind: CommandKind, *args: str) -> str:
        raise NotImplementedError

    def do_send(self, path: str, host: HostContext, sink: DataSink) -> TransferOutcome:
        raise NotImplementedError

    def do_recv(self, path: str, host: HostContext, source: DataSource) -> TransferOutcome:
        raise NotImplementedError


class Connector:
    """Factory for sessions against one kind of storage. Shareable."""

    name = "abstract"

    def start(self, storage_config: dict[str, str], credential: Credential) -> Session:
        raise NotImplementedError


def iter_blocks(data_ranges: ByteRangeSet, blocksize: int) -> Iterator[tuple[int, int]]:
    """Split a range set into (offset, length) blocks of at most blocksize."""
    for offset, length in data_ranges:
        cursor = offset
        end = offset + length
        while cursor < end:
            step = min(blocksize, end - cursor)
            yield cursor, step
            cursor += step


def require_config(config: dict[str, str], *keys: str) -> None:
    missing = [k for k in keys if not config.get(k)]
    if missing:
        raise ConfigInvalid(f"missing storage_config keys: {', '.join(missing)}")
