"""Endpoint server: the storage-facing half of third-party transfers.

An endpoint fronts one connector and its storage. It accepts control
connections (from the coordinator, and directly from clients registering
credentials), and opens a data-channel socket per transferred file: the
destination side listens, the source side connects, and payload flows
endpoint-to-endpoint without touching the coordinator.

Credentials live in this process's vault, keyed by opaque references;
only the references ever travel through the coordinator.
"""

from __future__ import annotations

import base64
import logging
import socket
import threading
import time
import uuid
from pathlib import Path

from . import wire
from .connectors import (CommandKind, Credential, CredentialKind,
                         HostContext, StatEntry, get_connector)
from .engine import expand_source
from .errors import (AlreadyExists, AuthFailed, BackendThrottled,
                     ConfigInvalid, IOFault, NoSpace, NotFound,
                     PermissionDenied, ProtocolError, RangeInvalid,
                     SessionClosed, SourceNotFound, TransferError,
                     Unsupported)
from .ranges import ByteRangeSet

log = logging.getLogger("xferkit.endpoint")

DATA_ACCEPT_TIMEOUT = 30.0
CONTROL_TIMEOUT = 60.0

# error code <-> exception mapping for the wire
ERROR_CLASSES = {
    cls.__name__: cls
    for cls in (AuthFailed, ConfigInvalid, SessionClosed, NotFound,
                PermissionDenied, AlreadyExists, Unsupported, RangeInvalid,
                NoSpace, BackendThrottled, IOFault, SourceNotFound,
                ProtocolError, TransferError)
}

_COMMAND_KINDS = {k.value: k for k in CommandKind}


def exception_for(code: str, message: str) -> TransferError:
    return ERROR_CLASSES.get(code, TransferError)(message)


class CredentialVault:
    """Endpoint-local credential store; optionally persisted to a directory."""

    def __init__(self, directory: str | None = None):
        self._dir = Path(directory) if directory else None
        self._store: dict[str, Credential] = {}
        self._lock = threading.Lock()
        if self._dir:
            self._dir.mkdir(parents=True, exist_ok=True)
            for path in self._dir.glob("*.cred"):
                self._store[path.stem] = self._read(path)

    @staticmethod
    def _read(path: Path) -> Credential:
        fields = dict(line.split("=", 1) for line in path.read_text().splitlines())
        return Credential(kind=CredentialKind(fields["kind"]),
                          payload=base64.b64decode(fields["secret"]),
                          endpoint_scope=fields.get("scope", ""))

    def put(self, credential: Credential) -> str:
        ref = f"cr-{uuid.uuid4().hex[:16]}"
        with self._lock:
            self._store[ref] = credential
        if self._dir:
            body = (f"kind={credential.kind.value}\n"
                    f"secret={base64.b64encode(credential.payload).decode()}\n"
                    f"scope={credential.endpoint_scope}\n")
            (self._dir / f"{ref}.cred").write_text(body)
        return ref

    def get(self, ref: str) -> Credential | None:
        with self._lock:
            return self._store.get(ref)

    def wipe(self) -> None:
        with self._lock:
            self._store.clear()
        if self._dir:
            for path in self._dir.glob("*.cred"):
                path.unlink()


class EndpointServer:
    def __init__(self, bind: tuple[str, int], connector: str,
                 storage_config: dict[str, str],
                 default_credential: Credential | None = None,
                 vault_dir: str | None = None):
        get_connector(connector)  # fail fast on unknown connector
        self.connector_name = connector
        self.storage_config = dict(storage_config)
        self.vault = CredentialVault(vault_dir)
        self.default_credential = default_credential
        self._listener = socket.create_server(bind)
        self._threads: list[threading.Thread] = []
        self._accept_thread: threading.Thread | None = None
        self._stopping = threading.Event()

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def start(self) -> "EndpointServer":
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="endpoint-accept", daemon=True)
        self._accept_thread.start()
        log.info("endpoint serving %s on %s:%d", self.connector_name, *self.address)
        return self

    def stop(self) -> None:
        self._stopping.set()
        try:
            self._listener.close()
        except OSError:
            pass

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, peer = self._listener.accept()
            except OSError:
                return
            conn.settimeout(CONTROL_TIMEOUT)
            t = threading.Thread(target=self._serve_connection, args=(conn,),
                                 name=f"endpoint-conn-{peer[1]}", daemon=True)
            t.start()
            self._threads.append(t)

    # -- session helpers -------------------------------------------------------

    def _resolve_credential(self, ref: str) -> Credential:
        if ref in ("", "default"):
            if self.default_credential is None:
                raise AuthFailed("no default credential configured")
            return self.default_credential
        cred = self.vault.get(ref)
        if cred is None:
            raise AuthFailed(f"unknown credential reference {ref!r}")
        return cred

    def _open_session(self, cred_ref: str):
        credential = self._resolve_credential(cred_ref)
        return get_connector(self.connector_name).start(self.storage_config, credential)

    # -- connection handling -----------------------------------------------------

    def _serve_connection(self, conn: socket.socket) -> None:
        try:
            while True:
                try:
                    msg, _ = wire.recv_message(conn)
                except (ConnectionError, OSError):
                    return
                try:
                    self._dispatch(conn, msg)
                except TransferError as exc:
                    self._send_error(conn, exc)
                except Exception as exc:  # keep the connection alive
                    log.exception("endpoint handler error")
                    self._send_error(conn, TransferError(str(exc)))
        finally:
            conn.close()

    def _send_error(self, conn: socket.socket, exc: Exception,
                    echo_version: int | None = None) -> None:
        try:
            wire.send_message(conn, wire.K_ERROR, code=type(exc).__name__,
                              message=str(exc)[:500], echo_version=echo_version)
        except OSError:
            pass

    def _dispatch(self, conn: socket.socket, msg: wire.Message) -> None:
        if msg.version != wire.PROTOCOL_VERSION:
            self._send_error(conn, ProtocolError(
                f"unsupported protocol version {msg.version}"), echo_version=msg.version)
            return
        if msg.kind == wire.K_HELLO:
            wire.send_message(conn, wire.K_HELLO, connector=self.connector_name)
        elif msg.kind == wire.K_REGISTER_CREDENTIAL:
            self._handle_register(conn, msg)
        elif msg.kind == wire.K_STAT_REQ:
            self._handle_stat(conn, msg)
        elif msg.kind == wire.K_COMMAND_REQ:
            self._handle_command(conn, msg)
        elif msg.kind == wire.K_XFER_INIT:
            self._handle_xfer(conn, msg)
        elif msg.kind == wire.K_CANCEL:
            wire.send_message(conn, wire.K_OK)
        elif msg.kind in wire.KNOWN_KINDS:
            self._send_error(conn, ProtocolError(
                f"kind {msg.kind!r} is not valid at an endpoint"))
        else:
            self._send_error(conn, ProtocolError(f"unknown kind {msg.kind!r}"))

    def _handle_register(self, conn: socket.socket, msg: wire.Message) -> None:
        credential = Credential(
            kind=CredentialKind(msg.require("cred_kind")),
            payload=base64.b64decode(msg.require("secret")),
            endpoint_scope=msg.get("scope"),
        )
        ref = self.vault.put(credential)
        wire.send_message(conn, wire.K_CREDENTIAL_REF, ref=ref)

    def _handle_stat(self, conn: socket.socket, msg: wire.Message) -> None:
        session = self._open_session(msg.get("cred_ref", "default"))
        try:
            path = msg.get("path")
            if msg.get("expand") == "1":
                dirs, files, single = expand_source(session, path)
                wire.send_message(
                    conn, wire.K_STAT_RESP,
                    dirs=wire.encode_entries([(d, 0, 0.0, "directory") for d in dirs]),
                    files=wire.encode_entries(
                        [(rel, size, 0.0, "file") for rel, size in files]),
                    single=int(single))
                return
            entry = session.stat(path)
            entries = entry if isinstance(entry, list) else [entry]
            wire.send_message(
                conn, wire.K_STAT_RESP,
                files=wire.encode_entries(
                    [(e.name, e.size, e.mtime, e.kind.value) for e in entries]),
                single=int(isinstance(entry, StatEntry)))
        finally:
            session.destroy()

    def _handle_command(self, conn: socket.socket, msg: wire.Message) -> None:
        op = msg.require("op")
        if op not in _COMMAND_KINDS:
            raise Unsupported(f"unknown command {op!r}")
        session = self._open_session(msg.get("cred_ref", "default"))
        try:
            args = [msg.require("path_arg")]
            if msg.get("path_arg2"):
                args.append(msg.get("path_arg2"))
            if msg.get("algorithm"):
                args.append(msg.get("algorithm"))
            result = session.command(_COMMAND_KINDS[op], *args)
            wire.send_message(conn, wire.K_COMMAND_RESP, result=result)
        finally:
            session.destroy()

    # -- data transfer -----------------------------------------------------------

    def _handle_xfer(self, conn: socket.socket, msg: wire.Message) -> None:
        role = msg.require("role")
        if role == "recv":
            self._xfer_recv(conn, msg)
        elif role == "send":
            self._xfer_send(conn, msg)
        else:
            raise ProtocolError(f"bad xfer role {role!r}")

    def _xfer_recv(self, conn: socket.socket, msg: wire.Message) -> None:
        file_id = int(msg.require("file_id"))
        path = msg.require("path")
        session = self._open_session(msg.get("cred_ref", "default"))
        listener = socket.create_server((self.address[0], 0))
        listener.settimeout(DATA_ACCEPT_TIMEOUT)
        data_conn: socket.socket | None = None
        try:
            host, port = listener.getsockname()[:2]
            wire.send_message(conn, wire.K_DATA_CHANNEL_OFFER, file_id=file_id,
                              host=host, port=port)
            data_conn, _ = listener.accept()
            data_conn.settimeout(CONTROL_TIMEOUT)

            completed = ByteRangeSet()

            def progress(offset: int, length: int) -> None:
                completed.add(offset, length)
                wire.send_message(conn, wire.K_MARKER, file_id=file_id,
                                  marker_kind="restart", ranges=completed.encode(),
                                  cumulative=completed.total(),
                                  timestamp=f"{time.time():.6f}")

            def frames():
                while True:
                    frame = wire.recv_frame(data_conn)
                    if frame is None:
                        return
                    fid, offset, payload = frame
                    if fid != file_id:
                        raise ProtocolError(f"frame for unexpected file {fid}")
                    yield offset, payload

            host_ctx = HostContext(
                concurrency_hint=int(msg.get("parallelism", "1")),
                blocksize=int(msg.get("blocksize", "1048576")),
                progress_sink=progress)
            outcome = session.recv(path, host_ctx, frames())
            wire.send_message(conn, wire.K_FILE_DONE, file_id=file_id,
                              bytes=outcome.bytes_moved)
        finally:
            if data_conn is not None:
                data_conn.close()
            listener.close()
            session.destroy()

    def _xfer_send(self, conn: socket.socket, msg: wire.Message) -> None:
        file_id = int(msg.require("file_id"))
        path = msg.require("path")
        target = (msg.require("host"), int(msg.require("port")))
        session = self._open_session(msg.get("cred_ref", "default"))
        data_conn = socket.create_connection(target, timeout=DATA_ACCEPT_TIMEOUT)
        try:
            ranges = ByteRangeSet.decode(msg.get("ranges"))
            host_ctx = HostContext(
                concurrency_hint=int(msg.get("parallelism", "1")),
                blocksize=int(msg.get("blocksize", "1048576")),
                requested_ranges=ranges if ranges else None)
            sent = 0

            def sink(offset: int, payload: bytes) -> None:
                nonlocal sent
                wire.send_frame(data_conn, file_id, offset, payload)
                sent += len(payload)

            session.send(path, host_ctx, sink)
            wire.send_end_frame(data_conn, file_id)
            wire.send_message(conn, wire.K_FILE_DONE, file_id=file_id, bytes=sent)
        finally:
            data_conn.close()
            session.destroy()


def endpoint_serve(bind: tuple[str, int], connector: str,
                   storage_config: dict[str, str],
                   default_credential: Credential | None = None,
                   vault_dir: str | None = None) -> EndpointServer:
    """Start an endpoint server; raises OSError if the bind fails."""
    return EndpointServer(bind, connector, storage_config,
                          default_credential, vault_dir).start()


def register_credential(endpoint_address: tuple[str, int],
                        credential: Credential, timeout: float = 10.0) -> str:
    """Register a credential directly with an endpoint; returns its reference.

    This deliberately connects client-to-endpoint: the secret never crosses
    the coordinator.
    """
    with socket.create_connection(endpoint_address, timeout=timeout) as sock:
        wire.send_message(sock, wire.K_REGISTER_CREDENTIAL,
                          cred_kind=credential.kind.value,
                          secret=base64.b64encode(credential.payload).decode(),
                          scope=credential.endpoint_scope)
        msg, _ = wire.recv_message(sock)
    if msg.kind == wire.K_ERROR:
        raise exception_for(msg.get("code"), msg.get("message"))
    return msg.require("ref")
