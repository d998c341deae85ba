"""Transfer coordinator: third-party orchestration off the data path.

The coordinator owns task state and journals, talks to both endpoints
over the control channel, and wires up a data channel per file with the
destination listening and the source connecting. Payload bytes flow only
endpoint-to-endpoint; the coordinator instruments its own socket traffic
so tests can prove that (every byte it moves is counted, and any message
carrying a payload field is rejected and tallied).

Transfer startup (endpoint handshakes, expansion, directory preparation)
is serialized per task and timed per phase; an optional artificial delay
models extra coordination cost for startup-cost experiments.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass

from . import wire
from .connectors import EntryKind, StatEntry
from .endpoint import exception_for
from .engine import Engine, Route, TransferSpec, TransferTask
from .errors import (AlreadyExists, EndpointUnreachable, ProtocolError,
                     TransferError)
from .ranges import ByteRangeSet

log = logging.getLogger("xferkit.coordinator")

CONNECT_TIMEOUT = 10.0
CONTROL_TIMEOUT = 120.0


class TrafficCounters:
    """Every byte the coordinator moves on any socket, plus payload sightings."""

    def __init__(self):
        self.bytes_in = 0
        self.bytes_out = 0
        self.payload_bytes_seen = 0
        self.data_channel_connections = 0  # structurally always 0
        self._lock = threading.Lock()

    def add_in(self, n: int) -> None:
        with self._lock:
            self.bytes_in += n

    def add_out(self, n: int) -> None:
        with self._lock:
            self.bytes_out += n

    def add_payload(self, n: int) -> None:
        with self._lock:
            self.payload_bytes_seen += n


class _Control:
    """One counted control connection to an endpoint.

    rtt emulates a wide-area hop between the coordinator and the endpoint:
    each outbound control message is delayed by one round trip. Streamed
    replies (markers, completions) pipeline and are not delayed, matching
    how a real control channel behaves.
    """

    def __init__(self, address: tuple[str, int], counters: TrafficCounters,
                 rtt: float = 0.0):
        try:
            self.sock = socket.create_connection(address, timeout=CONNECT_TIMEOUT)
        except OSError as exc:
            raise EndpointUnreachable(f"{address[0]}:{address[1]}: {exc}")
        self.sock.settimeout(CONTROL_TIMEOUT)
        self.counters = counters
        self.rtt = rtt
        self.lock = threading.Lock()

    def send(self, kind: str, **fields) -> None:
        if self.rtt > 0:
            time.sleep(self.rtt)
        raw = wire.encode_message(kind, **fields)
        self.sock.sendall(raw)
        self.counters.add_out(len(raw))

    def recv(self) -> wire.Message:
        try:
            msg, nbytes = wire.recv_message(self.sock)
        except ProtocolError as exc:
            # a payload-bearing or malformed message: count it, fail closed
            self.counters.add_payload(1)
            raise
        self.counters.add_in(nbytes)
        return msg

    def request(self, kind: str, **fields) -> wire.Message:
        with self.lock:
            self.send(kind, **fields)
            msg = self.recv()
        if msg.kind == wire.K_ERROR:
            raise exception_for(msg.get("code"), msg.get("message"))
        return msg

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class RemoteRoute(Route):
    """Per-task route that drives one source and one destination endpoint."""

    def __init__(self, src_addr, src_path: str, dst_addr, dst_path: str,
                 spec: TransferSpec, counters: TrafficCounters,
                 startup_delay: float = 0.0, control_rtt: float = 0.0):
        self.src_addr = src_addr
        self.src_path = src_path.strip("/")
        self.dst_addr = dst_addr
        self.dst_path = dst_path.strip("/")
        self.spec = spec
        self.counters = counters
        self.startup_delay = startup_delay
        self.control_rtt = control_rtt
        self.single_file = False
        self._file_ids = iter(range(1, 2**62))
        self._local = threading.local()
        self._all_conns: list[_Control] = []
        self._conn_lock = threading.Lock()

    # one control connection per endpoint per worker thread
    def _conn(self, which: str) -> _Control:
        cache = getattr(self._local, "conns", None)
        if cache is None:
            cache = self._local.conns = {}
        conn = cache.get(which)
        if conn is None:
            address = self.src_addr if which == "src" else self.dst_addr
            conn = _Control(address, self.counters, rtt=self.control_rtt)
            cache[which] = conn
            with self._conn_lock:
                self._all_conns.append(conn)
        return conn

    def _src_full(self, rel: str) -> str:
        if self.single_file:
            return self.src_path
        return f"{self.src_path}/{rel}" if self.src_path else rel

    def _dest_full(self, rel: str) -> str:
        if self.single_file:
            return self.dst_path
        return f"{self.dst_path}/{rel}" if self.dst_path else rel

    # -- Route interface ---------------------------------------------------

    def startup(self) -> dict[str, float]:
        phases: dict[str, float] = {}
        t0 = time.perf_counter()
        for which in ("src", "dst"):
            reply = self._conn(which).request(wire.K_HELLO)
            if reply.kind != wire.K_HELLO:
                raise ProtocolError(f"unexpected hello reply {reply.kind!r}")
        phases["handshake_s"] = time.perf_counter() - t0
        if self.startup_delay > 0:
            time.sleep(self.startup_delay)
        phases["coordinator_delay_s"] = self.startup_delay
        return phases

    def expand(self):
        reply = self._conn("src").request(
            wire.K_STAT_REQ, path=self.src_path, expand=1,
            cred_ref=self.spec.source_cred_ref)
        dirs = [name for name, _, _, _ in wire.decode_entries(reply.get("dirs"))]
        files = [(name, size) for name, size, _, _ in
                 wire.decode_entries(reply.get("files"))]
        self.single_file = reply.get("single") == "1"
        return dirs, files, self.single_file

    def prepare_destination(self, dirs: list[str]) -> None:
        conn = self._conn("dst")
        targets = [] if self.single_file else [self.dst_path]
        targets += [f"{self.dst_path}/{d}" if self.dst_path else d for d in dirs]
        for target in targets:
            if not target:
                continue
            try:
                conn.request(wire.K_COMMAND_REQ, op="mkdir", path_arg=target,
                             cred_ref=self.spec.dest_cred_ref)
            except AlreadyExists:
                pass

    def source_checksum(self, rel: str, algorithm: str) -> str:
        reply = self._conn("src").request(
            wire.K_COMMAND_REQ, op="checksum", path_arg=self._src_full(rel),
            algorithm=algorithm, cred_ref=self.spec.source_cred_ref)
        return reply.require("result")

    def dest_checksum(self, rel: str, algorithm: str) -> str:
        reply = self._conn("dst").request(
            wire.K_COMMAND_REQ, op="checksum", path_arg=self._dest_full(rel),
            algorithm=algorithm, cred_ref=self.spec.dest_cred_ref)
        return reply.require("result")

    def dest_stat(self, rel: str) -> StatEntry | None:
        try:
            reply = self._conn("dst").request(
                wire.K_STAT_REQ, path=self._dest_full(rel),
                cred_ref=self.spec.dest_cred_ref)
        except TransferError:
            return None
        entries = wire.decode_entries(reply.get("files"))
        if reply.get("single") != "1" or not entries:
            return None
        name, size, mtime, kind = entries[0]
        return StatEntry(name=name, size=size, mtime=mtime, kind=EntryKind(kind))

    def move_file(self, rel, size, ranges, progress, cancel_event):
        file_id = next(self._file_ids)
        spec = self.spec
        dst = self._conn("dst")
        src = self._conn("src")
        dst.send(wire.K_XFER_INIT, role="recv", file_id=file_id,
                 path=self._dest_full(rel), size=size,
                 blocksize=spec.blocksize, parallelism=spec.parallelism,
                 cred_ref=spec.dest_cred_ref)
        offer = dst.recv()
        if offer.kind == wire.K_ERROR:
            raise exception_for(offer.get("code"), offer.get("message"))
        if offer.kind != wire.K_DATA_CHANNEL_OFFER:
            raise ProtocolError(f"expected data_channel_offer, got {offer.kind!r}")

        src.send(wire.K_XFER_INIT, role="send", file_id=file_id,
                 path=self._src_full(rel), ranges=ranges.encode(),
                 host=offer.require("host"), port=offer.require("port"),
                 blocksize=spec.blocksize, parallelism=spec.parallelism,
                 cred_ref=spec.source_cred_ref)

        moved = 0
        seen = ByteRangeSet()
        while True:
            if cancel_event.is_set():
                raise TransferError("canceled")
            msg = dst.recv()
            if msg.kind == wire.K_ERROR:
                # surface the source-side failure too, so retries see it
                self._drain_source(src)
                raise exception_for(msg.get("code"), msg.get("message"))
            if msg.kind == wire.K_MARKER:
                new = ByteRangeSet.decode(msg.get("ranges"))
                for offset, length in new:
                    for o, l in _new_spans(seen, offset, length):
                        progress(o, l)
                        moved += l
                seen = new
                continue
            if msg.kind == wire.K_FILE_DONE:
                break
            raise ProtocolError(f"unexpected {msg.kind!r} during transfer")

        reply = src.recv()
        if reply.kind == wire.K_ERROR:
            raise exception_for(reply.get("code"), reply.get("message"))
        if reply.kind != wire.K_FILE_DONE:
            raise ProtocolError(f"expected file_done from source, got {reply.kind!r}")
        return moved

    def _drain_source(self, src: _Control) -> None:
        try:
            src.sock.settimeout(5.0)
            src.recv()
        except (TransferError, OSError, ConnectionError):
            pass
        finally:
            src.sock.settimeout(CONTROL_TIMEOUT)

    def close(self) -> None:
        with self._conn_lock:
            for conn in self._all_conns:
                conn.close()
            self._all_conns.clear()


def _new_spans(seen: ByteRangeSet, offset: int, length: int):
    """Parts of (offset, length) not already covered by `seen`."""
    spans = []
    cursor = offset
    end = offset + length
    for s, l in seen:
        e = s + l
        if e <= cursor or s >= end:
            continue
        if s > cursor:
            spans.append((cursor, min(s, end) - cursor))
        cursor = max(cursor, e)
        if cursor >= end:
            break
    if cursor < end:
        spans.append((cursor, end - cursor))
    return spans


# ---------------------------------------------------------------------------
# Coordinator server


@dataclass(frozen=True)
class EndpointInfo:
    endpoint_id: str
    address: tuple[str, int]


class Coordinator:
    """Control server managing endpoints and transfer tasks."""

    def __init__(self, journal_dir: str, bind: tuple[str, int] = ("127.0.0.1", 0),
                 startup_delay: float = 0.0, control_rtt: float = 0.0):
        self.counters = TrafficCounters()
        self.startup_delay = startup_delay
        self.control_rtt = control_rtt
        self.registry: dict[str, EndpointInfo] = {}
        self.engine = Engine(journal_dir, route_factory=self._route_for)
        self._runners: dict[str, threading.Thread] = {}
        self._listener = socket.create_server(bind)
        self._stopping = threading.Event()
        self._accept_thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def start(self) -> "Coordinator":
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="coordinator-accept", daemon=True)
        self._accept_thread.start()
        log.info("coordinator serving on %s:%d", *self.address)
        return self

    def stop(self) -> None:
        self._stopping.set()
        try:
            self._listener.close()
        except OSError:
            pass

    # -- engine wiring -----------------------------------------------------

    def register_endpoint(self, endpoint_id: str, address: tuple[str, int]) -> None:
        # addresses and ids only: credentials and storage configs stay
        # endpoint-local
        self.registry[endpoint_id] = EndpointInfo(endpoint_id, address)

    def _route_for(self, task: TransferTask) -> RemoteRoute:
        spec = task.spec
        try:
            src = self.registry[spec.source[0]]
            dst = self.registry[spec.destination[0]]
        except KeyError as exc:
            raise EndpointUnreachable(f"endpoint {exc.args[0]!r} is not registered")
        return RemoteRoute(src.address, spec.source[1], dst.address,
                           spec.destination[1], spec, self.counters,
                           self.startup_delay, self.control_rtt)

    def submit_and_run(self, spec: TransferSpec) -> str:
        task_id = self.engine.submit(spec)
        self._spawn_runner(task_id, resume=False)
        return task_id

    def _spawn_runner(self, task_id: str, resume: bool) -> None:
        def runner():
            try:
                if resume:
                    self.engine.resume(task_id)
                else:
                    self.engine.run(task_id)
            except Exception:
                log.exception("task %s runner failed", task_id)

        t = threading.Thread(target=runner, name=f"task-{task_id}", daemon=True)
        self._runners[task_id] = t
        t.start()

    def wait(self, task_id: str, timeout: float | None = None) -> None:
        t = self._runners.get(task_id)
        if t is not None:
            t.join(timeout)

    # -- client-facing control channel ----------------------------------------

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, peer = self._listener.accept()
            except OSError:
                return
            conn.settimeout(CONTROL_TIMEOUT)
            threading.Thread(target=self._serve_client, args=(conn,),
                             name=f"coord-client-{peer[1]}", daemon=True).start()

    def _serve_client(self, conn: socket.socket) -> None:
        try:
            while True:
                try:
                    msg, nbytes = wire.recv_message(conn)
                    self.counters.add_in(nbytes)
                except ProtocolError:
                    self.counters.add_payload(1)
                    self._client_send(conn, wire.K_ERROR, code="ProtocolError",
                                      message="malformed or payload-bearing message")
                    return
                except (ConnectionError, OSError):
                    return
                try:
                    self._dispatch_client(conn, msg)
                except TransferError as exc:
                    self._client_send(conn, wire.K_ERROR, code=type(exc).__name__,
                                      message=str(exc)[:500])
                except Exception as exc:
                    log.exception("coordinator handler error")
                    self._client_send(conn, wire.K_ERROR, code="TransferError",
                                      message=str(exc)[:500])
        finally:
            conn.close()

    def _client_send(self, conn: socket.socket, kind: str, **fields) -> None:
        try:
            raw = wire.encode_message(kind, **fields)
            conn.sendall(raw)
            self.counters.add_out(len(raw))
        except OSError:
            pass

    def _dispatch_client(self, conn: socket.socket, msg: wire.Message) -> None:
        if msg.version != wire.PROTOCOL_VERSION:
            self._client_send(conn, wire.K_ERROR, code="ProtocolError",
                              message=f"unsupported protocol version {msg.version}",
                              echo_version=msg.version)
            return
        if msg.kind == wire.K_HELLO:
            self._client_send(conn, wire.K_HELLO, role="coordinator")
        elif msg.kind == wire.K_REGISTER_ENDPOINT:
            self.register_endpoint(msg.require("endpoint_id"),
                                   (msg.require("host"), int(msg.require("port"))))
            self._client_send(conn, wire.K_OK)
        elif msg.kind == wire.K_SUBMIT:
            spec = self._spec_from(msg)
            task_id = self.submit_and_run(spec)
            self._client_send(conn, wire.K_SUBMIT_OK, task_id=task_id)
        elif msg.kind == wire.K_STATUS_REQ:
            snap = self.engine.status(msg.require("task_id"))
            done = sum(1 for f in snap["files"].values() if f["state"] == "done")
            failed = sum(1 for f in snap["files"].values() if f["state"] == "failed")
            retries = sum(max(0, f["attempts"] - 1) for f in snap["files"].values())
            self._client_send(conn, wire.K_STATUS_RESP, task_id=snap["task_id"],
                              state=snap["state"], bytes_total=snap["bytes_total"],
                              bytes_moved=snap["bytes_moved"],
                              files=len(snap["files"]), files_done=done,
                              files_failed=failed, retries=retries,
                              rate_bps=f"{snap['rate_Bps']:.1f}",
                              elapsed_s=f"{snap['elapsed_s']:.3f}")
        elif msg.kind == wire.K_CANCEL:
            self.engine.cancel(msg.require("task_id"))
            self._client_send(conn, wire.K_OK)
        elif msg.kind == wire.K_RESUME:
            task_id = msg.require("task_id")
            self.engine._get_task(task_id)  # raises UnknownTask early
            self._spawn_runner(task_id, resume=True)
            self._client_send(conn, wire.K_OK)
        elif msg.kind == wire.K_REGISTER_CREDENTIAL:
            # never accepted here: secrets go client->endpoint directly
            self._client_send(conn, wire.K_ERROR, code="ProtocolError",
                              message="credentials are registered with endpoints, "
                                      "not the coordinator")
        elif msg.kind in wire.KNOWN_KINDS:
            self._client_send(conn, wire.K_ERROR, code="ProtocolError",
                              message=f"kind {msg.kind!r} not valid at coordinator")
        else:
            self._client_send(conn, wire.K_ERROR, code="ProtocolError",
                              message=f"unknown kind {msg.kind!r}")

    @staticmethod
    def _spec_from(msg: wire.Message) -> TransferSpec:
        from .engine import Integrity

        return TransferSpec(
            source=(msg.require("src_ep"), msg.get("src_path")),
            destination=(msg.require("dst_ep"), msg.get("dst_path")),
            cc=int(msg.get("cc", "1")),
            parallelism=int(msg.get("parallelism", "4")),
            integrity=Integrity(msg.get("integrity", "off")),
            max_retries=int(msg.get("max_retries", "3")),
            checksum_algorithm=msg.get("checksum", "sha256"),
            blocksize=int(msg.get("blocksize", "1048576")),
            source_cred_ref=msg.get("src_cred_ref", "default"),
            dest_cred_ref=msg.get("dst_cred_ref", "default"),
        )


# ---------------------------------------------------------------------------
# Client helper


class CoordinatorClient:
    """Thin blocking client for the coordinator's control API."""

    def __init__(self, address: tuple[str, int], timeout: float = 30.0):
        try:
            self._sock = socket.create_connection(address, timeout=timeout)
        except OSError as exc:
            raise EndpointUnreachable(f"coordinator {address}: {exc}")
        self._lock = threading.Lock()

    def close(self) -> None:
        self._sock.close()

    def _request(self, kind: str, **fields) -> wire.Message:
        with self._lock:
            self._sock.sendall(wire.encode_message(kind, **fields))
            msg, _ = wire.recv_message(self._sock)
        if msg.kind == wire.K_ERROR:
            raise exception_for(msg.get("code"), msg.get("message"))
        return msg

    def hello(self) -> wire.Message:
        return self._request(wire.K_HELLO)

    def register_endpoint(self, endpoint_id: str, address: tuple[str, int]) -> None:
        self._request(wire.K_REGISTER_ENDPOINT, endpoint_id=endpoint_id,
                      host=address[0], port=address[1])

    def submit(self, spec: TransferSpec) -> str:
        reply = self._request(
            wire.K_SUBMIT, src_ep=spec.source[0], src_path=spec.source[1],
            dst_ep=spec.destination[0], dst_path=spec.destination[1],
            cc=spec.cc, parallelism=spec.parallelism,
            integrity=spec.integrity.value, max_retries=spec.max_retries,
            checksum=spec.checksum_algorithm, blocksize=spec.blocksize,
            src_cred_ref=spec.source_cred_ref, dst_cred_ref=spec.dest_cred_ref)
        return reply.require("task_id")

    def status(self, task_id: str) -> dict[str, str]:
        reply = self._request(wire.K_STATUS_REQ, task_id=task_id)
        return dict(reply.fields)

    def cancel(self, task_id: str) -> None:
        self._request(wire.K_CANCEL, task_id=task_id)

    def resume(self, task_id: str) -> None:
        self._request(wire.K_RESUME, task_id=task_id)

    def wait(self, task_id: str, poll: float = 0.5, timeout: float = 600.0) -> str:
        deadline = time.monotonic() + timeout
        while True:
            state = self.status(task_id)["state"]
            if state in ("succeeded", "failed", "canceled"):
                return state
            if time.monotonic() > deadline:
                raise TimeoutError(f"task {task_id} still {state}")
            time.sleep(poll)
