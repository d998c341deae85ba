"""Managed transfer engine.

Expands directories into per-file records, schedules files across a
bounded worker pool, moves bytes between two connector sessions, journals
progress and restart markers, retries transient faults with jittered
backoff, and (optionally) verifies end-to-end integrity by checksumming
the source before the move and re-reading the destination after it.

The engine is route-agnostic: a Route moves one file's bytes and answers
checksums/stats. LocalRoute runs both sessions in-process; the control
plane supplies a route that drives remote endpoints instead.
"""

from __future__ import annotations

import enum
import logging
import queue
import random
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from .connectors import (CommandKind, Credential, EntryKind, HostContext,
                         StatEntry, get_connector)
from .connectors.base import DEFAULT_BLOCKSIZE, Session
from .errors import (AlreadyExists, AlreadyTerminal, AuthFailed,
                     ConfigInvalid, EndpointUnreachable, NotFound,
                     PermissionDenied, RangeInvalid, SessionClosed,
                     SourceNotFound, TransferError, UnknownTask, Unsupported)
from .journal import Event, Journal, replay
from .ranges import ByteRangeSet
from .throttle import backoff_delay

log = logging.getLogger("xferkit.engine")

PERF_MARKER_INTERVAL = 0.5  # seconds
PERF_MARKER_BYTES = 8 * 1024 * 1024
RESTART_FSYNC_INTERVAL = 2.0  # seconds between forced restart-marker fsyncs

# Errors where retrying cannot help; everything else gets the retry budget.
_FATAL_ERRORS = (AuthFailed, ConfigInvalid, SessionClosed, NotFound,
                 PermissionDenied, RangeInvalid, Unsupported, AlreadyExists)


class IntegrityMismatch(TransferError):
    """Destination digest disagreed with the source digest."""


class _Canceled(Exception):
    pass


class Integrity(enum.Enum):
    OFF = "off"
    STRONG = "strong"


class FileState(enum.Enum):
    PENDING = "pending"
    MOVING = "moving"
    VERIFYING = "verifying"
    DONE = "done"
    FAILED = "failed"


class TaskState(enum.Enum):
    SUBMITTED = "submitted"
    ACTIVE = "active"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    CANCELED = "canceled"


TERMINAL_STATES = {TaskState.SUCCEEDED, TaskState.FAILED, TaskState.CANCELED}


@dataclass
class TransferSpec:
    source: tuple[str, str]  # (endpoint id, path)
    destination: tuple[str, str]
    cc: int = 1
    parallelism: int = 4
    integrity: Integrity = Integrity.OFF
    max_retries: int = 3
    checksum_algorithm: str = "sha256"
    blocksize: int = DEFAULT_BLOCKSIZE
    # opaque vault references (never the secrets themselves); "default"
    # selects the credential the endpoint was started with
    source_cred_ref: str = "default"
    dest_cred_ref: str = "default"

    def __post_init__(self):
        if self.cc < 1:
            raise ValueError("cc must be >= 1")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")


@dataclass
class FileRecord:
    relative_path: str
    size: int
    completed: ByteRangeSet = field(default_factory=ByteRangeSet)
    source_digest: str | None = None
    dest_digest: str | None = None
    attempts: int = 0
    state: FileState = FileState.PENDING
    error: str | None = None
    # marker cadence bookkeeping (not part of durable state)
    _last_perf_time: float = 0.0
    _last_perf_bytes: int = 0


@dataclass(frozen=True)
class Marker:
    kind: str  # "performance" | "restart"
    task_id: str
    file: str
    timestamp: float
    cumulative_bytes: int = 0
    completed: ByteRangeSet | None = None


class TransferTask:
    def __init__(self, task_id: str, spec: TransferSpec):
        self.task_id = task_id
        self.spec = spec
        self.files: dict[str, FileRecord] = {}
        self.dirs: list[str] = []
        self.state = TaskState.SUBMITTED
        self.lock = threading.RLock()
        self.cancel_event = threading.Event()
        self.bytes_total = 0
        self.bytes_moved = 0  # lifetime, all runs
        self.run_bytes = 0  # bytes moved by the current/most recent run
        self.started_at: float | None = None
        self.finished_at: float | None = None
        self.startup_phases: dict[str, float] = {}
        self._last_fsync = 0.0

    def snapshot(self) -> dict:
        with self.lock:
            elapsed = 0.0
            if self.started_at:
                elapsed = (self.finished_at or time.time()) - self.started_at
            per_file = {
                rec.relative_path: {
                    "state": rec.state.value,
                    "size": rec.size,
                    "bytes": rec.completed.total(),
                    "attempts": rec.attempts,
                    "error": rec.error,
                }
                for rec in self.files.values()
            }
            moved = sum(rec.completed.total() for rec in self.files.values())
            return {
                "task_id": self.task_id,
                "state": self.state.value,
                "files": per_file,
                "bytes_total": self.bytes_total,
                "bytes_moved": moved,
                "run_bytes": self.run_bytes,
                "elapsed_s": elapsed,
                "rate_Bps": (moved / elapsed) if elapsed > 0 else 0.0,
                "startup_phases": dict(self.startup_phases),
            }


# ---------------------------------------------------------------------------
# Routes


class Route:
    """Moves data for one task; one instance per task run."""

    def startup(self) -> dict[str, float]:
        """One-time per-task setup. Returns phase timings in seconds."""
        return {}

    def expand(self) -> tuple[list[str], list[tuple[str, int]], bool]:
        """Returns (dirs, [(relative_path, size)], source_is_single_file)."""
        raise NotImplementedError

    def prepare_destination(self, dirs: list[str]) -> None:
        raise NotImplementedError

    def source_checksum(self, rel: str, algorithm: str) -> str:
        raise NotImplementedError

    def dest_checksum(self, rel: str, algorithm: str) -> str:
        raise NotImplementedError

    def dest_stat(self, rel: str) -> StatEntry | None:
        raise NotImplementedError

    def move_file(self, rel: str, size: int, ranges: ByteRangeSet,
                  progress, cancel_event: threading.Event) -> int:
        raise NotImplementedError

    def close(self) -> None:
        pass


@dataclass(frozen=True)
class LocalEndpoint:
    connector: str
    storage_config: dict[str, str]
    credential: Credential


def _join(base: str, rel: str) -> str:
    base = base.strip("/")
    if not rel:
        return base
    return f"{base}/{rel}" if base else rel


def expand_source(session: Session, source_path: str):
    """Walk a source path into (dirs, [(relative_path, size)], is_single_file).

    A single file expands to one record named after its basename; a
    directory (or object prefix) expands recursively, tracking empty
    directories so they can be created at the destination too.
    """
    source_path = source_path.strip("/")
    try:
        entry = session.stat(source_path)
    except NotFound:
        raise SourceNotFound(source_path)
    if isinstance(entry, StatEntry) and entry.kind is not EntryKind.DIRECTORY:
        name = source_path.rsplit("/", 1)[-1]
        return [], [(name, entry.size)], True
    dirs: list[str] = []
    files: list[tuple[str, int]] = []
    prefix = source_path + "/" if source_path else ""

    def rel_of(name: str) -> str:
        return name[len(prefix):] if prefix and name.startswith(prefix) else name

    pending = list(entry) if isinstance(entry, list) else [entry]
    while pending:
        item = pending.pop(0)
        if item.kind is EntryKind.DIRECTORY:
            dirs.append(rel_of(item.name))
            pending.extend(session.stat(item.name))
        elif item.name.endswith("/"):
            dirs.append(rel_of(item.name).rstrip("/"))
        else:
            files.append((rel_of(item.name), item.size))
    files.sort()
    dirs = sorted(d for d in dirs if d)
    return dirs, files, False


class LocalRoute(Route):
    """Two-party route: both connector sessions run in this process."""

    def __init__(self, source: LocalEndpoint, source_path: str,
                 dest: LocalEndpoint, dest_path: str, spec: TransferSpec):
        self.source = source
        self.source_path = source_path.strip("/")
        self.dest = dest
        self.dest_path = dest_path.strip("/")
        self.spec = spec
        self.single_file = False

    def _src_session(self) -> Session:
        return get_connector(self.source.connector).start(
            self.source.storage_config, self.source.credential)

    def _dst_session(self) -> Session:
        return get_connector(self.dest.connector).start(
            self.dest.storage_config, self.dest.credential)

    def _dest_full(self, rel: str) -> str:
        if self.single_file:
            return self.dest_path
        return _join(self.dest_path, rel)

    def _src_full(self, rel: str) -> str:
        if self.single_file:
            return self.source_path
        return _join(self.source_path, rel)

    def expand(self):
        session = self._src_session()
        try:
            dirs, files, single = expand_source(session, self.source_path)
            self.single_file = single
            return dirs, files, single
        finally:
            session.destroy()

    def prepare_destination(self, dirs: list[str]) -> None:
        session = self._dst_session()
        try:
            targets = [] if self.single_file else [self.dest_path]
            targets += [_join(self.dest_path, d) for d in dirs]
            for target in targets:
                if not target:
                    continue
                try:
                    session.command(CommandKind.MKDIR, target)
                except AlreadyExists:
                    pass
        finally:
            session.destroy()

    def source_checksum(self, rel: str, algorithm: str) -> str:
        session = self._src_session()
        try:
            return session.command(CommandKind.CHECKSUM, self._src_full(rel), algorithm)
        finally:
            session.destroy()

    def dest_checksum(self, rel: str, algorithm: str) -> str:
        session = self._dst_session()
        try:
            return session.command(CommandKind.CHECKSUM, self._dest_full(rel), algorithm)
        finally:
            session.destroy()

    def dest_stat(self, rel: str) -> StatEntry | None:
        session = self._dst_session()
        try:
            entry = session.stat(self._dest_full(rel))
            return entry if isinstance(entry, StatEntry) else None
        except (NotFound, TransferError):
            return None
        finally:
            session.destroy()

    # below this, a pump thread costs more than the read it would overlap
    SMALL_FILE_BYTES = 64 * 1024

    def move_file(self, rel, size, ranges, progress, cancel_event):
        if ranges.total() <= min(self.spec.blocksize, self.SMALL_FILE_BYTES):
            return self._move_small(rel, ranges, progress)
        src = self._src_session()
        dst = self._dst_session()
        abort = threading.Event()
        blocks: queue.Queue = queue.Queue(maxsize=max(2, self.spec.parallelism))
        sender_error: list[BaseException] = []

        def sink(offset: int, payload: bytes) -> None:
            if abort.is_set():
                raise _Canceled()
            blocks.put((offset, payload))

        def pump() -> None:
            try:
                host = HostContext(concurrency_hint=self.spec.parallelism,
                                   blocksize=self.spec.blocksize,
                                   requested_ranges=ranges)
                src.send(self._src_full(rel), host, sink)
            except _Canceled:
                pass
            except BaseException as exc:  # propagate to the consumer
                sender_error.append(exc)
            finally:
                blocks.put(None)

        sender = threading.Thread(target=pump, name=f"send-{rel}", daemon=True)
        sender.start()

        def block_iter():
            while True:
                item = blocks.get()
                if item is None:
                    return
                if cancel_event.is_set():
                    abort.set()
                    raise _Canceled()
                yield item

        moved = 0

        def counting_progress(offset, length):
            nonlocal moved
            moved += length
            progress(offset, length)

        try:
            host = HostContext(concurrency_hint=self.spec.parallelism,
                               blocksize=self.spec.blocksize,
                               progress_sink=counting_progress)
            dst.recv(self._dest_full(rel), host, block_iter())
        except BaseException:
            abort.set()
            while not blocks.empty():  # unblock the sender
                try:
                    blocks.get_nowait()
                except queue.Empty:
                    break
            raise
        finally:
            sender.join(timeout=10)
            src.destroy()
            dst.destroy()
        if sender_error:
            raise sender_error[0]
        return moved

    def _move_small(self, rel, ranges, progress):
        """At most one block: skip the pump thread and its handoffs."""
        src = self._src_session()
        dst = self._dst_session()
        try:
            staged: list[tuple[int, bytes]] = []
            if ranges:
                host = HostContext(blocksize=self.spec.blocksize,
                                   requested_ranges=ranges)
                src.send(self._src_full(rel), host, lambda o, p: staged.append((o, p)))
            moved = 0

            def counting_progress(offset, length):
                nonlocal moved
                moved += length
                progress(offset, length)

            dst.recv(self._dest_full(rel),
                     HostContext(blocksize=self.spec.blocksize,
                                 progress_sink=counting_progress),
                     iter(staged))
            return moved
        finally:
            src.destroy()
            dst.destroy()


# ---------------------------------------------------------------------------
# Verification


@dataclass(frozen=True)
class VerifyResult:
    matched: bool
    source_digest: str
    dest_digest: str


def verify_file(source_session: Session, dest_session: Session,
                record: FileRecord, algorithm: str = "sha256") -> VerifyResult:
    """Compare source and destination digests for a fully-moved file.

    The destination digest is computed by re-reading the stored bytes, so
    corruption introduced while writing (not just in flight) is caught.
    """
    src = record.source_digest or source_session.command(
        CommandKind.CHECKSUM, record.relative_path, algorithm)
    dst = dest_session.command(CommandKind.CHECKSUM, record.relative_path, algorithm)
    return VerifyResult(matched=(src == dst), source_digest=src, dest_digest=dst)


# ---------------------------------------------------------------------------
# Engine


class Engine:
    def __init__(self, journal_dir: str | Path,
                 endpoints: dict[str, LocalEndpoint] | None = None,
                 route_factory=None, rng: random.Random | None = None):
        self.journal_dir = Path(journal_dir)
        self.journal_dir.mkdir(parents=True, exist_ok=True)
        self.endpoints = dict(endpoints or {})
        self._route_factory = route_factory
        self._tasks: dict[str, TransferTask] = {}
        self._journals: dict[str, Journal] = {}
        self._lock = threading.Lock()
        self._rng = rng or random.Random()

    def add_endpoint(self, endpoint_id: str, connector: str,
                     storage_config: dict[str, str], credential: Credential) -> None:
        self.endpoints[endpoint_id] = LocalEndpoint(connector, storage_config, credential)

    # -- helpers -------------------------------------------------------------

    def _journal_path(self, task_id: str) -> Path:
        return self.journal_dir / f"{task_id}.journal"

    def _journal(self, task_id: str) -> Journal:
        with self._lock:
            j = self._journals.get(task_id)
            if j is None:
                j = Journal(self._journal_path(task_id))
                self._journals[task_id] = j
            return j

    def _endpoint(self, endpoint_id: str) -> LocalEndpoint:
        try:
            return self.endpoints[endpoint_id]
        except KeyError:
            raise EndpointUnreachable(f"unknown endpoint {endpoint_id!r}")

    def _make_route(self, task: TransferTask) -> Route:
        if self._route_factory is not None:
            return self._route_factory(task)
        spec = task.spec
        return LocalRoute(self._endpoint(spec.source[0]), spec.source[1],
                          self._endpoint(spec.destination[0]), spec.destination[1],
                          spec)

    def _get_task(self, task_id: str) -> TransferTask:
        with self._lock:
            task = self._tasks.get(task_id)
        if task is None:
            task = self._load_task(task_id)
        return task

    # -- operations ------------------------------------------------------------

    def submit(self, spec: TransferSpec) -> str:
        task_id = uuid.uuid4().hex[:12]
        task = TransferTask(task_id, spec)
        route = self._make_route(task)
        try:
            dirs, files, single = route.expand()
        finally:
            route.close()
        task.dirs = dirs
        for rel, size in files:
            task.files[rel] = FileRecord(relative_path=rel, size=size)
        task.bytes_total = sum(size for _, size in files)
        with self._lock:
            self._tasks[task_id] = task
            self._journals[task_id] = Journal(self._journal_path(task_id), fresh=True)
        j = self._journals[task_id]
        j.write("task-submitted",
                src_ep=spec.source[0], src_path=spec.source[1],
                dst_ep=spec.destination[0], dst_path=spec.destination[1],
                cc=spec.cc, parallelism=spec.parallelism,
                integrity=spec.integrity.value, max_retries=spec.max_retries,
                checksum=spec.checksum_algorithm, blocksize=spec.blocksize,
                src_cred_ref=spec.source_cred_ref, dst_cred_ref=spec.dest_cred_ref,
                single=int(single))
        for d in dirs:
            j.write("dir-added", path=d, flush=False)
        for rel, size in files:
            j.write("file-added", path=rel, size=size, flush=False)
        j.write("task-state", state=TaskState.SUBMITTED.value, fsync=True)
        log.info("task %s submitted: %d files, %d bytes", task_id,
                 len(files), task.bytes_total)
        return task_id

    def status(self, task_id: str) -> dict:
        return self._get_task(task_id).snapshot()

    def cancel(self, task_id: str) -> None:
        task = self._get_task(task_id)
        with task.lock:
            if task.state in TERMINAL_STATES:
                raise AlreadyTerminal(f"task {task_id} is {task.state.value}")
            task.cancel_event.set()
            running = task.state is TaskState.ACTIVE
            if not running:
                task.state = TaskState.CANCELED
        j = self._journal(task_id)
        j.write("cancel-requested")
        if not running:
            j.write("task-state", state=TaskState.CANCELED.value, fsync=True)

    def run(self, task_id: str) -> TaskState:
        task = self._get_task(task_id)
        if task.state in TERMINAL_STATES:
            raise AlreadyTerminal(f"task {task_id} is {task.state.value}")
        return self._execute(task)

    def resume(self, task_id: str) -> TaskState:
        task = self._get_task(task_id)
        if task.state is TaskState.SUCCEEDED:
            return task.state
        task.cancel_event.clear()
        self._reconcile(task)
        return self._execute(task)

    # -- internals ---------------------------------------------------------

    def _reconcile(self, task: TransferTask) -> None:
        """Drop completed ranges the destination no longer backs."""
        route = self._make_route(task)
        route.single_file = self._is_single(task)
        j = self._journal(task.task_id)
        try:
            for rec in task.files.values():
                if rec.state is FileState.DONE or not rec.completed:
                    continue
                entry = route.dest_stat(rec.relative_path)
                high = max((o + l for o, l in rec.completed), default=0)
                if entry is None or entry.size < high:
                    rec.completed = ByteRangeSet()
                    rec.dest_digest = None
                    j.write("marker-restart", path=rec.relative_path, ranges="",
                            fsync=True)
        finally:
            route.close()

    def _execute(self, task: TransferTask) -> TaskState:
        j = self._journal(task.task_id)
        route = self._make_route(task)
        route.single_file = self._is_single(task)
        with task.lock:
            task.state = TaskState.ACTIVE
            task.started_at = task.started_at or time.time()
            task.run_bytes = 0
        j.write("task-state", state=TaskState.ACTIVE.value)

        try:
            t0 = time.perf_counter()
            try:
                phases = route.startup()
                task.startup_phases.update(phases)
                route.prepare_destination(task.dirs)
            except Exception as exc:
                # startup trouble is not fatal by itself: each file still
                # gets its retry budget, which yields per-file detail
                log.warning("task %s startup failed: %s", task.task_id, exc)
                j.write("note", key="startup-error", value=str(exc)[:200])
            task.startup_phases["prepare_s"] = time.perf_counter() - t0
            j.write("note", key="startup", flush=False,
                    value=";".join(f"{k}={v:.6f}" for k, v in task.startup_phases.items()))

            pending = [rec for rec in task.files.values()
                       if rec.state is not FileState.DONE]
            work: queue.Queue = queue.Queue()
            for rec in pending:
                work.put(rec)

            workers = []
            for i in range(min(task.spec.cc, max(1, len(pending)))):
                t = threading.Thread(target=self._worker, name=f"xfer-{task.task_id}-{i}",
                                     args=(task, route, work), daemon=True)
                t.start()
                workers.append(t)
            for t in workers:
                t.join()
        finally:
            route.close()

        with task.lock:
            if task.cancel_event.is_set():
                task.state = TaskState.CANCELED
            elif all(rec.state is FileState.DONE for rec in task.files.values()):
                task.state = TaskState.SUCCEEDED
            else:
                task.state = TaskState.FAILED
            task.finished_at = time.time()
            final = task.state
        j.write("task-state", state=final.value, fsync=True)
        log.info("task %s finished: %s", task.task_id, final.value)
        return final

    def _is_single(self, task: TransferTask) -> bool:
        if task.dirs or len(task.files) != 1:
            return False
        only = next(iter(task.files))
        return only == task.spec.source[1].strip("/").rsplit("/", 1)[-1]

    def _worker(self, task: TransferTask, route: Route, work: queue.Queue) -> None:
        while not task.cancel_event.is_set():
            try:
                rec = work.get_nowait()
            except queue.Empty:
                return
            try:
                self._process_file(task, route, rec)
            except Exception:
                log.exception("unhandled error for %s", rec.relative_path)
                with task.lock:
                    rec.state = FileState.FAILED

    def _process_file(self, task: TransferTask, route: Route, rec: FileRecord) -> None:
        spec = task.spec
        j = self._journal(task.task_id)
        while True:
            if task.cancel_event.is_set():
                return
            with task.lock:
                rec.attempts += 1
                rec.state = FileState.MOVING
                rec.error = None
            j.write("file-state", path=rec.relative_path,
                    state=rec.state.value, attempts=rec.attempts, flush=False)
            try:
                if spec.integrity is Integrity.STRONG and rec.source_digest is None:
                    rec.source_digest = route.source_checksum(
                        rec.relative_path, spec.checksum_algorithm)
                    j.write("file-digest", path=rec.relative_path, side="source",
                            algorithm=spec.checksum_algorithm,
                            digest=rec.source_digest, flush=False)

                missing = rec.completed.missing(rec.size)
                if missing or rec.size == 0:
                    # zero-byte files still need creating at the destination
                    route.move_file(rec.relative_path, rec.size, missing,
                                    self._progress_cb(task, rec), task.cancel_event)
                if not rec.completed.tiles(rec.size):
                    raise TransferError(
                        f"{rec.relative_path}: moved ranges do not tile the file "
                        f"({rec.completed.total()} of {rec.size} bytes)")

                if spec.integrity is Integrity.STRONG:
                    with task.lock:
                        rec.state = FileState.VERIFYING
                    j.write("file-state", path=rec.relative_path,
                            state=rec.state.value, attempts=rec.attempts)
                    rec.dest_digest = route.dest_checksum(
                        rec.relative_path, spec.checksum_algorithm)
                    j.write("file-digest", path=rec.relative_path, side="dest",
                            algorithm=spec.checksum_algorithm, digest=rec.dest_digest)
                    if rec.dest_digest != rec.source_digest:
                        raise IntegrityMismatch(
                            f"{rec.relative_path}: {rec.source_digest} != {rec.dest_digest}")

                with task.lock:
                    rec.state = FileState.DONE
                    fsync = self._fsync_due(task)
                j.write("marker-restart", path=rec.relative_path,
                        ranges=rec.completed.encode(), fsync=fsync)
                j.write("file-state", path=rec.relative_path,
                        state=rec.state.value, attempts=rec.attempts)
                return
            except _Canceled:
                return
            except Exception as exc:
                if task.cancel_event.is_set():
                    return
                rec.error = f"{type(exc).__name__}: {exc}"
                j.write("file-error", path=rec.relative_path, error=rec.error,
                        attempts=rec.attempts)
                if isinstance(exc, IntegrityMismatch):
                    # granularity decision: a failed verify invalidates the
                    # whole file, not just some blocks
                    with task.lock:
                        rec.completed = ByteRangeSet()
                        rec.dest_digest = None
                    j.write("marker-restart", path=rec.relative_path, ranges="",
                            fsync=True)
                fatal = isinstance(exc, _FATAL_ERRORS)
                if fatal or rec.attempts > spec.max_retries:
                    with task.lock:
                        rec.state = FileState.FAILED
                    j.write("file-state", path=rec.relative_path,
                            state=rec.state.value, attempts=rec.attempts)
                    log.warning("file %s failed after %d attempts: %s",
                                rec.relative_path, rec.attempts, rec.error)
                    return
                delay = backoff_delay(rec.attempts, rng=self._rng)
                log.info("file %s attempt %d failed (%s); retrying in %.2fs",
                         rec.relative_path, rec.attempts, rec.error, delay)
                if task.cancel_event.wait(delay):
                    return

    def _fsync_due(self, task: TransferTask) -> bool:
        # caller holds task.lock
        now = time.time()
        if now - task._last_fsync >= RESTART_FSYNC_INTERVAL:
            task._last_fsync = now
            return True
        return False

    def _progress_cb(self, task: TransferTask, rec: FileRecord):
        j = self._journal(task.task_id)

        def cb(offset: int, length: int) -> None:
            now = time.time()
            with task.lock:
                rec.completed.add(offset, length)
                task.bytes_moved += length
                task.run_bytes += length
                cumulative = rec.completed.total()
                fsync = self._fsync_due(task)
                perf_due = (now - rec._last_perf_time >= PERF_MARKER_INTERVAL
                            or cumulative - rec._last_perf_bytes >= PERF_MARKER_BYTES
                            or cumulative == rec.size)
                if perf_due:
                    rec._last_perf_time = now
                    rec._last_perf_bytes = cumulative
                encoded = rec.completed.encode()
            j.write("marker-restart", path=rec.relative_path, ranges=encoded,
                    fsync=fsync)
            if perf_due:
                j.write("marker-perf", path=rec.relative_path,
                        cumulative=cumulative, flush=False)

        return cb

    def task_markers(self, task_id: str) -> list[Marker]:
        """Performance and restart markers recorded for a task, in order."""
        out = []
        for ev in replay(self._journal_path(task_id)):
            if ev.kind == "marker-perf":
                out.append(Marker(kind="performance", task_id=task_id,
                                  file=ev.get("path"), timestamp=ev.timestamp,
                                  cumulative_bytes=int(ev.get("cumulative", "0"))))
            elif ev.kind == "marker-restart":
                out.append(Marker(kind="restart", task_id=task_id,
                                  file=ev.get("path"), timestamp=ev.timestamp,
                                  completed=ByteRangeSet.decode(ev.get("ranges"))))
        return out

    # -- journal replay ------------------------------------------------------

    def _load_task(self, task_id: str) -> TransferTask:
        path = self._journal_path(task_id)
        if not path.exists():
            raise UnknownTask(task_id)
        task = rebuild_task(task_id, replay(path))
        with self._lock:
            self._tasks[task_id] = task
        return task


def rebuild_task(task_id: str, events: list[Event]) -> TransferTask:
    """Reconstruct task state by replaying journal events in order."""
    from .errors import JournalCorrupt

    spec: TransferSpec | None = None
    task: TransferTask | None = None
    for ev in events:
        if ev.kind == "task-submitted":
            spec = TransferSpec(
                source=(ev.get("src_ep"), ev.get("src_path")),
                destination=(ev.get("dst_ep"), ev.get("dst_path")),
                cc=int(ev.get("cc", "1")),
                parallelism=int(ev.get("parallelism", "1")),
                integrity=Integrity(ev.get("integrity", "off")),
                max_retries=int(ev.get("max_retries", "0")),
                checksum_algorithm=ev.get("checksum", "sha256"),
                blocksize=int(ev.get("blocksize", str(DEFAULT_BLOCKSIZE))),
                source_cred_ref=ev.get("src_cred_ref", "default"),
                dest_cred_ref=ev.get("dst_cred_ref", "default"),
            )
            task = TransferTask(task_id, spec)
        elif task is None:
            raise JournalCorrupt(f"{task_id}: journal does not begin with submission")
        elif ev.kind == "dir-added":
            task.dirs.append(ev.get("path"))
        elif ev.kind == "file-added":
            rec = FileRecord(relative_path=ev.get("path"), size=int(ev.get("size", "0")))
            task.files[rec.relative_path] = rec
            task.bytes_total += rec.size
        elif ev.kind == "task-state":
            task.state = TaskState(ev.get("state"))
        elif ev.kind == "file-state":
            rec = task.files.get(ev.get("path"))
            if rec is not None:
                rec.state = FileState(ev.get("state"))
                rec.attempts = int(ev.get("attempts", "0"))
        elif ev.kind == "file-digest":
            rec = task.files.get(ev.get("path"))
            if rec is not None:
                if ev.get("side") == "source":
                    rec.source_digest = ev.get("digest")
                else:
                    rec.dest_digest = ev.get("digest")
        elif ev.kind == "marker-restart":
            rec = task.files.get(ev.get("path"))
            if rec is not None:
                rec.completed = ByteRangeSet.decode(ev.get("ranges"))
        elif ev.kind == "file-error":
            rec = task.files.get(ev.get("path"))
            if rec is not None:
                rec.error = ev.get("error")
        elif ev.kind == "cancel-requested":
            pass  # the following task-state event carries the outcome
    if task is None:
        raise JournalCorrupt(f"{task_id}: empty journal")
    # A crash mid-run leaves the journal saying "active"; surface that as a
    # resumable, non-terminal state.
    return task
