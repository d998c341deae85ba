"""POSIX filesystem connector.

Sessions are rooted at storage_config["root"]; every path is confined
under that root. Metadata operations resolve symlinks fully; the data
path uses lexical confinement plus O_NOFOLLOW on the leaf, which keeps
the per-file cost low while still rejecting traversal and symlinked-file
escapes.
"""

from __future__ import annotations

import hashlib
import os
import shutil
import stat as statmod
from pathlib import Path

from ..errors import (AlreadyExists, NotFound, PermissionDenied, RangeInvalid,
                      Unsupported)
from ..ranges import ByteRangeSet
from .base import (CommandKind, Connector, Credential, DataSink, DataSource,
                   EntryKind, HostContext, Session, StatEntry,
                   TransferOutcome, iter_blocks, require_config)

CHECKSUM_ALGOS = {"sha256": hashlib.sha256, "md5": hashlib.md5}

_READ_CHUNK = 1024 * 1024


def file_digest(path: str | Path, algorithm: str = "sha256") -> str:
    """Hex digest of a local file, streamed."""
    try:
        hasher = CHECKSUM_ALGOS[algorithm]()
    except KeyError:
        raise Unsupported(f"unknown checksum algorithm {algorithm!r}")
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(_READ_CHUNK)
            if not chunk:
                break
            hasher.update(chunk)
    return hasher.hexdigest()


class PosixSession(Session):
    def __init__(self, root: Path, credential: Credential):
        super().__init__(storage_root=str(root), credential=credential)
        self._root = root  # pre-resolved by the connector
        self._root_str = str(root)

    def _locate(self, path: str) -> str:
        """Lexical confinement: cheap, used on the per-block data path."""
        joined = os.path.normpath(os.path.join(self._root_str, path.lstrip("/")))
        if joined != self._root_str and not joined.startswith(self._root_str + os.sep):
            raise PermissionDenied(f"path escapes storage root: {path!r}")
        return joined

    def _resolve(self, path: str) -> Path:
        """Strict confinement: follows symlinks; used for metadata ops."""
        candidate = Path(self._locate(path)).resolve()
        if candidate != self._root and self._root not in candidate.parents:
            raise PermissionDenied(f"path escapes storage root: {path!r}")
        return candidate

    def _relname(self, p: Path) -> str:
        return os.path.relpath(p, self._root_str).replace(os.sep, "/")

    def _entry(self, p: Path) -> StatEntry:
        st = p.stat()
        kind = EntryKind.DIRECTORY if statmod.S_ISDIR(st.st_mode) else EntryKind.FILE
        return StatEntry(
            name=self._relname(p),
            size=0 if kind is EntryKind.DIRECTORY else st.st_size,
            mtime=st.st_mtime,
            kind=kind,
            permissions=statmod.S_IMODE(st.st_mode),
        )

    def do_stat(self, path: str) -> StatEntry | list[StatEntry]:
        p = self._resolve(path)
        try:
            if p.is_dir():
                return sorted((self._entry(c) for c in p.iterdir()),
                              key=lambda e: e.name)
            return self._entry(p)
        except FileNotFoundError:
            raise NotFound(path)
        except PermissionError:
            raise PermissionDenied(path)

    def do_command(self, kind: CommandKind, *args: str) -> str:
        if kind is CommandKind.MKDIR:
            p = self._resolve(args[0])
            if p.exists():
                raise AlreadyExists(args[0])
            p.mkdir(parents=True)
            return "ok"
        if kind is CommandKind.DELETE:
            p = self._resolve(args[0])
            if not p.exists():
                raise NotFound(args[0])
            if p.is_dir():
                shutil.rmtree(p)
            else:
                p.unlink()
            return "ok"
        if kind is CommandKind.RENAME:
            src = self._resolve(args[0])
            dst = self._resolve(args[1])
            if not src.exists():
                raise NotFound(args[0])
            os.replace(src, dst)  # replaces an existing destination
            return "ok"
        if kind is CommandKind.CHECKSUM:
            p = self._resolve(args[0])
            algorithm = args[1] if len(args) > 1 else "sha256"
            if not p.is_file():
                raise NotFound(args[0])
            return file_digest(p, algorithm)
        raise Unsupported(str(kind))

    def do_send(self, path: str, host: HostContext, sink: DataSink) -> TransferOutcome:
        target = self._locate(path)
        try:
            fd = os.open(target, os.O_RDONLY | os.O_NOFOLLOW)
        except FileNotFoundError:
            raise NotFound(path)
        except (PermissionError, OSError) as exc:
            if isinstance(exc, PermissionError) or exc.errno == 40:  # ELOOP
                raise PermissionDenied(path)
            raise
        outcome = TransferOutcome()
        try:
            st = os.fstat(fd)
            if statmod.S_ISDIR(st.st_mode):
                raise NotFound(path)
            size = st.st_size
            ranges = host.requested_ranges
            if ranges is None:
                ranges = ByteRangeSet.full(size)
            for offset, length in ranges:
                if offset + length > size:
                    raise RangeInvalid(
                        f"range ({offset},{length}) exceeds size {size}")
            for offset, length in iter_blocks(ranges, host.blocksize):
                payload = os.pread(fd, length, offset)
                sink(offset, payload)
                outcome.bytes_moved += length
                outcome.blocks += 1
        finally:
            os.close(fd)
        return outcome

    def do_recv(self, path: str, host: HostContext, source: DataSource) -> TransferOutcome:
        target = self._locate(path)
        flags = os.O_RDWR | os.O_CREAT | os.O_NOFOLLOW
        try:
            # O_CREAT without truncation: resumed transfers keep earlier blocks
            fd = os.open(target, flags, 0o644)
        except FileNotFoundError:
            os.makedirs(os.path.dirname(target), exist_ok=True)
            try:
                fd = os.open(target, flags, 0o644)
            except PermissionError:
                raise PermissionDenied(path)
        except PermissionError:
            raise PermissionDenied(path)
        except OSError as exc:
            if exc.errno == 40:  # ELOOP: symlinked leaf
                raise PermissionDenied(path)
            raise
        outcome = TransferOutcome()
        try:
            for offset, payload in source:
                os.pwrite(fd, payload, offset)
                outcome.bytes_moved += len(payload)
                outcome.blocks += 1
                host.emit(offset, len(payload))
        finally:
            os.close(fd)
        return outcome


class PosixConnector(Connector):
    name = "posix"

    def __init__(self):
        self._roots: dict[str, Path] = {}

    def start(self, storage_config: dict[str, str], credential: Credential) -> PosixSession:
        require_config(storage_config, "root")
        root = storage_config["root"]
        resolved = self._roots.get(root)
        if resolved is None:
            os.makedirs(root, exist_ok=True)
            resolved = Path(root).resolve()
            self._roots[root] = resolved
        return PosixSession(resolved, credential)
