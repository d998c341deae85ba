"""Generic S3-style object store connector.

Works against any endpoint speaking the toolkit's minimal S3 dialect
(PUT/GET/HEAD/DELETE on /bucket/key, prefix listing, multipart uploads)
— in practice the bundled simulator or any compatible service.
Authentication is a static bearer token sent as x-auth-token; paths map
to object keys in a flat namespace where "directories" are key prefixes.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import requests

from ..errors import (AlreadyExists, AuthFailed, BackendThrottled,
                      EndpointUnreachable, NotFound, RangeInvalid,
                      TransferError, Unsupported)
from ..ranges import ByteRangeSet
from .base import (CommandKind, Connector, Credential, DataSink, DataSource,
                   EntryKind, HostContext, Session, StatEntry,
                   TransferOutcome, require_config)
from .posix import CHECKSUM_ALGOS

SIM_MIN_PART_SIZE = 64 * 1024
S3_MIN_PART_SIZE = 5 * 1024 * 1024


@dataclass(frozen=True)
class ObjectStoreConfig:
    endpoint_url: str
    bucket: str
    multipart_threshold: int = 8 * 1024 * 1024
    part_size: int = 5 * 1024 * 1024
    client_tag: str = ""  # simulator link-profile selector

    @classmethod
    def from_map(cls, config: dict[str, str]) -> "ObjectStoreConfig":
        require_config(config, "endpoint_url", "bucket")
        return cls(
            endpoint_url=config["endpoint_url"].rstrip("/"),
            bucket=config["bucket"],
            multipart_threshold=int(config.get("multipart_threshold", 8 * 1024 * 1024)),
            part_size=int(config.get("part_size", 5 * 1024 * 1024)),
            client_tag=config.get("client_tag", ""),
        )


def _raise_for(status: int, path: str) -> None:
    if status == 404:
        raise NotFound(path)
    if status == 403:
        raise AuthFailed(path)
    if status in (429, 503):
        raise BackendThrottled(f"HTTP {status} for {path}")
    if status == 416:
        raise RangeInvalid(path)
    raise TransferError(f"HTTP {status} for {path}")


class ObjectStoreSession(Session):
    def __init__(self, config: ObjectStoreConfig, credential: Credential):
        super().__init__(storage_root=f"{config.endpoint_url}/{config.bucket}",
                         credential=credential)
        self.config = config
        self._http = requests.Session()
        self._apply_headers()

    def _apply_headers(self) -> None:
        if self.credential.payload:
            self._http.headers["x-auth-token"] = self.credential.payload.decode()
        elif "x-auth-token" in self._http.headers:
            del self._http.headers["x-auth-token"]
        if self.config.client_tag:
            self._http.headers["x-sim-client"] = self.config.client_tag

    def do_set_credential(self, credential: Credential) -> None:
        self._apply_headers()

    def do_destroy(self) -> None:
        self._http.close()

    def _url(self, key: str) -> str:
        return f"{self.config.endpoint_url}/{self.config.bucket}/{requests.utils.quote(key, safe='')}"

    def _request(self, method: str, url: str, **kwargs) -> requests.Response:
        try:
            return self._http.request(method, url, **kwargs)
        except requests.ConnectionError as exc:
            raise EndpointUnreachable(str(exc))

    # -- interface -----------------------------------------------------------

    def do_stat(self, path: str) -> StatEntry | list[StatEntry]:
        key = path.lstrip("/")
        if key and not key.endswith("/"):
            resp = self._request("HEAD", self._url(key))
            if resp.status_code == 200:
                return StatEntry(name=key, size=int(resp.headers.get("x-size", "0")),
                                 mtime=float(resp.headers.get("x-mtime", "0")),
                                 kind=EntryKind.OBJECT, permissions=None)
            if resp.status_code not in (404,):
                _raise_for(resp.status_code, path)
        # prefix listing
        resp = self._request("GET", f"{self.config.endpoint_url}/{self.config.bucket}",
                             params={"prefix": key})
        if resp.status_code != 200:
            _raise_for(resp.status_code, path)
        entries = [StatEntry(name=obj["key"], size=obj["size"], mtime=obj["mtime"],
                             kind=EntryKind.OBJECT, permissions=None)
                   for obj in resp.json()["objects"]]
        if not entries and key:
            raise NotFound(path)
        return entries

    def do_command(self, kind: CommandKind, *args: str) -> str:
        if kind is CommandKind.MKDIR:
            key = args[0].strip("/") + "/"
            head = self._request("HEAD", self._url(key))
            if head.status_code == 200:
                raise AlreadyExists(args[0])
            resp = self._request("PUT", self._url(key), data=b"")
            if resp.status_code != 200:
                _raise_for(resp.status_code, args[0])
            return "ok"
        if kind is CommandKind.DELETE:
            resp = self._request("DELETE", self._url(args[0].lstrip("/")))
            if resp.status_code not in (200, 204):
                _raise_for(resp.status_code, args[0])
            return "ok"
        if kind is CommandKind.RENAME:
            # no server-side copy in the dialect: fetch, re-put, delete
            src, dst = args[0].lstrip("/"), args[1].lstrip("/")
            resp = self._request("GET", self._url(src))
            if resp.status_code != 200:
                _raise_for(resp.status_code, src)
            put = self._request("PUT", self._url(dst), data=resp.content)
            if put.status_code != 200:
                _raise_for(put.status_code, dst)
            self._request("DELETE", self._url(src))
            return "ok"
        if kind is CommandKind.CHECKSUM:
            key = args[0].lstrip("/")
            algorithm = args[1] if len(args) > 1 else "sha256"
            if algorithm not in CHECKSUM_ALGOS:
                raise Unsupported(f"unknown checksum algorithm {algorithm!r}")
            hasher = CHECKSUM_ALGOS[algorithm]()
            resp = self._request("GET", self._url(key), stream=True)
            if resp.status_code != 200:
                _raise_for(resp.status_code, args[0])
            for chunk in resp.iter_content(chunk_size=1024 * 1024):
                hasher.update(chunk)
            return hasher.hexdigest()
        raise Unsupported(str(kind))

    def do_send(self, path: str, host: HostContext, sink: DataSink) -> TransferOutcome:
        key = path.lstrip("/")
        outcome = TransferOutcome()
        ranges = host.requested_ranges
        if ranges is None:
            entry = self.do_stat(key)
            if isinstance(entry, list):
                raise NotFound(path)
            ranges = ByteRangeSet.full(entry.size)
        for offset, length in ranges:
            headers = {"Range": f"bytes={offset}-{offset + length - 1}"}
            resp = self._request("GET", self._url(key), headers=headers, stream=True)
            if resp.status_code not in (200, 206):
                _raise_for(resp.status_code, path)
            cursor = offset
            for chunk in resp.iter_content(chunk_size=host.blocksize):
                sink(cursor, chunk)
                cursor += len(chunk)
                outcome.bytes_moved += len(chunk)
                outcome.blocks += 1
            if cursor != offset + length:
                raise RangeInvalid(
                    f"short read for {path}: got {cursor - offset} of {length} bytes")
        return outcome

    def do_recv(self, path: str, host: HostContext, source: DataSource) -> TransferOutcome:
        """Spool incoming blocks locally, then upload in one shot or by parts.

        Object stores cannot write ranges in place, so out-of-order blocks
        are assembled in a temp file first. Progress is reported only once
        the object is durable at the store.
        """
        key = path.lstrip("/")
        outcome = TransferOutcome()
        size = 0
        fd, spool = tempfile.mkstemp(prefix="objspool-")
        try:
            with os.fdopen(fd, "r+b") as fh:
                for offset, payload in source:
                    fh.seek(offset)
                    fh.write(payload)
                    size = max(size, offset + len(payload))
                    outcome.blocks += 1
                fh.flush()
                fh.seek(0)
                if size >= self.config.multipart_threshold:
                    self._upload_multipart(key, fh, size)
                else:
                    resp = self._request("PUT", self._url(key), data=fh.read(size))
                    if resp.status_code != 200:
                        _raise_for(resp.status_code, path)
            outcome.bytes_moved = size
            host.emit(0, size)
        finally:
            os.unlink(spool)
        return outcome

    def _upload_multipart(self, key: str, fh, size: int) -> None:
        part_size = max(self.config.part_size, SIM_MIN_PART_SIZE)
        resp = self._request("POST", self._url(key), params={"uploads": ""})
        if resp.status_code != 200:
            _raise_for(resp.status_code, key)
        upload_id = resp.json()["upload_id"]
        offset = 0
        part_number = 1
        while offset < size:
            step = min(part_size, size - offset)
            fh.seek(offset)
            part = self._request("PUT", self._url(key),
                                 params={"uploadId": upload_id, "partNumber": str(part_number)},
                                 data=fh.read(step))
            if part.status_code != 200:
                _raise_for(part.status_code, key)
            offset += step
            part_number += 1
        done = self._request("POST", self._url(key), params={"uploadId": upload_id})
        if done.status_code != 200:
            _raise_for(done.status_code, key)


class ObjectStoreConnector(Connector):
    name = "object"

    def __init__(self, config: ObjectStoreConfig | None = None):
        self._config = config

    def start(self, storage_config: dict[str, str], credential: Credential) -> ObjectStoreSession:
        config = self._config or ObjectStoreConfig.from_map(storage_config)
        session = ObjectStoreSession(config, credential)
        return session


def object_connector(config: ObjectStoreConfig) -> ObjectStoreConnector:
    return ObjectStoreConnector(config)
