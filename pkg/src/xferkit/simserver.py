"""Standalone object-store service with shaped links.

Speaks the toolkit's minimal S3 dialect over HTTP/1.1:

    PUT    /bucket/key                     store object (ETag returned)
    GET    /bucket/key                     fetch object (Range supported)
    HEAD   /bucket/key                     object metadata
    DELETE /bucket/key                     remove object
    GET    /bucket?prefix=p                JSON listing of keys under p
    POST   /bucket/key?uploads             initiate multipart upload
    PUT    /bucket/key?uploadId=U&partNumber=N   upload one part
    POST   /bucket/key?uploadId=U          complete multipart upload

Authentication is a static header token (x-auth-token). Each request may
carry an x-sim-client tag selecting a LinkProfile; the service then takes
at least that profile's round-trip time plus payload/bandwidth to answer,
which lets one process emulate connector-near-storage and
connector-at-institution placements without a real WAN.

Objects persist one file per object under the store root, with a sidecar
"<object>.meta" holding key=value lines (key, etag, mtime). Writes are
atomic (temp file + rename); reads observe the last acknowledged write.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import threading
import time
import urllib.parse
import uuid
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path


@dataclass(frozen=True)
class LinkProfile:
    """Network shaping for one class of client."""

    rtt: float = 0.0  # seconds added to every request
    bandwidth: float | None = None  # bytes/second, None = unshaped
    applies_to: str = "*"

    def delay_for(self, payload_bytes: int) -> float:
        d = self.rtt
        if self.bandwidth:
            d += payload_bytes / self.bandwidth
        return d


@dataclass(frozen=True)
class LogEntry:
    method: str
    key: str
    client_tag: str
    timestamp: float


class _Store:
    """Flat object storage: one payload file plus one .meta sidecar per key."""

    def __init__(self, root: str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _obj_path(self, bucket: str, key: str) -> Path:
        return self.root / bucket / urllib.parse.quote(key, safe="")

    def put(self, bucket: str, key: str, data: bytes) -> str:
        path = self._obj_path(bucket, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        etag = hashlib.md5(data).hexdigest()
        mtime = time.time()
        tmp = path.with_name(path.name + f".tmp{os.getpid()}.{uuid.uuid4().hex[:8]}")
        tmp.write_bytes(data)
        meta = f"key={urllib.parse.quote(key, safe='')}\netag={etag}\nmtime={mtime}\n"
        tmp_meta = tmp.with_name(tmp.name + ".meta")
        tmp_meta.write_text(meta)
        with self._lock:
            os.replace(tmp, path)
            os.replace(tmp_meta, Path(str(path) + ".meta"))
        return etag

    def get(self, bucket: str, key: str) -> tuple[bytes, dict] | None:
        path = self._obj_path(bucket, key)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            return None
        return data, self.head(bucket, key)

    def head(self, bucket: str, key: str) -> dict | None:
        path = self._obj_path(bucket, key)
        if not path.is_file():
            return None
        meta = {"size": path.stat().st_size, "etag": "", "mtime": path.stat().st_mtime}
        meta_path = Path(str(path) + ".meta")
        if meta_path.is_file():
            for line in meta_path.read_text().splitlines():
                name, _, value = line.partition("=")
                if name == "etag":
                    meta["etag"] = value
                elif name == "mtime":
                    meta["mtime"] = float(value)
        return meta

    def delete(self, bucket: str, key: str) -> bool:
        path = self._obj_path(bucket, key)
        with self._lock:
            if not path.is_file():
                return False
            path.unlink()
            meta = Path(str(path) + ".meta")
            if meta.is_file():
                meta.unlink()
        return True

    def list(self, bucket: str, prefix: str) -> list[dict]:
        bucket_dir = self.root / bucket
        out = []
        if not bucket_dir.is_dir():
            return out
        for child in bucket_dir.iterdir():
            if child.name.endswith(".meta") or ".tmp" in child.name:
                continue
            key = urllib.parse.unquote(child.name)
            if not key.startswith(prefix):
                continue
            meta = self.head(bucket, key)
            out.append({"key": key, "size": meta["size"], "mtime": meta["mtime"],
                        "etag": meta["etag"]})
        out.sort(key=lambda e: e["key"])
        return out


class _MultipartState:
    def __init__(self, root: Path):
        self.dir = root / ".uploads"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._meta: dict[str, tuple[str, str]] = {}  # upload_id -> (bucket, key)
        self._lock = threading.Lock()

    def initiate(self, bucket: str, key: str) -> str:
        upload_id = uuid.uuid4().hex
        (self.dir / upload_id).mkdir()
        with self._lock:
            self._meta[upload_id] = (bucket, key)
        return upload_id

    def put_part(self, upload_id: str, part_number: int, data: bytes) -> str | None:
        with self._lock:
            if upload_id not in self._meta:
                return None
        part = self.dir / upload_id / f"{part_number:06d}"
        part.write_bytes(data)
        return hashlib.md5(data).hexdigest()

    def complete(self, upload_id: str, store: _Store) -> str | None:
        with self._lock:
            target = self._meta.pop(upload_id, None)
        if target is None:
            return None
        bucket, key = target
        buf = io.BytesIO()
        part_dir = self.dir / upload_id
        for part in sorted(part_dir.iterdir()):
            buf.write(part.read_bytes())
        etag = store.put(bucket, key, buf.getvalue())
        for part in part_dir.iterdir():
            part.unlink()
        part_dir.rmdir()
        return etag


class ObjectStoreServer:
    """In-process object-store service. Use serve() or start()/stop()."""

    def __init__(self, store_root: str, link_profiles: dict[str, LinkProfile] | None = None,
                 bind_address: tuple[str, int] = ("127.0.0.1", 0), auth_token: str | None = None):
        self.store = _Store(store_root)
        self.multipart = _MultipartState(self.store.root)
        self.profiles = dict(link_profiles or {})
        self.auth_token = auth_token
        self._log: list[LogEntry] = []
        self._log_lock = threading.Lock()
        self._httpd = ThreadingHTTPServer(bind_address, _Handler)
        self._httpd.daemon_threads = True
        self._httpd.sim = self  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._httpd.server_address[:2]

    @property
    def endpoint_url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "ObjectStoreServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        name="objstore-sim", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def record(self, method: str, key: str, client_tag: str) -> None:
        with self._log_lock:
            self._log.append(LogEntry(method, key, client_tag, time.time()))

    def request_log(self) -> list[LogEntry]:
        with self._log_lock:
            return list(self._log)

    def clear_log(self) -> None:
        with self._log_lock:
            self._log.clear()

    def shape(self, client_tag: str, payload_bytes: int) -> None:
        profile = self.profiles.get(client_tag) or self.profiles.get("*")
        if profile is not None:
            delay = profile.delay_for(payload_bytes)
            if delay > 0:
                time.sleep(delay)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "objstore-sim/0.1"

    @property
    def sim(self) -> ObjectStoreServer:
        return self.server.sim  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):  # silence default stderr chatter
        pass

    # -- small helpers -------------------------------------------------------

    def _reply(self, status: int, body: bytes = b"", headers: dict | None = None):
        self.send_response(status)
        for name, value in (headers or {}).items():
            self.send_header(name, value)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if body and self.command != "HEAD":
            self.wfile.write(body)

    def _reply_json(self, status: int, payload) -> None:
        body = json.dumps(payload).encode()
        self._reply(status, body, {"Content-Type": "application/json"})

    def _error(self, status: int, code: str) -> None:
        self._reply_json(status, {"error": code})

    def _parse(self):
        parsed = urllib.parse.urlparse(self.path)
        parts = parsed.path.lstrip("/").split("/", 1)
        bucket = urllib.parse.unquote(parts[0]) if parts[0] else ""
        key = urllib.parse.unquote(parts[1]) if len(parts) > 1 else ""
        query = urllib.parse.parse_qs(parsed.query, keep_blank_values=True)
        return bucket, key, query

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length", "0"))
        return self.rfile.read(length) if length else b""

    def _authorized(self) -> bool:
        token = self.sim.auth_token
        return token is None or self.headers.get("x-auth-token") == token

    def _enter(self, key: str, payload_bytes: int) -> bool:
        """Auth check, request logging, and link shaping for one request."""
        if not self._authorized():
            self._error(403, "AccessDenied")
            return False
        tag = self.headers.get("x-sim-client", "")
        self.sim.record(self.command, key, tag)
        self.sim.shape(tag, payload_bytes)
        return True

    # -- verbs ---------------------------------------------------------------

    def do_PUT(self):
        bucket, key, query = self._parse()
        data = self._body()
        if not self._enter(f"{bucket}/{key}", len(data)):
            return
        if not bucket or not key:
            return self._error(400, "InvalidRequest")
        if "uploadId" in query:
            part_number = int(query.get("partNumber", ["0"])[0])
            etag = self.sim.multipart.put_part(query["uploadId"][0], part_number, data)
            if etag is None:
                return self._error(404, "NoSuchUpload")
            return self._reply(200, headers={"ETag": f'"{etag}"'})
        etag = self.sim.store.put(bucket, key, data)
        self._reply(200, headers={"ETag": f'"{etag}"'})

    def do_GET(self):
        bucket, key, query = self._parse()
        if bucket == "_sim":
            return self._admin_get(key)
        if not bucket:
            return self._error(400, "InvalidRequest")
        if not key:
            prefix = query.get("prefix", [""])[0]
            listing = self.sim.store.list(bucket, prefix)
            if not self._enter(bucket, 0):
                return
            return self._reply_json(200, {"objects": listing})
        found = self.sim.store.get(bucket, key)
        rng = self._parse_range()
        payload_len = 0
        if found:
            data = found[0]
            payload_len = len(data) if rng is None else max(0, min(rng[1], len(data) - 1) - rng[0] + 1)
        if not self._enter(f"{bucket}/{key}", payload_len):
            return
        if found is None:
            return self._error(404, "NoSuchKey")
        data, meta = found
        headers = {"ETag": f'"{meta["etag"]}"', "x-mtime": str(meta["mtime"]),
                   "Accept-Ranges": "bytes"}
        if rng is not None:
            start, end = rng
            if start >= len(data) or start > end:
                return self._error(416, "InvalidRange")
            end = min(end, len(data) - 1)
            headers["Content-Range"] = f"bytes {start}-{end}/{len(data)}"
            return self._reply(206, data[start:end + 1], headers)
        self._reply(200, data, headers)

    def do_HEAD(self):
        bucket, key, _ = self._parse()
        if not self._enter(f"{bucket}/{key}", 0):
            return
        meta = self.sim.store.head(bucket, key)
        if meta is None:
            return self._reply(404)
        self._reply(200, b"", {
            "Content-Length-Object": str(meta["size"]),
            "ETag": f'"{meta["etag"]}"',
            "x-mtime": str(meta["mtime"]),
            "x-size": str(meta["size"]),
        })

    def do_DELETE(self):
        bucket, key, _ = self._parse()
        if not self._enter(f"{bucket}/{key}", 0):
            return
        if self.sim.store.delete(bucket, key):
            self._reply(204)
        else:
            self._error(404, "NoSuchKey")

    def do_POST(self):
        bucket, key, query = self._parse()
        body = self._body()
        if bucket == "_sim":
            return self._admin_post(key)
        if not self._enter(f"{bucket}/{key}", len(body)):
            return
        if "uploads" in query:
            upload_id = self.sim.multipart.initiate(bucket, key)
            return self._reply_json(200, {"upload_id": upload_id})
        if "uploadId" in query:
            etag = self.sim.multipart.complete(query["uploadId"][0], self.sim.store)
            if etag is None:
                return self._error(404, "NoSuchUpload")
            return self._reply_json(200, {"etag": etag})
        self._error(400, "InvalidRequest")

    # -- admin (unshaped, unlogged) -------------------------------------------

    def _admin_get(self, key: str) -> None:
        if key == "log":
            entries = [{"method": e.method, "key": e.key, "client_tag": e.client_tag,
                        "timestamp": e.timestamp} for e in self.sim.request_log()]
            return self._reply_json(200, {"entries": entries})
        self._error(404, "NotFound")

    def _admin_post(self, key: str) -> None:
        if key == "clear-log":
            self.sim.clear_log()
            return self._reply_json(200, {"ok": True})
        self._error(404, "NotFound")

    def _parse_range(self) -> tuple[int, int] | None:
        header = self.headers.get("Range")
        if not header or not header.startswith("bytes="):
            return None
        spec = header[len("bytes="):]
        start_s, _, end_s = spec.partition("-")
        start = int(start_s)
        end = int(end_s) if end_s else 2**62
        return start, end


def serve(store_root: str, link_profiles: dict[str, LinkProfile] | None = None,
          bind_address: tuple[str, int] = ("127.0.0.1", 0),
          auth_token: str | None = None) -> ObjectStoreServer:
    """Start the service in a background thread; raises OSError if the port is taken."""
    return ObjectStoreServer(store_root, link_profiles, bind_address, auth_token).start()
