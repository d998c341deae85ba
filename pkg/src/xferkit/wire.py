"""Wire protocol for the control and data channels.

Control messages are length-prefixed canonical text, bit-exact by
construction:

    frame   := uint32_be(length) || payload
    payload := line*                     (UTF-8)
    line    := name "=" value "\\n"

Field names match [a-z0-9_]+ and appear exactly once, sorted
lexicographically; values are percent-encoded (quote with safe='').
Every message carries "version" and "kind". No control message may carry
file payload bytes: the field names "payload", "data" and "block" are
rejected at both encode and decode time, so the exclusion is structural
rather than a convention.

Data frames are binary with a fixed 20-byte header:

    header := uint64_be(file_id) || uint64_be(offset) || uint32_be(length)

followed by `length` payload bytes. A zero-length frame marks the end of
one file's stream. Frames for a file may arrive in any order.
"""

from __future__ import annotations

import re
import socket
import struct
import urllib.parse
from dataclasses import dataclass, field

from .errors import ProtocolError

PROTOCOL_VERSION = 1
MAX_CONTROL_BYTES = 4 * 1024 * 1024

FRAME_HEADER = struct.Struct("!QQI")

# kinds used between coordinator and endpoints
K_HELLO = "hello"
K_REGISTER_CREDENTIAL = "register_credential"
K_CREDENTIAL_REF = "credential_ref"
K_STAT_REQ = "stat_req"
K_STAT_RESP = "stat_resp"
K_XFER_INIT = "xfer_init"
K_DATA_CHANNEL_OFFER = "data_channel_offer"
K_MARKER = "marker"
K_FILE_DONE = "file_done"
K_TASK_DONE = "task_done"
K_ERROR = "error"
K_CANCEL = "cancel"
K_COMMAND_REQ = "command_req"
K_COMMAND_RESP = "command_resp"
# client-to-coordinator plumbing
K_REGISTER_ENDPOINT = "register_endpoint"
K_SUBMIT = "submit"
K_SUBMIT_OK = "submit_ok"
K_STATUS_REQ = "status_req"
K_STATUS_RESP = "status_resp"
K_RESUME = "resume"
K_OK = "ok"

KNOWN_KINDS = {
    K_HELLO, K_REGISTER_CREDENTIAL, K_CREDENTIAL_REF, K_STAT_REQ, K_STAT_RESP,
    K_XFER_INIT, K_DATA_CHANNEL_OFFER, K_MARKER, K_FILE_DONE, K_TASK_DONE,
    K_ERROR, K_CANCEL, K_COMMAND_REQ, K_COMMAND_RESP, K_REGISTER_ENDPOINT,
    K_SUBMIT, K_SUBMIT_OK, K_STATUS_REQ, K_STATUS_RESP, K_RESUME, K_OK,
}

# structural exclusion of file payload from the control channel
FORBIDDEN_FIELDS = {"payload", "data", "block"}

_NAME_RE = re.compile(r"^[a-z0-9_]+$")


@dataclass
class Message:
    kind: str
    version: int = PROTOCOL_VERSION
    fields: dict[str, str] = field(default_factory=dict)

    def get(self, name: str, default: str = "") -> str:
        return self.fields.get(name, default)

    def require(self, name: str) -> str:
        try:
            return self.fields[name]
        except KeyError:
            raise ProtocolError(f"{self.kind}: missing field {name!r}")


def encode_message(kind: str, version: int = PROTOCOL_VERSION, **fields) -> bytes:
    all_fields = {"kind": kind, "version": str(version)}
    for name, value in fields.items():
        if value is None:
            continue
        all_fields[name] = str(value)
    lines = []
    for name in sorted(all_fields):
        if not _NAME_RE.match(name):
            raise ProtocolError(f"bad field name {name!r}")
        if name in FORBIDDEN_FIELDS:
            raise ProtocolError(f"field {name!r} is excluded from the control channel")
        value = urllib.parse.quote(all_fields[name], safe="")
        lines.append(f"{name}={value}\n")
    body = "".join(lines).encode()
    return struct.pack("!I", len(body)) + body


def decode_payload(body: bytes) -> Message:
    fields: dict[str, str] = {}
    try:
        text = body.decode()
    except UnicodeDecodeError:
        raise ProtocolError("control payload is not UTF-8")
    for line in text.splitlines():
        name, sep, value = line.partition("=")
        if not sep or not _NAME_RE.match(name):
            raise ProtocolError(f"malformed control line {line[:60]!r}")
        if name in FORBIDDEN_FIELDS:
            raise ProtocolError(f"field {name!r} is excluded from the control channel")
        if name in fields:
            raise ProtocolError(f"duplicate field {name!r}")
        fields[name] = urllib.parse.unquote(value)
    if "kind" not in fields or "version" not in fields:
        raise ProtocolError("control message missing kind/version")
    try:
        version = int(fields.pop("version"))
    except ValueError:
        raise ProtocolError("non-integer version")
    kind = fields.pop("kind")
    return Message(kind=kind, version=version, fields=fields)


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def send_message(sock: socket.socket, kind: str, version: int = PROTOCOL_VERSION,
                 **fields) -> int:
    raw = encode_message(kind, version=version, **fields)
    sock.sendall(raw)
    return len(raw)


def recv_message(sock: socket.socket) -> tuple[Message, int]:
    """Read one control message; returns (message, bytes consumed)."""
    header = recv_exact(sock, 4)
    (length,) = struct.unpack("!I", header)
    if length > MAX_CONTROL_BYTES:
        raise ProtocolError(f"control message too large: {length} bytes")
    body = recv_exact(sock, length)
    return decode_payload(body), 4 + length


def send_frame(sock: socket.socket, file_id: int, offset: int, payload: bytes) -> None:
    sock.sendall(FRAME_HEADER.pack(file_id, offset, len(payload)) + payload)


def send_end_frame(sock: socket.socket, file_id: int) -> None:
    sock.sendall(FRAME_HEADER.pack(file_id, 0, 0))


def recv_frame(sock: socket.socket) -> tuple[int, int, bytes] | None:
    """Read one data frame; None signals end-of-stream for the file."""
    header = recv_exact(sock, FRAME_HEADER.size)
    file_id, offset, length = FRAME_HEADER.unpack(header)
    if length == 0:
        return None
    return file_id, offset, recv_exact(sock, length)


# -- value helpers for structured fields -------------------------------------


def encode_entries(entries: list[tuple[str, int, float, str]]) -> str:
    """Serialize stat entries as name,size,mtime,kind joined with '|'."""
    return "|".join(
        f"{urllib.parse.quote(name, safe='')},{size},{mtime},{kind}"
        for name, size, mtime, kind in entries)


def decode_entries(value: str) -> list[tuple[str, int, float, str]]:
    out = []
    if not value:
        return out
    for item in value.split("|"):
        name, size, mtime, kind = item.split(",")
        out.append((urllib.parse.unquote(name), int(size), float(mtime), kind))
    return out
