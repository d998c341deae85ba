"""Control-channel codec: canonical form, exclusions, and data framing."""

import socket
import struct

import pytest

from xferkit import wire
from xferkit.errors import ProtocolError


def test_encoding_is_canonical_and_bit_exact():
    raw = wire.encode_message("hello", task_id="t1", alpha="A")
    length = struct.unpack("!I", raw[:4])[0]
    body = raw[4:]
    assert len(body) == length
    # fields sorted lexicographically, percent-encoded, one per line
    assert body == b"alpha=A\nkind=hello\ntask_id=t1\nversion=1\n"
    # identical inputs encode identically regardless of kwarg order
    again = wire.encode_message("hello", alpha="A", task_id="t1")
    assert raw == again


def test_round_trip_with_awkward_values():
    tricky = "path with spaces/=&%\n\ttabs"
    raw = wire.encode_message("stat_req", path=tricky)
    msg = wire.decode_payload(raw[4:])
    assert msg.kind == "stat_req"
    assert msg.version == wire.PROTOCOL_VERSION
    assert msg.get("path") == tricky


def test_none_fields_omitted():
    raw = wire.encode_message("ok", maybe=None)
    assert b"maybe" not in raw


def test_payload_fields_rejected_both_ways():
    for name in ("payload", "data", "block"):
        with pytest.raises(ProtocolError):
            wire.encode_message("marker", **{name: "x"})
        body = f"kind=marker\nversion=1\n{name}=ff\n".encode()
        with pytest.raises(ProtocolError):
            wire.decode_payload(body)


def test_duplicate_and_malformed_fields_rejected():
    with pytest.raises(ProtocolError):
        wire.decode_payload(b"kind=ok\nversion=1\nkind=ok\n")
    with pytest.raises(ProtocolError):
        wire.decode_payload(b"kind=ok\nversion=1\nBAD NAME=1\n")
    with pytest.raises(ProtocolError):
        wire.decode_payload(b"version=1\n")  # missing kind
    with pytest.raises(ProtocolError):
        wire.decode_payload(b"kind=ok\nversion=abc\n")


def test_oversized_message_rejected():
    a, b = socket.socketpair()
    try:
        a.sendall(struct.pack("!I", wire.MAX_CONTROL_BYTES + 1))
        with pytest.raises(ProtocolError):
            wire.recv_message(b)
    finally:
        a.close()
        b.close()


def test_message_socket_round_trip():
    a, b = socket.socketpair()
    try:
        sent = wire.send_message(a, "hello", note="hi")
        msg, received = wire.recv_message(b)
        assert msg.kind == "hello"
        assert msg.get("note") == "hi"
        assert sent == received
    finally:
        a.close()
        b.close()


def test_data_frame_round_trip_and_header_layout():
    a, b = socket.socketpair()
    try:
        wire.send_frame(a, file_id=7, offset=4096, payload=b"abcde")
        header = wire.FRAME_HEADER
        assert header.size == 20  # 8 + 8 + 4 bytes
        frame = wire.recv_frame(b)
        assert frame == (7, 4096, b"abcde")
        wire.send_end_frame(a, 7)
        assert wire.recv_frame(b) is None
    finally:
        a.close()
        b.close()


def test_frames_any_order():
    a, b = socket.socketpair()
    try:
        wire.send_frame(a, 1, 100, b"second")
        wire.send_frame(a, 1, 0, b"first")
        first = wire.recv_frame(b)
        second = wire.recv_frame(b)
        assert first[1] == 100 and second[1] == 0
    finally:
        a.close()
        b.close()


def test_entries_round_trip():
    entries = [("dir with,commas|pipes", 0, 0.0, "directory"),
               ("f.bin", 123, 456.5, "file")]
    encoded = wire.encode_entries(entries)
    assert wire.decode_entries(encoded) == entries
    assert wire.decode_entries("") == []
