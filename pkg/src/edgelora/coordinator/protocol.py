"""Length-prefixed binary frames for coordinator <-> edge traffic.

frame   = length u32 BE (payload + CRC) | payload | CRC32(payload) u32 BE
payload = "LECC" | version u16 | type u8 | node u32 | round u32 | body-len u32 | body
"""
from __future__ import annotations

import enum
import json
import struct
import zlib
from dataclasses import dataclass

from ..errors import ProtocolError

MAGIC = b"LECC"
VERSION = 1
HEADER = struct.Struct(">4sHBIII")
MAX_FRAME = 64 * 1024 * 1024


class MsgType(enum.IntEnum):
    HELLO = 1
    SUBMIT = 2
    BUNDLE = 3
    ACK = 4
    REJECT = 5
    ERROR = 6


class ChecksumError(ProtocolError):
    """The frame parsed but its CRC does not match."""


@dataclass(frozen=True)
class Message:
    type: MsgType
    node: int
    round: int
    body: bytes = b""

    def text(self) -> str:
        return self.body.decode("utf-8", errors="replace")

    def json(self):
        return json.loads(self.body.decode("utf-8")) if self.body else None


def encode_payload(msg: Message) -> bytes:
    return HEADER.pack(MAGIC, VERSION, int(msg.type), msg.node, msg.round, len(msg.body)) + msg.body


def encode(msg: Message) -> bytes:
    payload = encode_payload(msg)
    return struct.pack(">I", len(payload) + 4) + payload + struct.pack(">I", zlib.crc32(payload))


def decode_frame(frame: bytes) -> Message:
    """Parse payload+CRC (everything after the length prefix)."""
    if len(frame) < HEADER.size + 4:
        raise ProtocolError("frame shorter than its header")
    payload, (crc,) = frame[:-4], struct.unpack(">I", frame[-4:])
    magic, version, mtype, node, rnd, blen = HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise ProtocolError("bad frame magic")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if blen != len(payload) - HEADER.size:
        raise ProtocolError(f"body length {blen} does not match frame ({len(payload) - HEADER.size})")
    if zlib.crc32(payload) != crc:
        raise ChecksumError("frame CRC mismatch")
    try:
        kind = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype}") from None
    return Message(kind, node, rnd, bytes(payload[HEADER.size:]))


def decode(data: bytes) -> Message:
    """Parse one complete frame including its length prefix."""
    if len(data) < 4:
        raise ProtocolError("frame truncated")
    (length,) = struct.unpack(">I", data[:4])
    if length != len(data) - 4:
        raise ProtocolError(f"length prefix {length} does not match {len(data) - 4} bytes")
    return decode_frame(data[4:])


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise EOFError("peer closed the connection")
        buf += chunk
    return bytes(buf)


def read_message(sock) -> Message:
    """Block for one frame; EOFError on a clean close before any byte."""
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length < HEADER.size + 4 or length > MAX_FRAME:
        raise ProtocolError(f"implausible frame length {length}")
    return decode_frame(_recv_exact(sock, length))


def write_message(sock, msg: Message):
    sock.sendall(encode(msg))


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)
