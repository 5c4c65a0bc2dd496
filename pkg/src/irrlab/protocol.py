"""Wire format for client/server messages.

Each message travels over TCP as a 4-byte big-endian payload length followed
by the payload::

    msg_type  u8      0 interaction, 1 frame result, 2 shutdown, 3 error
    guid      16 bytes
    interaction u8    ASCII 'a', 'd' or 'q'
    frame_len u32 BE
    frame     frame_len bytes
"""
from __future__ import annotations

import os
import socket
import struct
from dataclasses import dataclass, field

INTERACTION = 0
FRAME_RESULT = 1
SHUTDOWN = 2
ERROR = 3
MESSAGE_TYPES = (INTERACTION, FRAME_RESULT, SHUTDOWN, ERROR)

ROTATE_LEFT = "a"
ROTATE_RIGHT = "d"
QUIT = "q"
INTERACTIONS = (ROTATE_LEFT, ROTATE_RIGHT, QUIT)

GUID_LEN = 16
_HEADER = struct.Struct(">B16sBI")
_LENGTH = struct.Struct(">I")
MAX_PAYLOAD = 64 * 1024 * 1024


class ProtocolError(ValueError):
    pass


def new_guid() -> bytes:
    return os.urandom(GUID_LEN)


@dataclass
class NetworkMessage:
    interaction: str
    id: bytes
    frame: bytes = b""
    kind: int = INTERACTION
    # simulator bookkeeping; never serialized
    messageNumber: int = field(default=0, compare=False)

    @property
    def guid_hex(self) -> str:
        return self.id.hex()


def encode_message(m: NetworkMessage) -> bytes:
    """Serialize ``m`` to a payload (without the length prefix)."""
    if m.kind not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {m.kind}")
    if len(m.id) != GUID_LEN:
        raise ProtocolError(f"guid must be {GUID_LEN} bytes, got {len(m.id)}")
    if m.kind != ERROR and m.interaction not in INTERACTIONS:
        raise ProtocolError(f"unknown interaction {m.interaction!r}")
    try:
        code = m.interaction.encode("ascii")
    except UnicodeEncodeError:
        raise ProtocolError(f"interaction must be ASCII, got {m.interaction!r}") from None
    if len(code) != 1:
        raise ProtocolError(f"interaction must be one character, got {m.interaction!r}")
    return _HEADER.pack(m.kind, m.id, code[0], len(m.frame)) + bytes(m.frame)


def decode_message(payload: bytes) -> NetworkMessage:
    if len(payload) < _HEADER.size:
        raise ProtocolError(f"truncated message: {len(payload)} < {_HEADER.size} bytes")
    kind, guid, code, frame_len = _HEADER.unpack_from(payload)
    if kind not in MESSAGE_TYPES:
        raise ProtocolError(f"bad message type byte {kind}")
    interaction = chr(code)
    if kind != ERROR and interaction not in INTERACTIONS:
        raise ProtocolError(f"unknown interaction byte {code!r}")
    body = payload[_HEADER.size:]
    if len(body) != frame_len:
        raise ProtocolError(f"frame length {frame_len} does not match body of {len(body)} bytes")
    return NetworkMessage(interaction, guid, bytes(body), kind)


def peek_guid(payload: bytes) -> bytes | None:
    """Best-effort GUID extraction from a payload that failed to decode."""
    if len(payload) >= 1 + GUID_LEN:
        return bytes(payload[1:1 + GUID_LEN])
    return None


def frame_payload(payload: bytes) -> bytes:
    return _LENGTH.pack(len(payload)) + payload


def send_message(sock: socket.socket, m: NetworkMessage) -> None:
    sock.sendall(frame_payload(encode_message(m)))


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise ProtocolError("connection closed mid-message")
            return None
        buf += chunk
    return bytes(buf)


def recv_payload(sock: socket.socket) -> bytes | None:
    """Read one length-prefixed payload; None on clean end of stream."""
    head = _recv_exact(sock, _LENGTH.size)
    if head is None:
        return None
    (length,) = _LENGTH.unpack(head)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {length} bytes exceeds limit")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise ProtocolError("connection closed mid-message")
    return payload


def recv_message(sock: socket.socket) -> NetworkMessage | None:
    payload = recv_payload(sock)
    return None if payload is None else decode_message(payload)
