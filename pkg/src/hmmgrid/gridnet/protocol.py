"""Framed wire protocol.

    frame = "VSG1" | version u8 | msg_type u8 | payload_len u64 (big-endian) | payload

CHUNK and RESULT_CHUNK payloads are encrypted chunk records; every other
message carries a UTF-8 JSON object.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Any

from ..chunks import EncryptedChunk
from ..errors import (
    BadMagic,
    BadVersion,
    MalformedPayload,
    OversizeFrame,
    ProtocolError,
    TruncatedFrame,
    UnknownMessageType,
)

MAGIC = b"VSG1"
VERSION = 1
MAX_PAYLOAD = 256 * 1024 * 1024
_PREFIX = struct.Struct(">4sBBQ")
PREFIX_LEN = _PREFIX.size


class MsgType(IntEnum):
    HELLO = 0x01
    JOB_HEADER = 0x02
    CHUNK = 0x03
    JOB_END = 0x04
    RESULT_HEADER = 0x05
    RESULT_CHUNK = 0x06
    RESULT_END = 0x07
    ERROR = 0x7F


CHUNK_TYPES = (MsgType.CHUNK, MsgType.RESULT_CHUNK)


@dataclass(frozen=True, eq=False)
class Message:
    msg_type: MsgType
    body: Any = None

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        return self.msg_type == other.msg_type and self.body == other.body

    @classmethod
    def hello(cls, **extra) -> "Message":
        return cls(MsgType.HELLO, {"version": VERSION, **extra})

    @classmethod
    def error(cls, code: str, message: str = "") -> "Message":
        return cls(MsgType.ERROR, {"code": code, "message": message})


def _payload(msg: Message) -> bytes:
    if msg.msg_type in CHUNK_TYPES:
        if not isinstance(msg.body, EncryptedChunk):
            raise MalformedPayload(f"{msg.msg_type.name} needs an EncryptedChunk body")
        return msg.body.to_bytes()
    if not isinstance(msg.body, dict):
        raise MalformedPayload(f"{msg.msg_type.name} needs a JSON object body")
    return json.dumps(msg.body, sort_keys=True, separators=(",", ":")).encode()


def frame_encode(msg: Message) -> bytes:
    payload = _payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise OversizeFrame(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return _PREFIX.pack(MAGIC, VERSION, int(msg.msg_type), len(payload)) + payload


def parse_prefix(prefix: bytes) -> tuple[MsgType, int]:
    """Validate the fixed 14-byte frame prefix; returns (type, payload length)."""
    if len(prefix) < PREFIX_LEN:
        raise TruncatedFrame(f"frame prefix has {len(prefix)} of {PREFIX_LEN} bytes")
    magic, version, mtype, length = _PREFIX.unpack_from(prefix)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported protocol version {version}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise UnknownMessageType(f"unknown msg_type 0x{mtype:02x}") from None
    if length > MAX_PAYLOAD:
        raise OversizeFrame(f"declared payload {length} exceeds {MAX_PAYLOAD}")
    return mtype, length


def decode_payload(mtype: MsgType, payload: bytes) -> Message:
    if mtype in CHUNK_TYPES:
        return Message(mtype, EncryptedChunk.from_bytes(payload))
    try:
        body = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedPayload(f"{mtype.name} payload is not JSON: {exc}") from None
    if not isinstance(body, dict):
        raise MalformedPayload(f"{mtype.name} payload must be a JSON object")
    return Message(mtype, body)


def frame_decode_prefix(buf: bytes) -> tuple[Message, int]:
    """Decode the first frame of ``buf``; returns ``(message, bytes consumed)``."""
    mtype, length = parse_prefix(bytes(buf[:PREFIX_LEN]))
    end = PREFIX_LEN + length
    if len(buf) < end:
        raise TruncatedFrame(f"frame needs {end} bytes, have {len(buf)}")
    return decode_payload(mtype, bytes(buf[PREFIX_LEN:end])), end


def frame_decode(buf: bytes) -> Message:
    msg, used = frame_decode_prefix(buf)
    if used != len(buf):
        raise ProtocolError(f"{len(buf) - used} trailing bytes after frame")
    return msg


def read_frame(channel) -> Message | None:
    """Read one frame from a channel; ``None`` on a clean end of stream."""
    prefix = channel.recv_exact(PREFIX_LEN, allow_eof=True)
    if prefix is None:
        return None
    mtype, length = parse_prefix(prefix)
    payload = channel.recv_exact(length) if length else b""
    return decode_payload(mtype, payload)


def write_frame(channel, msg: Message) -> None:
    channel.send(frame_encode(msg))


def require(body: dict, key: str, kind, where: str = "payload"):
    """Fetch a typed field from a JSON body or raise a payload error."""
    try:
        value = body[key]
    except (KeyError, TypeError):
        raise MalformedPayload(f"{where} lacks field {key!r}") from None
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise MalformedPayload(f"{where} field {key!r} has wrong type")
    return value
