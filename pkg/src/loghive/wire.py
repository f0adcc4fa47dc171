"""Binary message codec: fixed header plus TLV extension headers.

Layout (all integers big-endian)::

    magic "LHP1"(4) | version(1) | msgType(1) | senderId(20) | receiverId(20)
    | messageId(8) | validity(8) | sigProto(1) | encProto(1) | extCount(1)
    | extCount x (extType(1) | extLen(2) | value)
    | payloadLen(4) | payload | sigLen(2) | signature

The signature trailer (sigLen + signature) is not part of the signed range.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import IntEnum

MAGIC = b"LHP1"
VERSION = 1

# magic, version, type, sender, receiver, messageId, validity, sigProto, encProto, extCount
_HEADER = struct.Struct("!4sBB20s20sQQBBB")
_EXT_HEAD = struct.Struct("!BH")
_U32 = struct.Struct("!I")
_U16 = struct.Struct("!H")

HEADER_SIZE = _HEADER.size  # 65
MIN_MESSAGE_SIZE = HEADER_SIZE + 4 + 2  # 71

MAX_EXT_LEN = 0xFFFF
MAX_EXTENSIONS = 0xFF
MAX_PAYLOAD = 0xFFFFFFFF
MAX_SIGNATURE = 0xFFFF
U64_MAX = (1 << 64) - 1

SIG_SHA256_RSA = 0
ENC_NONE = 0
ENC_AES128 = 1


class MsgType(IntEnum):
    CHALLENGE = 0
    CHALLENGE_RESPONSE = 1
    DH_OFFER = 2
    DH_ACCEPT = 3
    CLOCK_SYNC = 4
    REKEY_REQUEST = 5
    ACK = 6
    ERROR = 7
    ADM = 8
    AOM = 9
    LOG_BATCH = 16
    BATCH_SIGNATURE = 17
    CONTROL_COMMAND = 24


class Ext(IntEnum):
    """Extension header types used by this implementation."""

    CERT = 1        # sender certificate, DER
    EPOCH = 2       # u32 session-key generation the payload was encrypted under
    ORIGIN = 3      # originating device id (20) + origin message id (u64)
    ENDPOINT = 4    # "host:port" text, transport endpoint in an AOM
    SEQUENCE = 5    # u64 first line number of a LOG_BATCH chunk
    TTL = 6         # u32 session-key TTL in kilobits, announced in DH_OFFER
    FRAGMENT = 7    # u32 index + u32 count: one piece of a payload split across keys


class WireError(ValueError):
    """Base class for codec failures."""


class FramingError(WireError):
    pass


class IncompleteError(WireError):
    """The buffer ends before the message does; read more and retry."""

    def __init__(self, needed: int, have: int):
        super().__init__(f"incomplete message: need at least {needed} bytes, have {have}")
        self.needed = needed
        self.have = have


class UnsupportedVersionError(WireError):
    pass


class ValidationError(WireError):
    pass


def priority_band(code: int) -> int:
    return code // 8


def class_index(code: int) -> int:
    return code % 8


def make_type(band: int, klass: int) -> int:
    if not (0 <= band < 16 and 0 <= klass < 8):
        raise ValidationError("band must be 0..15 and class 0..7")
    return band * 8 + klass


@dataclass(frozen=True)
class WireMessage:
    msg_type: int
    sender_id: bytes
    receiver_id: bytes
    message_id: int
    validity: int
    sig_proto: int = SIG_SHA256_RSA
    enc_proto: int = ENC_NONE
    extensions: tuple[tuple[int, bytes], ...] = ()
    payload: bytes = b""
    signature: bytes = b""

    def ext(self, ext_type: int) -> bytes | None:
        for t, v in self.extensions:
            if t == ext_type:
                return v
        return None

    def with_signature(self, signature: bytes) -> "WireMessage":
        return replace(self, signature=signature)

    def validate(self) -> None:
        if not 0 <= self.msg_type < 128:
            raise ValidationError(f"msgType {self.msg_type} outside 0..127")
        for name in ("sender_id", "receiver_id"):
            v = getattr(self, name)
            if not isinstance(v, (bytes, bytearray)) or len(v) != 20:
                raise ValidationError(f"{name} must be 20 bytes")
        for name in ("message_id", "validity"):
            v = getattr(self, name)
            if not 0 <= v <= U64_MAX:
                raise ValidationError(f"{name} outside unsigned 64-bit range")
        for name in ("sig_proto", "enc_proto"):
            if not 0 <= getattr(self, name) <= 0xFF:
                raise ValidationError(f"{name} outside 0..255")
        if len(self.extensions) > MAX_EXTENSIONS:
            raise ValidationError("more than 255 extension headers")
        for t, v in self.extensions:
            if not 0 <= t <= 0xFF:
                raise ValidationError(f"extension type {t} outside 0..255")
            if len(v) > MAX_EXT_LEN:
                raise ValidationError(f"extension value of {len(v)} bytes exceeds 65535")
        if len(self.payload) > MAX_PAYLOAD:
            raise ValidationError("payload too large")
        if len(self.signature) > MAX_SIGNATURE:
            raise ValidationError("signature too large")


def encoded_length(m: WireMessage) -> int:
    return (
        MIN_MESSAGE_SIZE
        + sum(3 + len(v) for _, v in m.extensions)
        + len(m.payload)
        + len(m.signature)
    )


def signed_bytes(m: WireMessage) -> bytes:
    """The byte range covered by the message signature."""
    m.validate()
    parts = [
        _HEADER.pack(
            MAGIC, VERSION, m.msg_type, bytes(m.sender_id), bytes(m.receiver_id),
            m.message_id, m.validity, m.sig_proto, m.enc_proto, len(m.extensions),
        )
    ]
    for t, v in m.extensions:
        parts.append(_EXT_HEAD.pack(t, len(v)))
        parts.append(bytes(v))
    parts.append(_U32.pack(len(m.payload)))
    parts.append(bytes(m.payload))
    return b"".join(parts)


def encode_message(m: WireMessage) -> bytes:
    body = signed_bytes(m)
    return body + _U16.pack(len(m.signature)) + bytes(m.signature)


def _need(buf, pos: int, n: int) -> None:
    if len(buf) < pos + n:
        raise IncompleteError(pos + n, len(buf))


def decode_prefix(buf: bytes) -> tuple[WireMessage, int]:
    """Parse one message from the start of ``buf``; return it and its length."""
    if len(buf) >= 4 and bytes(buf[:4]) != MAGIC:
        raise FramingError(f"bad magic {bytes(buf[:4])!r}")
    if len(buf) < 4 and bytes(buf) != MAGIC[: len(buf)]:
        raise FramingError(f"bad magic {bytes(buf)!r}")
    if len(buf) >= 5 and buf[4] != VERSION:
        raise UnsupportedVersionError(f"unsupported version {buf[4]}")
    _need(buf, 0, HEADER_SIZE)
    (_, _, msg_type, sender, receiver, message_id, validity,
     sig_proto, enc_proto, ext_count) = _HEADER.unpack_from(buf, 0)
    if msg_type >= 128:
        raise FramingError(f"msgType {msg_type} outside 0..127")
    pos = HEADER_SIZE
    exts = []
    for _ in range(ext_count):
        _need(buf, pos, 3)
        t, n = _EXT_HEAD.unpack_from(buf, pos)
        pos += 3
        _need(buf, pos, n)
        exts.append((t, bytes(buf[pos:pos + n])))
        pos += n
    _need(buf, pos, 4)
    (plen,) = _U32.unpack_from(buf, pos)
    pos += 4
    _need(buf, pos, plen)
    payload = bytes(buf[pos:pos + plen])
    pos += plen
    _need(buf, pos, 2)
    (slen,) = _U16.unpack_from(buf, pos)
    pos += 2
    _need(buf, pos, slen)
    signature = bytes(buf[pos:pos + slen])
    pos += slen
    msg = WireMessage(
        msg_type=msg_type, sender_id=sender, receiver_id=receiver,
        message_id=message_id, validity=validity, sig_proto=sig_proto,
        enc_proto=enc_proto, extensions=tuple(exts), payload=payload,
        signature=signature,
    )
    return msg, pos


def decode_message(buf: bytes) -> WireMessage:
    """Parse exactly one message; trailing bytes are a framing error."""
    msg, n = decode_prefix(buf)
    if n != len(buf):
        raise FramingError(f"{len(buf) - n} trailing bytes after message")
    return msg


def read_message(read_exact) -> tuple[WireMessage, bytes]:
    """Read one message through ``read_exact(n) -> bytes``.

    Returns the message and its raw frame. ``read_exact`` must return exactly
    ``n`` bytes or raise (EOFError on a clean close).
    """
    parts = [read_exact(HEADER_SIZE)]
    head = parts[0]
    if head[:4] != MAGIC:
        raise FramingError(f"bad magic {head[:4]!r}")
    if head[4] != VERSION:
        raise UnsupportedVersionError(f"unsupported version {head[4]}")
    for _ in range(head[-1]):
        eh = read_exact(3)
        parts.append(eh)
        _, n = _EXT_HEAD.unpack(eh)
        if n:
            parts.append(read_exact(n))
    pl = read_exact(4)
    parts.append(pl)
    (plen,) = _U32.unpack(pl)
    if plen:
        parts.append(read_exact(plen))
    sl = read_exact(2)
    parts.append(sl)
    (slen,) = _U16.unpack(sl)
    if slen:
        parts.append(read_exact(slen))
    frame = b"".join(parts)
    return decode_message(frame), frame


def is_expired(m: WireMessage, now: float) -> bool:
    """True once ``now`` is past the validity timestamp (the boundary still accepts)."""
    return now > m.validity
