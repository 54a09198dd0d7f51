"""Minimal MQTT 3.1.1 codec: the QoS-0 subset this pipeline speaks.

Packets: CONNECT, CONNACK, PUBLISH (QoS 0), SUBSCRIBE, SUBACK, PINGREQ,
PINGRESP, DISCONNECT.  Anything else -- QoS > 0, retain/dup flags, wills,
credentials, wildcard topics, session persistence -- is rejected at decode
with an explicit :class:`ProtocolError` rather than silently accepted.

Decoding is incremental: :func:`decode_packet` returns ``None`` while the
buffer holds only a packet prefix, so callers can feed arbitrary chunk
boundaries through :class:`StreamDecoder`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Tuple, Union

MAX_REMAINING_LENGTH = 268_435_455  # 0xFF 0xFF 0xFF 0x7F

_TYPE_CONNECT = 1
_TYPE_CONNACK = 2
_TYPE_PUBLISH = 3
_TYPE_SUBSCRIBE = 8
_TYPE_SUBACK = 9
_TYPE_PINGREQ = 12
_TYPE_PINGRESP = 13
_TYPE_DISCONNECT = 14

_PROTO_HEADER = b"\x00\x04MQTT\x04"
_CONNECT_FLAGS_CLEAN = 0x02
_WILDCARDS = ("+", "#")


class ProtocolError(Exception):
    """Malformed or out-of-subset packet data."""


class MalformedLengthError(ProtocolError):
    """Remaining-length field is over-long or not minimally encoded."""


@dataclass(frozen=True)
class Connect:
    client_id: str
    keep_alive_s: int = 0


@dataclass(frozen=True)
class ConnAck:
    return_code: int = 0


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    topic: str


@dataclass(frozen=True)
class SubAck:
    packet_id: int
    granted_qos: int = 0


@dataclass(frozen=True)
class PingReq:
    pass


@dataclass(frozen=True)
class PingResp:
    pass


@dataclass(frozen=True)
class Disconnect:
    pass


Packet = Union[Connect, ConnAck, Publish, Subscribe, SubAck, PingReq, PingResp, Disconnect]


def encode_remaining_length(n: int) -> bytes:
    """Base-128 varint, low groups first, minimal encoding, at most 4 bytes."""
    if not (0 <= n <= MAX_REMAINING_LENGTH):
        raise ValueError(f"remaining length {n} outside 0..{MAX_REMAINING_LENGTH}")
    out = bytearray()
    while True:
        n, digit = divmod(n, 128)
        out.append(digit | (0x80 if n else 0))
        if not n:
            return bytes(out)


def decode_remaining_length(buf: bytes) -> Optional[Tuple[int, int]]:
    """Decode a varint prefix of ``buf``.

    Returns ``(value, bytes_consumed)``, or ``None`` if the buffer ends
    mid-varint.  Raises :class:`MalformedLengthError` for a fourth
    continuation bit or a non-minimal encoding (trailing 0x00 group).
    """
    value = 0
    for i in range(4):
        if i >= len(buf):
            return None
        byte = buf[i]
        value |= (byte & 0x7F) << (7 * i)
        if not byte & 0x80:
            if i > 0 and byte == 0:
                raise MalformedLengthError("non-minimal remaining-length encoding")
            return value, i + 1
    raise MalformedLengthError("remaining-length continuation past 4 bytes")


def _utf8_field(text: str) -> bytes:
    data = text.encode("utf-8")
    if len(data) > 0xFFFF:
        raise ValueError("string field exceeds 65535 bytes")
    return struct.pack(">H", len(data)) + data


def _check_topic(topic: str) -> str:
    if not topic:
        raise ValueError("topic must be non-empty")
    if any(w in topic for w in _WILDCARDS) or "\x00" in topic:
        raise ValueError(f"topic {topic!r} contains forbidden characters")
    return topic


def encode_packet(packet: Packet) -> bytes:
    """Serialize a packet; raises ValueError for arguments outside the subset."""
    if isinstance(packet, Connect):
        if not packet.client_id:
            raise ValueError("client_id must be non-empty")
        if not (0 <= packet.keep_alive_s <= 0xFFFF):
            raise ValueError("keep_alive_s outside 0..65535")
        body = (
            _PROTO_HEADER
            + bytes([_CONNECT_FLAGS_CLEAN])
            + struct.pack(">H", packet.keep_alive_s)
            + _utf8_field(packet.client_id)
        )
        return _frame(_TYPE_CONNECT << 4, body)
    if isinstance(packet, ConnAck):
        if not (0 <= packet.return_code <= 5):
            raise ValueError("connack return code outside 0..5")
        return _frame(_TYPE_CONNACK << 4, bytes([0, packet.return_code]))
    if isinstance(packet, Publish):
        _check_topic(packet.topic)
        return _frame(_TYPE_PUBLISH << 4, _utf8_field(packet.topic) + bytes(packet.payload))
    if isinstance(packet, Subscribe):
        if not (1 <= packet.packet_id <= 0xFFFF):
            raise ValueError("packet_id outside 1..65535")
        _check_topic(packet.topic)
        body = struct.pack(">H", packet.packet_id) + _utf8_field(packet.topic) + b"\x00"
        return _frame((_TYPE_SUBSCRIBE << 4) | 0x2, body)
    if isinstance(packet, SubAck):
        if not (1 <= packet.packet_id <= 0xFFFF):
            raise ValueError("packet_id outside 1..65535")
        if packet.granted_qos != 0:
            raise ValueError("only QoS 0 grants are supported")
        return _frame(_TYPE_SUBACK << 4, struct.pack(">H", packet.packet_id) + b"\x00")
    if isinstance(packet, PingReq):
        return _frame(_TYPE_PINGREQ << 4, b"")
    if isinstance(packet, PingResp):
        return _frame(_TYPE_PINGRESP << 4, b"")
    if isinstance(packet, Disconnect):
        return _frame(_TYPE_DISCONNECT << 4, b"")
    raise ValueError(f"cannot encode {type(packet).__name__}")


def _frame(first_byte: int, body: bytes) -> bytes:
    return bytes([first_byte]) + encode_remaining_length(len(body)) + body


def decode_packet(buf) -> Optional[Tuple[Packet, int]]:
    """Decode one packet from the front of ``buf``.

    Returns ``(packet, bytes_consumed)`` or ``None`` when more bytes are
    needed.  Raises :class:`ProtocolError` on malformed or out-of-subset
    input; decoding never consumes bytes on failure or short input.
    """
    buf = bytes(buf)
    if len(buf) < 2:
        return None
    ptype, flags = buf[0] >> 4, buf[0] & 0x0F
    decoded = decode_remaining_length(buf[1:])
    if decoded is None:
        return None
    remaining, len_bytes = decoded
    total = 1 + len_bytes + remaining
    if len(buf) < total:
        return None
    body = buf[1 + len_bytes:total]

    if ptype == _TYPE_PUBLISH:
        if flags & 0x08:
            raise ProtocolError("dup flag unsupported")
        if flags & 0x06:
            raise ProtocolError(f"QoS {(flags >> 1) & 0x3} unsupported, QoS 0 only")
        if flags & 0x01:
            raise ProtocolError("retain flag unsupported")
        return _decode_publish(body), total
    if ptype == _TYPE_SUBSCRIBE:
        if flags != 0x2:
            raise ProtocolError("SUBSCRIBE requires fixed-header flags 0010")
        return _decode_subscribe(body), total
    if flags != 0:
        raise ProtocolError(f"reserved flags must be 0 for packet type {ptype}")
    if ptype == _TYPE_CONNECT:
        return _decode_connect(body), total
    if ptype == _TYPE_CONNACK:
        if len(body) != 2:
            raise ProtocolError("CONNACK body must be 2 bytes")
        if body[0] & ~0x01:
            raise ProtocolError("bad CONNACK ack-flags byte")
        if body[1] > 5:
            raise ProtocolError(f"unknown CONNACK return code {body[1]}")
        return ConnAck(return_code=body[1]), total
    if ptype == _TYPE_SUBACK:
        if len(body) != 3:
            raise ProtocolError("SUBACK body must be 3 bytes")
        packet_id = struct.unpack(">H", body[:2])[0]
        if body[2] == 0x80:
            raise ProtocolError("broker refused subscription")
        if body[2] != 0:
            raise ProtocolError(f"granted QoS {body[2]} unsupported")
        return SubAck(packet_id=packet_id), total
    if ptype in (_TYPE_PINGREQ, _TYPE_PINGRESP, _TYPE_DISCONNECT):
        if body:
            raise ProtocolError("unexpected body on control packet")
        cls = {_TYPE_PINGREQ: PingReq, _TYPE_PINGRESP: PingResp, _TYPE_DISCONNECT: Disconnect}
        return cls[ptype](), total
    raise ProtocolError(f"unsupported packet type {ptype}")


def _take_utf8(body: bytes, what: str) -> Tuple[str, bytes]:
    if len(body) < 2:
        raise ProtocolError(f"truncated {what} length")
    n = struct.unpack(">H", body[:2])[0]
    if len(body) < 2 + n:
        raise ProtocolError(f"truncated {what}")
    try:
        text = body[2:2 + n].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"invalid UTF-8 in {what}") from exc
    return text, body[2 + n:]


def _decode_connect(body: bytes) -> Connect:
    if len(body) < 10:
        raise ProtocolError("CONNECT variable header truncated")
    if body[:7] != _PROTO_HEADER:
        raise ProtocolError("unsupported protocol name/level (want MQTT 3.1.1)")
    connect_flags = body[7]
    if connect_flags != _CONNECT_FLAGS_CLEAN:
        raise ProtocolError(
            "only clean-session CONNECT without will/credentials is supported"
        )
    keep_alive = struct.unpack(">H", body[8:10])[0]
    client_id, rest = _take_utf8(body[10:], "client id")
    if rest:
        raise ProtocolError("trailing bytes after CONNECT client id")
    if not client_id:
        raise ProtocolError("empty client id")
    return Connect(client_id=client_id, keep_alive_s=keep_alive)


def _decode_publish(body: bytes) -> Publish:
    topic, payload = _take_utf8(body, "topic")
    try:
        _check_topic(topic)
    except ValueError as exc:
        raise ProtocolError(str(exc)) from None
    return Publish(topic=topic, payload=payload)


def _decode_subscribe(body: bytes) -> Subscribe:
    if len(body) < 2:
        raise ProtocolError("SUBSCRIBE packet id truncated")
    packet_id = struct.unpack(">H", body[:2])[0]
    if packet_id == 0:
        raise ProtocolError("SUBSCRIBE packet id must be non-zero")
    topic, rest = _take_utf8(body[2:], "topic filter")
    if len(rest) != 1:
        raise ProtocolError("exactly one single-topic subscription is supported")
    if rest[0] != 0:
        raise ProtocolError(f"requested QoS {rest[0]} unsupported, QoS 0 only")
    try:
        _check_topic(topic)
    except ValueError as exc:
        raise ProtocolError(str(exc)) from None
    return Subscribe(packet_id=packet_id, topic=topic)


class StreamDecoder:
    """Accumulates a byte stream and yields complete packets as they arrive."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes):
        """Append ``data`` and return all packets completed by it."""
        self._buf.extend(data)
        packets = []
        while True:
            result = decode_packet(self._buf)
            if result is None:
                return packets
            packet, consumed = result
            del self._buf[:consumed]
            packets.append(packet)

    @property
    def pending(self) -> int:
        """Bytes buffered but not yet decodable as a complete packet."""
        return len(self._buf)
