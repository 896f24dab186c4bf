"""Framed binary protocol for parameter exchange.

Frame layout, all integers little-endian::

    magic "UFPA" | version u16 | msg_type u8 | payload_len u32 | payload | crc32(payload) u32

UPDATE payloads (and GLOBAL, which reuses the layout) carry::

    client_id (u16 len + utf8) | round u32 | weight f64 | val_metric f64 | mask u8
    | block count u32 | per block: name (u16 len + utf8), rank u8, dims u32 x rank, f32 data

HELLO carries the requested client id (u16 len + utf8, may be empty). ERROR
carries a u16 code and a utf8 reason. ROUND_CONFIG and DONE carry a UTF-8
JSON document.

Two carriers move frames: in-process queues (:func:`loopback_pair`) and TCP
sockets (:func:`serve` / :func:`connect`). Both go through the same
:class:`Channel` interface, so the server and client session logic is shared.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import queue
import socket
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ClientFailure, IncompleteFrame, ProtocolError
from .schema import SCALAR_BYTES, WIRE_DTYPE, ModelSchema, ParameterSet, bits_to_mask, mask_to_bits

log = logging.getLogger(__name__)

MAGIC = b"UFPA"
VERSION = 1
HEADER = struct.Struct("<4sHBI")
TRAILER = struct.Struct("<I")
FRAME_OVERHEAD = HEADER.size + TRAILER.size
MAX_PAYLOAD = 1 << 31


class MsgType(enum.IntEnum):
    HELLO = 1
    ROUND_CONFIG = 2
    UPDATE = 3
    GLOBAL = 4
    DONE = 5
    ERROR = 6


class ErrorCode(enum.IntEnum):
    OUT_OF_ORDER = 1
    VERSION = 2
    MALFORMED = 3
    CLIENT_FAILURE = 4
    REJECTED = 5


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    payload: bytes = b""
    version: int = VERSION


def encode(msg: WireMessage) -> bytes:
    payload = bytes(msg.payload)
    if len(payload) >= MAX_PAYLOAD:
        raise ProtocolError("length", f"payload of {len(payload)} bytes exceeds limit")
    return b"".join((
        HEADER.pack(MAGIC, msg.version, int(msg.msg_type), len(payload)),
        payload,
        TRAILER.pack(zlib.crc32(payload)),
    ))


def decode_prefix(buf, offset=0):
    """Decode one frame starting at ``offset``; return ``(message, bytes consumed)``.

    Raises :class:`IncompleteFrame` when ``buf`` ends early (feed more and
    retry), or :class:`ProtocolError` naming the failed check.
    """
    view = memoryview(buf)[offset:]
    if len(view) < HEADER.size:
        raise IncompleteFrame(HEADER.size - len(view))
    magic, version, msg_type, length = HEADER.unpack_from(view)
    if magic != MAGIC:
        raise ProtocolError("magic", f"got {bytes(magic)!r}")
    if version != VERSION:
        raise ProtocolError("version", f"got {version}, speak {VERSION}")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise ProtocolError("msg_type", f"unknown type {msg_type}") from None
    if length >= MAX_PAYLOAD:
        raise ProtocolError("length", f"declared payload of {length} bytes exceeds limit")
    total = HEADER.size + length + TRAILER.size
    if len(view) < total:
        raise IncompleteFrame(total - len(view))
    payload = bytes(view[HEADER.size: HEADER.size + length])
    (crc,) = TRAILER.unpack_from(view, HEADER.size + length)
    if crc != zlib.crc32(payload):
        raise ProtocolError("crc", f"expected {crc:#010x}, computed {zlib.crc32(payload):#010x}")
    return WireMessage(kind, payload, version), total


def decode(buf) -> WireMessage:
    msg, used = decode_prefix(buf)
    if used != len(buf):
        raise ProtocolError("length", f"{len(buf) - used} trailing bytes after frame")
    return msg


class FrameReader:
    """Accumulates stream bytes and yields complete frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data) -> list:
        self._buf += data
        out, pos = [], 0
        while True:
            try:
                msg, used = decode_prefix(self._buf, pos)
            except IncompleteFrame:
                break
            out.append(msg)
            pos += used
        del self._buf[:pos]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


# Payload codecs ----------------------------------------------------------------

class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if n < 0 or self.pos + n > len(self.buf):
            raise ProtocolError("payload", f"field of {n} bytes overruns payload at offset {self.pos}")
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self):
        (n,) = self.unpack("<H")
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("payload", f"invalid utf-8: {exc}") from None

    def done(self):
        if self.pos != len(self.buf):
            raise ProtocolError("payload", f"{len(self.buf) - self.pos} unread payload bytes")


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError("payload", "string field longer than 65535 bytes")
    return struct.pack("<H", len(raw)) + raw


@dataclass(frozen=True)
class UpdatePayload:
    client_id: str
    round_idx: int
    weight: float
    val_metric: float
    mask: frozenset
    params: ParameterSet

    @property
    def scalars(self) -> int:
        return self.params.size

    @property
    def tensor_bytes(self) -> int:
        return SCALAR_BYTES * self.params.size


def encode_update(p: UpdatePayload) -> bytes:
    blocks = p.params.schema.masked_blocks(p.mask)
    parts = [
        _pack_str(p.client_id),
        struct.pack("<IddBI", p.round_idx, float(p.weight), float(p.val_metric), mask_to_bits(p.mask), len(blocks)),
    ]
    for spec in blocks:
        arr = p.params[spec.name]
        parts.append(_pack_str(spec.name))
        parts.append(struct.pack(f"<B{len(spec.shape)}I", len(spec.shape), *spec.shape))
        parts.append(arr.astype(WIRE_DTYPE, copy=False).tobytes())
    return b"".join(parts)


def decode_update(payload, schema: ModelSchema) -> UpdatePayload:
    """Parse an UPDATE/GLOBAL payload and check it against ``schema``."""
    r = _Reader(payload)
    client_id = r.string()
    round_idx, weight, val_metric, bits, n_blocks = r.unpack("<IddBI")
    try:
        mask = bits_to_mask(bits)
        expected = schema.masked_blocks(mask)
    except Exception as exc:
        raise ProtocolError("mask", str(exc)) from None
    if n_blocks != len(expected):
        raise ProtocolError("blocks", f"mask needs {len(expected)} blocks, payload has {n_blocks}")
    blocks = {}
    for spec in expected:
        name = r.string()
        if name != spec.name:
            raise ProtocolError("blocks", f"expected block {spec.name!r}, got {name!r}")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        if tuple(dims) != spec.shape:
            raise ProtocolError("blocks", f"block {name!r} has dims {dims}, schema says {spec.shape}")
        raw = r.take(spec.size * SCALAR_BYTES)
        blocks[name] = np.frombuffer(raw, WIRE_DTYPE).astype(np.float32).reshape(spec.shape)
    r.done()
    return UpdatePayload(client_id, round_idx, weight, val_metric, mask, ParameterSet(schema, blocks, copy=False))


def update_payload_size(schema: ModelSchema, mask, client_id: str) -> int:
    """Byte length of an UPDATE payload; a function of schema, mask and id only."""
    size = 2 + len(client_id.encode("utf-8")) + struct.calcsize("<IddBI")
    for spec in schema.masked_blocks(mask):
        size += 2 + len(spec.name.encode("utf-8")) + 1 + 4 * len(spec.shape) + SCALAR_BYTES * spec.size
    return size


def hello_message(client_id="") -> WireMessage:
    return WireMessage(MsgType.HELLO, _pack_str(client_id))


def parse_hello(msg: WireMessage) -> str:
    r = _Reader(msg.payload)
    cid = r.string()
    r.done()
    return cid


def error_message(code, reason="") -> WireMessage:
    return WireMessage(MsgType.ERROR, struct.pack("<H", int(code)) + reason.encode("utf-8"))


def parse_error(msg: WireMessage):
    if len(msg.payload) < 2:
        raise ProtocolError("payload", "ERROR payload shorter than its code field")
    (code,) = struct.unpack_from("<H", msg.payload)
    return code, bytes(msg.payload[2:]).decode("utf-8", errors="replace")


def json_message(kind: MsgType, doc) -> WireMessage:
    return WireMessage(kind, json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def parse_json(msg: WireMessage):
    try:
        return json.loads(msg.payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError("payload", f"bad JSON document: {exc}") from None


# Channels --------------------------------------------------------------------------

class Channel:
    """Bidirectional frame pipe with byte counters and optional transcripts."""

    def __init__(self, record=False):
        self.record = record
        self.sent_log = bytearray()
        self.recv_log = bytearray()
        self.bytes_sent = 0
        self.bytes_received = 0
        self._reader = FrameReader()
        self._ready = []

    def send(self, msg: WireMessage) -> int:
        data = encode(msg)
        self._write(data)
        self.bytes_sent += len(data)
        if self.record:
            self.sent_log += data
        return len(data)

    def recv(self, timeout=None) -> WireMessage:
        """Next frame. Raises :class:`TimeoutError` or :class:`ConnectionError`."""
        while not self._ready:
            chunk = self._read(timeout)
            if self.record:
                self.recv_log += chunk
            self.bytes_received += len(chunk)
            self._ready.extend(self._reader.feed(chunk))
        return self._ready.pop(0)

    def close(self):
        pass

    def _write(self, data):
        raise NotImplementedError

    def _read(self, timeout):
        raise NotImplementedError


_CLOSED = object()


class LoopbackChannel(Channel):
    def __init__(self, inbox, outbox, record=False):
        super().__init__(record)
        self._inbox, self._outbox = inbox, outbox

    def _write(self, data):
        self._outbox.put(data)

    def _read(self, timeout):
        try:
            chunk = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("loopback receive timed out") from None
        if chunk is _CLOSED:
            self._inbox.put(_CLOSED)
            raise ConnectionError("loopback peer closed")
        return chunk

    def close(self):
        self._outbox.put(_CLOSED)


def loopback_pair(record=False):
    """Two connected in-process channels: ``(server_side, client_side)``."""
    a, b = queue.Queue(), queue.Queue()
    return LoopbackChannel(a, b, record), LoopbackChannel(b, a, record)


class SocketChannel(Channel):
    def __init__(self, sock: socket.socket, record=False):
        super().__init__(record)
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _write(self, data):
        self.sock.settimeout(None)
        self.sock.sendall(data)

    def _read(self, timeout):
        self.sock.settimeout(timeout)
        try:
            chunk = self.sock.recv(1 << 20)
        except socket.timeout:
            raise TimeoutError("socket receive timed out") from None
        if not chunk:
            raise ConnectionError("peer closed the connection")
        return chunk

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_address(text: str):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like HOST:PORT, got {text!r}")
    return host, int(port)


# Sessions ----------------------------------------------------------------------------

class SessionState(enum.Enum):
    AWAIT_HELLO = "await_hello"
    HELLO = "hello"
    ROUNDS = "rounds"
    DONE = "done"
    CLOSED = "closed"


@dataclass
class TrafficStats:
    upload_wire_bytes: int = 0
    upload_tensor_bytes: int = 0
    down_wire_bytes: int = 0
    down_tensor_bytes: int = 0


class ServerSession:
    """Server side of one client connection.

    Enforces HELLO -> ROUND_CONFIG -> (UPDATE/GLOBAL)* -> DONE. Anything
    out of order gets an ERROR reply and closes the session.
    """

    def __init__(self, channel: Channel, schema: ModelSchema):
        self.channel = channel
        self.schema = schema
        self.state = SessionState.AWAIT_HELLO
        self.client_id = None
        self.stats = TrafficStats()

    def _reject(self, code, reason, check="order"):
        try:
            self.channel.send(error_message(code, reason))
        except OSError:
            pass
        self.close()
        raise ProtocolError(check, reason)

    def _recv(self, timeout=None) -> WireMessage:
        try:
            return self.channel.recv(timeout)
        except ProtocolError as exc:
            code = ErrorCode.VERSION if exc.check == "version" else ErrorCode.MALFORMED
            self._reject(code, str(exc), exc.check)

    def accept_hello(self, timeout=None) -> str:
        msg = self._recv(timeout)
        if msg.msg_type is not MsgType.HELLO:
            self._reject(ErrorCode.OUT_OF_ORDER, f"expected HELLO, got {msg.msg_type.name}")
        self.state = SessionState.HELLO
        return parse_hello(msg)

    def send_config(self, client_id: str, doc: dict):
        if self.state is not SessionState.HELLO:
            raise ProtocolError("order", f"cannot send ROUND_CONFIG in state {self.state.value}")
        self.client_id = client_id
        self.channel.send(json_message(MsgType.ROUND_CONFIG, dict(doc, client_id=client_id)))
        self.state = SessionState.ROUNDS

    def recv_update(self, round_idx: int, timeout=None) -> UpdatePayload:
        """Next UPDATE for ``round_idx``; stale rounds are discarded.

        A client-reported failure raises :class:`ClientFailure`.
        """
        if self.state is not SessionState.ROUNDS:
            raise ProtocolError("order", f"cannot receive UPDATE in state {self.state.value}")
        while True:
            msg = self._recv(timeout)
            if msg.msg_type is MsgType.ERROR:
                code, reason = parse_error(msg)
                if code == ErrorCode.CLIENT_FAILURE:
                    raise ClientFailure(self.client_id, round_idx, reason)
                self.close()
                raise ProtocolError("peer", f"client {self.client_id} sent ERROR {code}: {reason}")
            if msg.msg_type is not MsgType.UPDATE:
                self._reject(ErrorCode.OUT_OF_ORDER, f"expected UPDATE, got {msg.msg_type.name}")
            try:
                update = decode_update(msg.payload, self.schema)
            except ProtocolError as exc:
                self._reject(ErrorCode.MALFORMED, str(exc), exc.check)
            if update.client_id != self.client_id:
                self._reject(ErrorCode.REJECTED, f"UPDATE names client {update.client_id!r}")
            if update.round_idx < round_idx:
                log.warning("discarding stale round-%d update from %s", update.round_idx, self.client_id)
                continue
            if update.round_idx != round_idx:
                self._reject(ErrorCode.OUT_OF_ORDER, f"UPDATE for round {update.round_idx}, expected {round_idx}")
            self.stats.upload_wire_bytes += len(msg.payload) + FRAME_OVERHEAD
            self.stats.upload_tensor_bytes += update.tensor_bytes
            return update

    def send_global(self, payload: UpdatePayload) -> int:
        if self.state is not SessionState.ROUNDS:
            raise ProtocolError("order", f"cannot send GLOBAL in state {self.state.value}")
        n = self.channel.send(WireMessage(MsgType.GLOBAL, encode_update(payload)))
        self.stats.down_wire_bytes += n
        self.stats.down_tensor_bytes += payload.tensor_bytes
        return n

    def finish(self, doc: dict, timeout=None) -> dict:
        """Send DONE and return the client's closing DONE document."""
        self.channel.send(json_message(MsgType.DONE, doc))
        self.state = SessionState.DONE
        while True:
            msg = self._recv(timeout)
            if msg.msg_type is MsgType.DONE:
                return parse_json(msg)
            if msg.msg_type is MsgType.UPDATE:
                continue  # late update from a round that already timed out
            self._reject(ErrorCode.OUT_OF_ORDER, f"expected DONE, got {msg.msg_type.name}")

    def close(self):
        if self.state is not SessionState.CLOSED:
            self.state = SessionState.CLOSED
            self.channel.close()


class ClientSession:
    """Client side of the protocol; mirrors :class:`ServerSession`."""

    def __init__(self, channel: Channel, schema: ModelSchema = None):
        self.channel = channel
        self.schema = schema
        self.state = SessionState.AWAIT_HELLO

    def _expect(self, kind: MsgType, timeout=None) -> WireMessage:
        msg = self.channel.recv(timeout)
        if msg.msg_type is MsgType.ERROR:
            code, reason = parse_error(msg)
            self.close()
            raise ProtocolError("peer", f"server sent ERROR {code}: {reason}")
        if msg.msg_type is not kind:
            self.channel.send(error_message(ErrorCode.OUT_OF_ORDER, f"expected {kind.name}, got {msg.msg_type.name}"))
            self.close()
            raise ProtocolError("order", f"expected {kind.name}, got {msg.msg_type.name}")
        return msg

    def hello(self, client_id="", timeout=None) -> dict:
        self.channel.send(hello_message(client_id))
        self.state = SessionState.HELLO
        doc = parse_json(self._expect(MsgType.ROUND_CONFIG, timeout))
        self.state = SessionState.ROUNDS
        return doc

    def send_update(self, payload: UpdatePayload):
        self.channel.send(WireMessage(MsgType.UPDATE, encode_update(payload)))

    def send_failure(self, reason: str):
        self.channel.send(error_message(ErrorCode.CLIENT_FAILURE, reason))

    def recv_global(self, timeout=None) -> UpdatePayload:
        return decode_update(self._expect(MsgType.GLOBAL, timeout).payload, self.schema)

    def recv_done(self, timeout=None) -> dict:
        doc = parse_json(self._expect(MsgType.DONE, timeout))
        self.state = SessionState.DONE
        return doc

    def send_done(self, doc: dict):
        self.channel.send(json_message(MsgType.DONE, doc))

    def close(self):
        if self.state is not SessionState.CLOSED:
            self.state = SessionState.CLOSED
            self.channel.close()


# Socket server ------------------------------------------------------------------------

@dataclass
class SocketServer:
    sock: socket.socket
    record: bool = False
    rejected: list = field(default_factory=list)

    @property
    def address(self) -> str:
        host, port = self.sock.getsockname()[:2]
        return f"{host}:{port}"

    def accept(self, schema: ModelSchema, timeout=None):
        """Accept one connection and read its HELLO. Returns ``(session, requested id)``.

        Connections that open with anything but a valid HELLO are answered
        with ERROR, recorded in :attr:`rejected` and skipped.
        """
        while True:
            self.sock.settimeout(timeout)
            try:
                conn, peer = self.sock.accept()
            except socket.timeout:
                raise TimeoutError("no client connected in time") from None
            session = ServerSession(SocketChannel(conn, self.record), schema)
            try:
                requested = session.accept_hello(timeout)
            except (ProtocolError, ConnectionError, TimeoutError) as exc:
                log.warning("rejected session from %s: %s", peer, exc)
                self.rejected.append(str(exc))
                session.close()
                continue
            return session, requested

    def close(self):
        self.sock.close()


def serve(bind: str, backlog=16, record=False) -> SocketServer:
    host, port = parse_address(bind)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen(backlog)
    return SocketServer(sock, record)


def connect(address: str, schema: ModelSchema = None, timeout=10.0, record=False) -> ClientSession:
    host, port = parse_address(address)
    sock = socket.create_connection((host, port), timeout=timeout)
    return ClientSession(SocketChannel(sock, record), schema)


def frame_overhead_ratio(schema: ModelSchema, mask, client_id="client0") -> float:
    """Header and metadata bytes per UPDATE frame relative to its tensor bytes."""
    tensor = SCALAR_BYTES * schema.masked_size(mask)
    total = update_payload_size(schema, mask, client_id) + FRAME_OVERHEAD
    return (total - tensor) / tensor if tensor else math.inf
