#!/usr/bin/env python3
"""
Messaging layer for peerbed agents.

Every agent owns one inbound and one outbound bounded queue. Envelopes travel
as length-prefixed frames; the SIM backend hands them over in memory through
the runtime engine, the LIVE backend pushes them over one long-lived TCP
connection per directed pair and pulls them from a single listening socket.
"""

import logging
import select
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, ClassVar, Optional

from peerbed_errors import AddressError, BackpressureError, FrameError

logger = logging.getLogger(__name__)

MAX_BODY_BYTES = 16 * 1024 * 1024
DEFAULT_QUEUE_CAPACITY = 10000

_LENGTH = struct.Struct("!I")
_HEAD = struct.Struct("!HQ")
_ADDR_LEN = struct.Struct("!H")


class DropPolicy(Enum):
    BLOCK_SENDER = "block_sender"
    DROP_NEWEST = "drop_newest"


class SendStatus(Enum):
    QUEUED = "queued"
    DELIVERED = "delivered"
    DROPPED = "dropped"
    FAILED = "failed"


@dataclass(frozen=True)
class NetworkAddress:
    """host:port of a live peer, or sim:<peer id> for a simulated one"""

    SIM_HOST: ClassVar[str] = "sim"

    host: str
    port: int

    def __post_init__(self):
        if not self.host or ":" in self.host:
            raise AddressError(f"invalid host {self.host!r}")
        if self.port < 0:
            raise AddressError(f"negative port {self.port}")
        if self.host != self.SIM_HOST and self.port > 0xFFFF:
            raise AddressError(f"port {self.port} out of range")

    @classmethod
    def for_peer(cls, peer_id: int) -> "NetworkAddress":
        return cls(cls.SIM_HOST, peer_id)

    @classmethod
    def parse(cls, text: str) -> "NetworkAddress":
        host, sep, port = text.rpartition(":")
        if not sep or not host or not port.isdigit():
            raise AddressError(f"cannot parse address {text!r}")
        return cls(host, int(port))

    @property
    def is_simulated(self) -> bool:
        return self.host == self.SIM_HOST

    def __str__(self):
        return f"{self.host}:{self.port}"


@dataclass(frozen=True)
class Envelope:
    msg_type: int
    sender: str
    recipient: str
    seq: int
    body: bytes = b""


@dataclass(frozen=True)
class QueueStats:
    in_len: int
    out_len: int
    dropped_count: int


@dataclass
class SendReceipt:
    envelope: Envelope
    status: SendStatus = SendStatus.QUEUED
    _settled: threading.Event = field(default_factory=threading.Event, repr=False, compare=False)

    def settle(self, status: SendStatus):
        self.status = status
        self._settled.set()

    def wait(self, timeout: Optional[float] = None) -> SendStatus:
        """Block until the transport decided the fate of this envelope"""
        self._settled.wait(timeout)
        return self.status

    @property
    def dropped(self) -> bool:
        return self.status is SendStatus.DROPPED

    @property
    def failed(self) -> bool:
        return self.status is SendStatus.FAILED


def _encode_address(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FrameError("address longer than 65535 bytes")
    return _ADDR_LEN.pack(len(raw)) + raw


def encode_frame(env: Envelope) -> bytes:
    if len(env.body) > MAX_BODY_BYTES:
        raise FrameError(f"body of {len(env.body)} bytes exceeds 16 MiB")
    if not 0 <= env.msg_type <= 0xFFFF:
        raise FrameError(f"msg_type {env.msg_type} out of range")
    if not 0 <= env.seq < 2 ** 64:
        raise FrameError(f"seq {env.seq} out of range")
    payload = b"".join((
        _HEAD.pack(env.msg_type, env.seq),
        _encode_address(env.sender),
        _encode_address(env.recipient),
        bytes(env.body),
    ))
    return _LENGTH.pack(len(payload)) + payload


def _decode_payload(payload: bytes) -> Envelope:
    view = memoryview(payload)
    offset = _HEAD.size
    if len(view) < offset:
        raise FrameError("malformed frame: short header")
    msg_type, seq = _HEAD.unpack_from(view, 0)
    addresses = []
    for _ in range(2):
        if len(view) < offset + _ADDR_LEN.size:
            raise FrameError("malformed frame: short address length")
        (length,) = _ADDR_LEN.unpack_from(view, offset)
        offset += _ADDR_LEN.size
        if len(view) < offset + length:
            raise FrameError("malformed frame: address overruns payload")
        try:
            addresses.append(bytes(view[offset:offset + length]).decode("utf-8"))
        except UnicodeDecodeError as e:
            raise FrameError(f"malformed frame: address not UTF-8 ({e})") from e
        offset += length
    body = bytes(view[offset:])
    if len(body) > MAX_BODY_BYTES:
        raise FrameError("body exceeds 16 MiB")
    return Envelope(msg_type, addresses[0], addresses[1], seq, body)


def split_frame(buffer: bytearray) -> Optional[Envelope]:
    """Pop one complete frame off the front of a stream buffer, or None if more bytes are needed"""
    if len(buffer) < _LENGTH.size:
        return None
    (length,) = _LENGTH.unpack_from(buffer, 0)
    if length > MAX_BODY_BYTES + 2 * (0xFFFF + _ADDR_LEN.size) + _HEAD.size:
        raise FrameError(f"declared payload length {length} too large")
    end = _LENGTH.size + length
    if len(buffer) < end:
        return None
    payload = bytes(buffer[_LENGTH.size:end])
    del buffer[:end]
    return _decode_payload(payload)


def decode_frame(data: bytes) -> Envelope:
    """Decode exactly one frame"""
    if len(data) < _LENGTH.size:
        raise FrameError("incomplete frame")
    (length,) = _LENGTH.unpack_from(data, 0)
    if len(data) < _LENGTH.size + length:
        raise FrameError("incomplete frame")
    if len(data) > _LENGTH.size + length:
        raise FrameError("trailing bytes after frame")
    return _decode_payload(data[_LENGTH.size:])


class MessageQueue:
    """Bounded FIFO with an observable length and a cumulative drop counter"""

    def __init__(self, capacity: int = DEFAULT_QUEUE_CAPACITY, drop_policy: DropPolicy = DropPolicy.BLOCK_SENDER):
        if capacity <= 0:
            raise ValueError(f"queue capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.drop_policy = drop_policy
        self.dropped = 0
        self._entries = deque()
        self._cond = threading.Condition()

    def put(self, env: Envelope, timeout: Optional[float] = None) -> bool:
        """
        Enqueue an envelope.

        :returns: False when DROP_NEWEST discarded it. Under BLOCK_SENDER the call
            waits for space; timeout=0 never waits and raises BackpressureError.
        """
        with self._cond:
            if len(self._entries) >= self.capacity:
                if self.drop_policy is DropPolicy.DROP_NEWEST:
                    self.dropped += 1
                    return False
                if timeout == 0:
                    raise BackpressureError(f"queue full at capacity {self.capacity}")
                if not self._cond.wait_for(lambda: len(self._entries) < self.capacity, timeout):
                    raise BackpressureError(f"queue still full after {timeout}s")
            self._entries.append(env)
            self._cond.notify_all()
            return True

    def get(self, timeout: Optional[float] = None) -> Optional[Envelope]:
        with self._cond:
            if not self._cond.wait_for(lambda: len(self._entries) > 0, timeout):
                return None
            env = self._entries.popleft()
            self._cond.notify_all()
            return env

    def get_nowait(self) -> Optional[Envelope]:
        return self.get(timeout=0)

    def count_drop(self):
        """Record an envelope the owner refused to hold rather than wait for space"""
        with self._cond:
            self.dropped += 1

    def clear(self) -> int:
        with self._cond:
            count = len(self._entries)
            self._entries.clear()
            self._cond.notify_all()
            return count

    def __len__(self):
        with self._cond:
            return len(self._entries)


class _Listener:
    """Single pull endpoint of a live peer: accepts connections and feeds decoded frames to a callback"""

    def __init__(self, sock: socket.socket, on_envelope: Callable[[Envelope], None], name: str):
        self.sock = sock
        self.on_envelope = on_envelope
        self.name = name
        self.running = True
        self._connections = []
        self._lock = threading.Lock()
        self.thread = threading.Thread(target=self._accept_loop, name=f"{name}-accept", daemon=True)
        self.thread.start()

    def _accept_loop(self):
        while self.running:
            try:
                conn, _ = self.sock.accept()
            except OSError:
                break
            with self._lock:
                if not self.running:
                    conn.close()
                    break
                self._connections.append(conn)
            threading.Thread(target=self._read_loop, args=(conn,), name=f"{self.name}-reader", daemon=True).start()

    def _read_loop(self, conn: socket.socket):
        buffer = bytearray()
        try:
            while self.running:
                chunk = conn.recv(65536)
                if not chunk:
                    break
                buffer.extend(chunk)
                while True:
                    env = split_frame(buffer)
                    if env is None:
                        break
                    self.on_envelope(env)
        except FrameError as e:
            logger.error(f"{self.name}: dropping connection after bad frame: {e}")
        except OSError:
            pass
        finally:
            conn.close()

    def close(self):
        self.running = False
        try:
            self.sock.close()
        except OSError:
            pass
        with self._lock:
            for conn in self._connections:
                try:
                    conn.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                conn.close()
            self._connections.clear()


class _SenderLoop:
    """Drains one outbound queue over lazily opened per-recipient TCP connections"""

    def __init__(self, transport: "LiveTransport", queue: MessageQueue,
                 on_result: Callable[[Envelope, bool], None], name: str):
        self.transport = transport
        self.queue = queue
        self.on_result = on_result
        self.name = name
        self.running = True
        self._connections = {}
        self.thread = threading.Thread(target=self._run, name=f"{name}-sender", daemon=True)
        self.thread.start()

    def _run(self):
        while self.running or len(self.queue) > 0:
            env = self.queue.get(timeout=0.05)
            if env is None:
                continue
            self.on_result(env, self._write(env))
        for conn in self._connections.values():
            conn.close()
        self._connections.clear()

    @staticmethod
    def _is_closed(conn: socket.socket) -> bool:
        try:
            readable, _, _ = select.select([conn], [], [], 0)
            return bool(readable) and conn.recv(1, socket.MSG_PEEK) == b""
        except OSError:
            return True

    def _write(self, env: Envelope) -> bool:
        try:
            target = NetworkAddress.parse(env.recipient)
            frame = encode_frame(env)
        except (AddressError, FrameError) as e:
            logger.error(f"{self.name}: cannot send to {env.recipient!r}: {e}")
            return False
        attempts = self.transport.connect_attempts
        for attempt in range(1, attempts + 1):
            conn = self._connections.get(env.recipient)
            if conn is not None and self._is_closed(conn):
                conn.close()
                conn = None
                del self._connections[env.recipient]
            try:
                if conn is None:
                    conn = socket.create_connection((target.host, target.port),
                                                    timeout=self.transport.connect_timeout_s)
                    conn.settimeout(None)
                    self._connections[env.recipient] = conn
                conn.sendall(frame)
                return True
            except OSError as e:
                logger.debug(f"{self.name}: attempt {attempt}/{attempts} to {env.recipient} failed: {e}")
                stale = self._connections.pop(env.recipient, None)
                if stale is not None:
                    stale.close()
                if attempt < attempts:
                    time.sleep(self.transport.backoff_ms / 1000.0)
        logger.warning(f"{self.name}: giving up on {env.recipient} after {attempts} attempts")
        return False

    def close(self, timeout: float = 2.0):
        self.running = False
        if threading.current_thread() is not self.thread:
            self.thread.join(timeout)


class LiveTransport:
    """TCP backend: one listening socket per peer and one sender loop per outbound queue"""

    def __init__(self, connect_attempts: int = 3, backoff_ms: int = 200, connect_timeout_s: float = 2.0):
        if connect_attempts < 1:
            raise ValueError("connect_attempts must be at least 1")
        self.connect_attempts = connect_attempts
        self.backoff_ms = backoff_ms
        self.connect_timeout_s = connect_timeout_s

    def listen(self, host: str, port: int, on_envelope: Callable[[Envelope], None], name: str):
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, port))
        sock.listen(128)
        bound = NetworkAddress(host, sock.getsockname()[1])
        logger.debug(f"{name} listening on {bound}")
        return bound, _Listener(sock, on_envelope, name)

    def start_sender(self, queue: MessageQueue, on_result: Callable[[Envelope, bool], None], name: str):
        return _SenderLoop(self, queue, on_result, name)


def monitor_queues(peer) -> QueueStats:
    """Instantaneous queue lengths of a peer and the drops both queues have accumulated"""
    return QueueStats(
        in_len=len(peer.inbound),
        out_len=len(peer.outbound),
        dropped_count=peer.inbound.dropped + peer.outbound.dropped,
    )
