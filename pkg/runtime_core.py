#!/usr/bin/env python3
"""
Peer runtime: agent containers ("peers") hosting pluggable modules
("peerlets"), with timers, lifecycle, and two execution modes.

SIM runs every peer on one discrete-event loop driven by a virtual
millisecond clock. LIVE gives each peer its own executor thread, a TCP
listening socket and a sender loop. Peerlet code is identical in both.
"""

import heapq
import itertools
import logging
import random
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, List, Optional, Union
from urllib.parse import quote, unquote

import psutil

from messaging import (
    DEFAULT_QUEUE_CAPACITY,
    DropPolicy,
    Envelope,
    LiveTransport,
    MessageQueue,
    NetworkAddress,
    QueueStats,
    SendReceipt,
    SendStatus,
    monitor_queues,
)
from peerbed_errors import BackpressureError, DuplicatePeerError, LifecycleError, ModeMismatchError

logger = logging.getLogger(__name__)


class ExecutionMode(Enum):
    SIM = "sim"
    LIVE = "live"


class PeerState(Enum):
    INIT = "init"
    RUNNING = "running"
    LEAVING = "leaving"
    STOPPED = "stopped"


@dataclass(eq=False)
class Timer:
    """Handle returned by schedule_timer; peerlets compare handles by identity"""

    timer_id: int
    deadline_ms: int
    period_ms: Optional[int]
    owner: Optional["Peerlet"]
    cancelled: bool = False

    @property
    def periodic(self) -> bool:
        return self.period_ms is not None


@dataclass(frozen=True)
class TraceEvent:
    timestamp_ms: int
    peer_id: int
    event_kind: str
    detail: str

    def to_line(self) -> str:
        return f"{self.timestamp_ms},{self.peer_id},{self.event_kind},{quote(self.detail, safe='')}"

    @classmethod
    def from_line(cls, line: str) -> "TraceEvent":
        ts, peer_id, kind, detail = line.rstrip("\n").split(",", 3)
        return cls(int(ts), int(peer_id), kind, unquote(detail))

    def fields(self) -> dict:
        """Parse a `k=v;k=v` detail string"""
        out = {}
        for part in self.detail.split(";"):
            if "=" in part:
                key, value = part.split("=", 1)
                out[key] = value
        return out


class EventTrace:
    """Ordered record of deliveries, drops and timer firings"""

    def __init__(self, events: Optional[Iterable[TraceEvent]] = None):
        self.events: List[TraceEvent] = list(events or [])
        self._lock = threading.Lock()

    def append(self, timestamp_ms: int, peer_id: int, event_kind: str, detail: str):
        event = TraceEvent(timestamp_ms, peer_id, event_kind, detail)
        with self._lock:
            self.events.append(event)
        return event

    def extend(self, other: "EventTrace"):
        with self._lock:
            self.events.extend(other.events)

    def deliveries(self) -> List[TraceEvent]:
        return [e for e in self.events if e.event_kind == "deliver"]

    def dumps(self) -> str:
        return "".join(e.to_line() + "\n" for e in self.events)

    def write(self, path: Union[str, Path]):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "EventTrace":
        return cls(TraceEvent.from_line(line) for line in text.splitlines() if line.strip())

    def __len__(self):
        return len(self.events)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(list(self.events))

    def __eq__(self, other):
        return isinstance(other, EventTrace) and self.events == other.events


def _delivery_detail(env: Envelope) -> str:
    return f"from={env.sender};to={env.recipient};type={env.msg_type};seq={env.seq}"


class Peerlet:
    """
    Pluggable module of a peer. Subclasses declare the message types they
    consume in `message_types` and override the callbacks they need.
    """

    message_types: frozenset = frozenset()

    def __init__(self):
        self.peer: Optional["Peer"] = None

    def init(self, peer: "Peer"):
        if self.peer is not None and self.peer is not peer:
            raise LifecycleError(f"{type(self).__name__} already belongs to peer {self.peer.id}")
        self.peer = peer

    def start(self):
        pass

    def stop(self):
        pass

    def handle_message(self, envelope: Envelope):
        pass

    def handle_timer(self, timer: Timer):
        pass

    # Convenience wrappers over the owning peer

    def send(self, to: Union[int, str, NetworkAddress], msg_type: int, body: bytes = b"") -> SendReceipt:
        return self.peer.send(to, msg_type, body)

    def schedule_timer(self, delay_ms: int, periodic: bool = False) -> Timer:
        return self.peer.schedule_timer(delay_ms, periodic, owner=self)

    def cancel_timer(self, timer: Optional[Timer]):
        if timer is not None:
            self.peer.cancel_timer(timer)

    def now_ms(self) -> int:
        return self.peer.now_ms()

    def log(self, kind, key: str, value) -> bool:
        monitor = self.peer.monitor if self.peer else None
        if monitor is None:
            return False
        return monitor.log(kind, key, value)


class Peer:
    """Agent container; all of its callbacks run on one logical executor"""

    def __init__(self, network: "PeerNetwork", peer_id: int, mode: ExecutionMode,
                 peerlets: List[Peerlet], incarnation: int = 0, port: Optional[int] = None):
        if not 0 <= peer_id < 2 ** 64:
            raise ValueError(f"peer id {peer_id} outside unsigned 64-bit range")
        self.network = network
        self.id = peer_id
        self.mode = mode
        self.peerlets = list(peerlets)
        self.incarnation = incarnation
        self.state = PeerState.INIT
        self.monitor = None
        self.callback_errors = 0
        self.rng = random.Random(f"{network.seed}/{peer_id}/{incarnation}")
        capacity, policy = network.queue_settings(mode)
        self.inbound = MessageQueue(capacity, policy)
        self.outbound = MessageQueue(capacity, policy)
        self._seq = defaultdict(int)
        self._timers = {}
        self.engine = network.engine(mode)
        self.address = self.engine.attach(self, port)
        for peerlet in self.peerlets:
            peerlet.init(self)

    def __repr__(self):
        return f"Peer(id={self.id}, {self.mode.value}, {self.state.value}, {self.address})"

    # Lifecycle

    def start(self):
        if self.state is not PeerState.INIT:
            raise LifecycleError(f"peer {self.id} cannot start from {self.state.value}")
        self.engine.start_peer(self)

    def stop(self):
        if self.state in (PeerState.STOPPED, PeerState.LEAVING):
            return
        self.engine.stop_peer(self)

    def _startup(self):
        self.state = PeerState.RUNNING
        logger.debug(f"peer {self.id} running at {self.address}")
        for peerlet in self.peerlets:
            self._invoke(peerlet.start)

    def _shutdown(self):
        if self.state is PeerState.STOPPED:
            return
        if self.state is PeerState.RUNNING:
            self.state = PeerState.LEAVING
            for peerlet in reversed(self.peerlets):
                self._invoke(peerlet.stop)
        for timer in self._timers.values():
            timer.cancelled = True
        self._timers.clear()
        self.state = PeerState.STOPPED
        self.engine.detach(self)
        logger.debug(f"peer {self.id} stopped")

    def _invoke(self, callback: Callable, *args):
        try:
            callback(*args)
        except Exception:
            self.callback_errors += 1
            self.network.record_callback_error()
            logger.exception(f"peer {self.id}: callback {getattr(callback, '__qualname__', callback)} failed")

    # Messaging

    def _resolve(self, to: Union[int, str, NetworkAddress]) -> str:
        if isinstance(to, NetworkAddress):
            return str(to)
        if isinstance(to, int):
            return self.network.address_of(to)
        return to

    def send(self, to: Union[int, str, NetworkAddress], msg_type: int, body: bytes = b"") -> SendReceipt:
        if self.state not in (PeerState.RUNNING, PeerState.LEAVING):
            raise LifecycleError(f"peer {self.id} cannot send while {self.state.value}")
        recipient = self._resolve(to)
        seq = self._seq[recipient]
        self._seq[recipient] = seq + 1
        env = Envelope(msg_type, self.address, recipient, seq, bytes(body))
        receipt = SendReceipt(env)
        self.network.stats.count("sent")
        self.engine.transmit(self, env, receipt)
        return receipt

    def enqueue_inbound(self, env: Envelope) -> bool:
        if self.mode is ExecutionMode.SIM:
            return self.inbound.put(env, timeout=0)
        return self.inbound.put(env)

    def process_inbound(self, limit: Optional[int] = None) -> int:
        """Dispatch queued inbound envelopes on the calling executor (SIM)"""
        handled = 0
        while limit is None or handled < limit:
            env = self.inbound.get_nowait()
            if env is None:
                break
            self.dispatch(env)
            handled += 1
        return handled

    def dispatch(self, env: Envelope) -> bool:
        if self.state is not PeerState.RUNNING:
            return False
        for peerlet in self.peerlets:
            if self.state is not PeerState.RUNNING:
                break
            if env.msg_type in peerlet.message_types:
                self._invoke(peerlet.handle_message, env)
        return True

    def queue_stats(self) -> QueueStats:
        return monitor_queues(self)

    # Timers

    def schedule_timer(self, delay_ms: int, periodic: bool = False, owner: Optional[Peerlet] = None) -> Timer:
        if self.state is not PeerState.RUNNING:
            raise LifecycleError(f"peer {self.id} cannot schedule timers while {self.state.value}")
        if delay_ms < 0:
            raise ValueError(f"negative timer delay {delay_ms}")
        if periodic and delay_ms == 0:
            raise ValueError("periodic timers need a positive period")
        timer = Timer(self.network.next_timer_id(), self.now_ms() + delay_ms,
                      delay_ms if periodic else None, owner)
        self._timers[timer.timer_id] = timer
        self.engine.add_timer(self, timer)
        return timer

    def cancel_timer(self, timer: Timer):
        timer.cancelled = True
        self._timers.pop(timer.timer_id, None)

    def fire_timer(self, timer: Timer) -> bool:
        if self.state is not PeerState.RUNNING or timer.cancelled:
            return False
        if not timer.periodic:
            self._timers.pop(timer.timer_id, None)
        if timer.owner is not None:
            self._invoke(timer.owner.handle_timer, timer)
        return True

    # Environment

    def now_ms(self) -> int:
        return self.engine.now_ms()

    def address_of(self, peer_id: int) -> str:
        return self.network.address_of(peer_id)

    def memory_bytes(self) -> int:
        return self.network.memory_reader()

    def find_peerlet(self, kind: type) -> Optional[Peerlet]:
        for peerlet in self.peerlets:
            if isinstance(peerlet, kind):
                return peerlet
        return None


class SimEngine:
    """
    Discrete-event loop over a virtual millisecond clock.

    Heap entries are ordered by (time, rank, key, index, insertion): deliveries
    (rank 0) precede timers (rank 1) at equal time; deliveries then order by
    sender id and the engine-wide send index, timers by ascending timer id.
    """

    def __init__(self, network: "PeerNetwork"):
        self.network = network
        self.now = 0
        self.trace = EventTrace()
        self._heap = []
        self._insertion = itertools.count()
        self._send_index = itertools.count()

    def now_ms(self) -> int:
        return self.now

    def attach(self, peer: Peer, port: Optional[int]) -> str:
        return str(NetworkAddress.for_peer(peer.id))

    def detach(self, peer: Peer):
        pass

    def start_peer(self, peer: Peer):
        peer._startup()

    def stop_peer(self, peer: Peer):
        peer._shutdown()

    def add_timer(self, peer: Peer, timer: Timer):
        heapq.heappush(self._heap, (timer.deadline_ms, 1, timer.timer_id, 0, next(self._insertion), timer, peer))

    def transmit(self, peer: Peer, env: Envelope, receipt: SendReceipt):
        # single-threaded: a full queue cannot drain during this call
        try:
            accepted = peer.outbound.put(env, timeout=0)
        except BackpressureError:
            logger.debug(f"peer {peer.id}: outbound queue full, dropping {_delivery_detail(env)}")
            peer.outbound.count_drop()
            accepted = False
        if not accepted:
            receipt.settle(SendStatus.DROPPED)
            self.network.stats.count("dropped")
            return
        at = self.now + self.network.delay_ms
        heapq.heappush(self._heap, (at, 0, peer.id, next(self._send_index), next(self._insertion), (env, receipt), peer))

    def pending(self) -> int:
        return len(self._heap)

    def run(self, until_ms: int) -> EventTrace:
        """Process every event with timestamp < until_ms; returns the events of this call"""
        run_trace = EventTrace()
        while self._heap and self._heap[0][0] < until_ms:
            at, rank, _, _, _, payload, peer = heapq.heappop(self._heap)
            self.now = max(self.now, at)
            if rank == 0:
                self._deliver(peer, payload[0], payload[1], run_trace)
            else:
                self._fire(peer, payload, run_trace)
        if until_ms > self.now:
            self.now = until_ms
        if self.network.record_trace:
            self.trace.extend(run_trace)
        return run_trace

    def _record(self, trace: EventTrace, peer_id: int, kind: str, detail: str, msg_type: Optional[int] = None):
        if self.network.traces(kind, msg_type):
            trace.append(self.now, peer_id, kind, detail)

    def _deliver(self, sender: Peer, env: Envelope, receipt: SendReceipt, trace: EventTrace):
        sender.outbound.get_nowait()
        recipient = self.network.peer_for_address(env.recipient)
        if recipient is None or recipient.state is not PeerState.RUNNING:
            receipt.settle(SendStatus.FAILED)
            self.network.stats.count("dropped")
            self._record(trace, sender.id, "drop", _delivery_detail(env), env.msg_type)
            return
        receipt.settle(SendStatus.DELIVERED)
        self.network.stats.count("delivered")
        self._record(trace, recipient.id, "deliver", _delivery_detail(env), env.msg_type)
        recipient.enqueue_inbound(env)
        recipient.process_inbound()

    def _fire(self, peer: Peer, timer: Timer, trace: EventTrace):
        if timer.cancelled or peer.state is not PeerState.RUNNING:
            return
        if timer.periodic:
            timer.deadline_ms += timer.period_ms
            heapq.heappush(self._heap, (timer.deadline_ms, 1, timer.timer_id, 0, next(self._insertion), timer, peer))
        self._record(trace, peer.id, "timer", f"timer={timer.timer_id}")
        peer.fire_timer(timer)


class _PeerExecutor:
    """Single thread serializing every callback of one live peer"""

    def __init__(self, engine: "LiveEngine", peer: Peer, listener, sender):
        self.engine = engine
        self.peer = peer
        self.listener = listener
        self.sender = sender
        self.stop_requested = False
        self.started = threading.Event()
        self.stopped = threading.Event()
        self._timers = []
        self._lock = threading.Lock()
        self._receipts = {}
        self.thread = threading.Thread(target=self._run, name=f"peer-{peer.id}", daemon=True)

    def add_timer(self, timer: Timer):
        with self._lock:
            heapq.heappush(self._timers, (timer.deadline_ms, timer.timer_id, timer))

    def track(self, env: Envelope, receipt: SendReceipt):
        with self._lock:
            self._receipts[(env.recipient, env.seq)] = receipt

    def settle(self, env: Envelope, ok: bool):
        with self._lock:
            receipt = self._receipts.pop((env.recipient, env.seq), None)
        self.engine.network.stats.count("delivered" if ok else "failed")
        if receipt is not None:
            receipt.settle(SendStatus.DELIVERED if ok else SendStatus.FAILED)

    def _due_timer(self) -> Optional[Timer]:
        now = self.engine.now_ms()
        with self._lock:
            while self._timers and self._timers[0][0] <= now:
                _, _, timer = heapq.heappop(self._timers)
                if timer.cancelled:
                    continue
                if timer.periodic:
                    timer.deadline_ms += timer.period_ms
                    heapq.heappush(self._timers, (timer.deadline_ms, timer.timer_id, timer))
                return timer
        return None

    def _wait_s(self) -> float:
        with self._lock:
            if not self._timers:
                return 0.05
            delta = (self._timers[0][0] - self.engine.now_ms()) / 1000.0
        return min(max(delta, 0.0), 0.05)

    def _run(self):
        self.peer._startup()
        self.started.set()
        try:
            while not self.stop_requested:
                timer = self._due_timer()
                while timer is not None and not self.stop_requested:
                    self.engine.record(self.peer.id, "timer", f"timer={timer.timer_id}")
                    self.peer.fire_timer(timer)
                    timer = self._due_timer()
                if self.stop_requested:
                    break
                env = self.peer.inbound.get(timeout=self._wait_s())
                if env is not None:
                    self.engine.record(self.peer.id, "deliver", _delivery_detail(env), env.msg_type)
                    self.peer.dispatch(env)
        finally:
            self.peer._shutdown()
            self.sender.close()
            self.listener.close()
            self.stopped.set()

    def request_stop(self, timeout: float = 10.0):
        self.stop_requested = True
        if threading.current_thread() is not self.thread and self.thread.is_alive():
            self.stopped.wait(timeout)


class LiveEngine:
    """Wall-clock execution: one executor thread, listener and sender loop per peer"""

    def __init__(self, network: "PeerNetwork"):
        self.network = network
        self.transport = LiveTransport(network.connect_attempts, network.backoff_ms)
        self.trace = EventTrace()
        self._epoch = network.live_epoch
        self._t0 = time.monotonic()
        self._executors = {}

    def now_ms(self) -> int:
        if self._epoch is not None:
            return int((time.time() - self._epoch) * 1000)
        return int((time.monotonic() - self._t0) * 1000)

    def record(self, peer_id: int, kind: str, detail: str, msg_type: Optional[int] = None):
        if self.network.record_trace and self.network.traces(kind, msg_type):
            self.trace.append(self.now_ms(), peer_id, kind, detail)

    def attach(self, peer: Peer, port: Optional[int]) -> str:
        if port is None:
            port = self.network.next_port()
        address, listener = self.transport.listen(self.network.host, port, peer.enqueue_inbound, f"peer-{peer.id}")
        holder = {}
        sender = self.transport.start_sender(peer.outbound, lambda env, ok: holder["ex"].settle(env, ok),
                                             f"peer-{peer.id}")
        executor = _PeerExecutor(self, peer, listener, sender)
        holder["ex"] = executor
        self._executors[id(peer)] = executor
        return str(address)

    def detach(self, peer: Peer):
        pass

    def start_peer(self, peer: Peer):
        executor = self._executors[id(peer)]
        executor.thread.start()
        if not executor.started.wait(10.0):
            raise LifecycleError(f"peer {peer.id} did not start")

    def stop_peer(self, peer: Peer):
        executor = self._executors.get(id(peer))
        if executor is None:
            return
        if not executor.thread.is_alive() and peer.state is PeerState.INIT:
            peer._shutdown()
            executor.sender.close()
            executor.listener.close()
            return
        executor.request_stop()

    def add_timer(self, peer: Peer, timer: Timer):
        self._executors[id(peer)].add_timer(timer)

    def transmit(self, peer: Peer, env: Envelope, receipt: SendReceipt):
        executor = self._executors[id(peer)]
        executor.track(env, receipt)
        if not peer.outbound.put(env):
            with executor._lock:
                executor._receipts.pop((env.recipient, env.seq), None)
            receipt.settle(SendStatus.DROPPED)
            self.network.stats.count("dropped")

    def join(self, peer: Peer, timeout: float = 10.0) -> bool:
        executor = self._executors.get(id(peer))
        return executor is None or executor.stopped.wait(timeout)


class NetworkStats:
    """Network-wide message counters"""

    def __init__(self):
        self._lock = threading.Lock()
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self.failed = 0

    def count(self, name: str, amount: int = 1):
        with self._lock:
            setattr(self, name, getattr(self, name) + amount)

    def snapshot(self) -> dict:
        with self._lock:
            return {"sent": self.sent, "delivered": self.delivered, "dropped": self.dropped, "failed": self.failed}


def resident_bytes() -> int:
    """Resident set size of this process"""
    return psutil.Process().memory_info().rss


class PeerNetwork:
    """Directory and factory for the peers of one scenario run"""

    def __init__(self, seed: int = 0, delay_ms: int = 1, host: str = "127.0.0.1", base_port: int = 0,
                 queue_capacity: int = DEFAULT_QUEUE_CAPACITY, sim_drop_policy: DropPolicy = DropPolicy.BLOCK_SENDER,
                 live_drop_policy: DropPolicy = DropPolicy.DROP_NEWEST, connect_attempts: int = 3,
                 backoff_ms: int = 200, record_trace: bool = True, trace_types: Optional[Iterable[int]] = None,
                 memory_reader: Callable[[], int] = resident_bytes, live_epoch: Optional[float] = None):
        if delay_ms < 0:
            raise ValueError(f"negative network delay {delay_ms}")
        self.seed = seed
        self.delay_ms = delay_ms
        self.host = host
        self.base_port = base_port
        self.queue_capacity = queue_capacity
        self.sim_drop_policy = sim_drop_policy
        self.live_drop_policy = live_drop_policy
        self.connect_attempts = connect_attempts
        self.backoff_ms = backoff_ms
        self.record_trace = record_trace
        self.trace_types = frozenset(trace_types) if trace_types is not None else None
        self.memory_reader = memory_reader
        # shared wall-clock origin when LIVE peers of one run live in several processes
        self.live_epoch = live_epoch
        self.stats = NetworkStats()
        self.callback_errors = 0
        self._peers = {}
        self._remote = {}
        self._remote_ids = {}
        self._by_address = {}
        self._ports = {}
        self._engines = {}
        self._timer_ids = itertools.count(1)
        self._port_cursor = itertools.count(base_port)
        self._lock = threading.RLock()
        self._seed_locked = False

    # Engines and settings

    def engine(self, mode: ExecutionMode):
        with self._lock:
            if mode not in self._engines:
                self._engines[mode] = SimEngine(self) if mode is ExecutionMode.SIM else LiveEngine(self)
            return self._engines[mode]

    @property
    def sim(self) -> SimEngine:
        return self.engine(ExecutionMode.SIM)

    def queue_settings(self, mode: ExecutionMode):
        policy = self.sim_drop_policy if mode is ExecutionMode.SIM else self.live_drop_policy
        return self.queue_capacity, policy

    def traces(self, kind: str, msg_type: Optional[int]) -> bool:
        if self.trace_types is None:
            return True
        return msg_type is not None and msg_type in self.trace_types

    def next_timer_id(self) -> int:
        with self._lock:
            return next(self._timer_ids)

    def next_port(self) -> int:
        if self.base_port == 0:
            return 0
        with self._lock:
            return next(self._port_cursor)

    def record_callback_error(self):
        with self._lock:
            self.callback_errors += 1

    def reseed(self, seed: int):
        """Fix the run seed; allowed until the first peer starts"""
        with self._lock:
            if seed == self.seed:
                self._seed_locked = True
                return
            if self._seed_locked or any(p.state is not PeerState.INIT for p in self._peers.values()):
                raise ValueError(f"seed already fixed at {self.seed}")
            self.seed = seed
            self._seed_locked = True
            for peer in self._peers.values():
                peer.rng = random.Random(f"{seed}/{peer.id}/{peer.incarnation}")

    # Directory

    def create_peer(self, peer_id: int, peerlets: List[Peerlet], mode: ExecutionMode = ExecutionMode.SIM,
                    port: Optional[int] = None, incarnation: int = 0) -> Peer:
        if not peerlets:
            raise ValueError("no peerlets")
        with self._lock:
            if peer_id in self._peers or peer_id in self._remote:
                raise DuplicatePeerError(f"peer id {peer_id} already exists")
            peer = Peer(self, peer_id, mode, peerlets, incarnation=incarnation, port=port)
            self._register(peer)
        return peer

    def restart_peer(self, peer_id: int, peerlets: List[Peerlet], start: bool = True) -> Peer:
        """Bring a stopped peer back with fresh peerlets under the same id and address"""
        if not peerlets:
            raise ValueError("no peerlets")
        with self._lock:
            old = self._peers.get(peer_id)
            if old is None:
                raise LifecycleError(f"unknown peer {peer_id}")
            if old.state is not PeerState.STOPPED:
                raise LifecycleError(f"peer {peer_id} is {old.state.value}, not stopped")
            port = self._ports.get(peer_id)
            if old.mode is ExecutionMode.LIVE:
                self.engine(old.mode).join(old)
            peer = Peer(self, peer_id, old.mode, peerlets, incarnation=old.incarnation + 1, port=port)
            self._by_address.pop(old.address, None)
            self._register(peer)
        logger.debug(f"peer {peer_id} restarted as incarnation {peer.incarnation}")
        if start:
            peer.start()
        return peer

    def _register(self, peer: Peer):
        self._peers[peer.id] = peer
        self._by_address[peer.address] = peer
        if peer.mode is ExecutionMode.LIVE:
            self._ports[peer.id] = NetworkAddress.parse(peer.address).port

    def peer(self, peer_id: int) -> Optional[Peer]:
        return self._peers.get(peer_id)

    @property
    def peers(self) -> List[Peer]:
        with self._lock:
            return [self._peers[k] for k in sorted(self._peers)]

    def add_remote(self, peer_id: int, address: str):
        """Make a peer hosted by another process reachable by id"""
        with self._lock:
            if peer_id in self._peers:
                raise DuplicatePeerError(f"peer id {peer_id} already exists locally")
            address = str(NetworkAddress.parse(address))
            self._remote[peer_id] = address
            self._remote_ids[address] = peer_id

    def knows(self, peer_id: int) -> bool:
        return peer_id in self._peers or peer_id in self._remote

    def address_of(self, peer_id: int) -> str:
        peer = self._peers.get(peer_id)
        if peer is not None:
            return peer.address
        if peer_id in self._remote:
            return self._remote[peer_id]
        raise KeyError(f"unknown peer {peer_id}")

    def peer_for_address(self, address: str) -> Optional[Peer]:
        return self._by_address.get(address)

    def id_for_address(self, address: str) -> Optional[int]:
        """Id of the local or remote peer listening at address"""
        peer = self._by_address.get(address)
        if peer is not None:
            return peer.id
        return self._remote_ids.get(address)

    def is_running(self, peer_id: int) -> bool:
        peer = self._peers.get(peer_id)
        return peer is not None and peer.state is PeerState.RUNNING

    def run(self, until_ms: int) -> EventTrace:
        return run_simulation(self.peers, until_ms, self.seed)

    def stop_all(self, last: Iterable[int] = ()):
        """Stop every peer, the ids in `last` after all others and in the given order"""
        last = list(last)
        for peer in self.peers:
            if peer.id not in last:
                peer.stop()
        for peer_id in last:
            peer = self._peers.get(peer_id)
            if peer is not None:
                peer.stop()


def create_peer(network: PeerNetwork, peer_id: int, mode: ExecutionMode, peerlets: List[Peerlet]) -> Peer:
    return network.create_peer(peer_id, peerlets, mode)


def schedule_timer(peer: Peer, delay_ms: int, periodic: bool = False) -> Timer:
    return peer.schedule_timer(delay_ms, periodic)


def run_simulation(peers: List[Peer], until_ms: int, seed: int) -> EventTrace:
    """Start INIT peers and advance the shared virtual clock to until_ms"""
    if not peers:
        return EventTrace()
    if any(p.mode is not ExecutionMode.SIM for p in peers):
        raise ModeMismatchError("run_simulation needs every peer in SIM mode")
    networks = {id(p.network): p.network for p in peers}
    if len(networks) != 1:
        raise ValueError("peers belong to different networks")
    network = next(iter(networks.values()))
    network.reseed(seed)
    for peer in sorted(peers, key=lambda p: p.id):
        if peer.state is PeerState.INIT:
            peer.start()
    return network.sim.run(until_ms)
