#!/usr/bin/env python3
"""
Tests for the peer runtime: lifecycle, timers and the SIM event loop
"""

import time

import pytest

from messaging import Envelope, QueueStats, SendStatus, monitor_queues
from peerbed_errors import DuplicatePeerError, LifecycleError, ModeMismatchError
from runtime_core import (
    EventTrace,
    ExecutionMode,
    PeerNetwork,
    PeerState,
    Peerlet,
    TraceEvent,
    run_simulation,
)

PING = 50
PONG = 51


class PingPong(Peerlet):
    message_types = frozenset({PING, PONG})

    def __init__(self, target=None, rounds=3):
        super().__init__()
        self.target = target
        self.rounds = rounds
        self.received = []

    def start(self):
        if self.target is not None:
            self.send(self.target, PING, b"0")

    def handle_message(self, envelope):
        self.received.append((self.now_ms(), envelope.msg_type, envelope.body))
        count = int(envelope.body)
        if envelope.msg_type == PING:
            self.send(envelope.sender, PONG, envelope.body)
        elif count + 1 < self.rounds:
            self.send(envelope.sender, PING, str(count + 1).encode())


class Ticker(Peerlet):
    def __init__(self, period_ms, periodic=True):
        super().__init__()
        self.period_ms = period_ms
        self.periodic = periodic
        self.fired = []
        self.timer = None

    def start(self):
        self.timer = self.schedule_timer(self.period_ms, periodic=self.periodic)

    def handle_timer(self, timer):
        self.fired.append(self.now_ms())


class Crashing(Peerlet):
    message_types = frozenset({PING})

    def handle_message(self, envelope):
        raise RuntimeError("boom")


def _ping_network(seed=0):
    network = PeerNetwork(seed=seed)
    responder = PingPong()
    initiator = PingPong(target=2)
    network.create_peer(2, [responder])
    network.create_peer(1, [initiator])
    return network, initiator, responder


def test_ping_pong_delivers_with_unit_delay():
    network, initiator, responder = _ping_network()
    run_simulation(network.peers, 100, 0)
    assert [t for t, _, _ in responder.received] == [1, 3, 5]
    assert [t for t, _, _ in initiator.received] == [2, 4, 6]
    assert network.stats.snapshot()["delivered"] == 6


def test_simulation_is_deterministic():
    first, _, _ = _ping_network(seed=4)
    second, _, _ = _ping_network(seed=4)
    trace_a = run_simulation(first.peers, 100, 4)
    trace_b = run_simulation(second.peers, 100, 4)
    assert trace_a == trace_b
    assert len(trace_a.deliveries()) == 6


def test_trace_detail_fields():
    network, _, _ = _ping_network()
    trace = run_simulation(network.peers, 10, 0)
    fields = trace.deliveries()[0].fields()
    assert fields == {"from": "sim:1", "to": "sim:2", "type": str(PING), "seq": "0"}


def test_trace_text_format_parses_back():
    trace = EventTrace([TraceEvent(5, 2, "deliver", "from=sim:1;to=sim:2;type=8;seq=0")])
    assert EventTrace.loads(trace.dumps()) == trace


def test_periodic_timer_fires_every_period():
    network = PeerNetwork()
    ticker = Ticker(100)
    network.create_peer(1, [ticker])
    run_simulation(network.peers, 350, 0)
    assert ticker.fired == [100, 200, 300]


def test_one_shot_timer_fires_once():
    network = PeerNetwork()
    ticker = Ticker(40, periodic=False)
    network.create_peer(1, [ticker])
    run_simulation(network.peers, 1000, 0)
    assert ticker.fired == [40]


def test_cancelled_timer_never_fires():
    network = PeerNetwork()
    ticker = Ticker(100)
    peer = network.create_peer(1, [ticker])
    peer.start()
    ticker.cancel_timer(ticker.timer)
    network.sim.run(500)
    assert ticker.fired == []


def test_duplicate_peer_id_rejected():
    network = PeerNetwork()
    network.create_peer(1, [Ticker(10)])
    with pytest.raises(DuplicatePeerError):
        network.create_peer(1, [Ticker(10)])


def test_peer_without_peerlets_rejected():
    with pytest.raises(ValueError):
        PeerNetwork().create_peer(1, [])


def test_peer_cannot_start_twice():
    network = PeerNetwork()
    peer = network.create_peer(1, [Ticker(10)])
    peer.start()
    with pytest.raises(LifecycleError):
        peer.start()


def test_stopped_peer_cannot_send():
    network = PeerNetwork()
    peer = network.create_peer(1, [Ticker(10)])
    peer.start()
    peer.stop()
    assert peer.state is PeerState.STOPPED
    with pytest.raises(LifecycleError):
        peer.send(1, PING, b"0")


def test_message_to_stopped_peer_is_dropped():
    network = PeerNetwork()
    network.create_peer(2, [PingPong()])
    initiator = PingPong(target=2)
    network.create_peer(1, [initiator])
    network.peer(2).start()
    network.peer(2).stop()
    network.peer(1).start()
    trace = network.sim.run(100)
    assert initiator.received == []
    assert [e.event_kind for e in trace] == ["drop"]


def test_callback_errors_are_counted_not_raised():
    network = PeerNetwork()
    network.create_peer(2, [Crashing()])
    network.create_peer(1, [PingPong(target=2)])
    run_simulation(network.peers, 10, 0)
    assert network.peer(2).callback_errors == 1
    assert network.callback_errors == 1
    assert network.peer(2).state is PeerState.RUNNING


def test_restart_keeps_address_and_bumps_incarnation():
    network = PeerNetwork()
    peer = network.create_peer(1, [Ticker(10)])
    peer.start()
    peer.stop()
    reborn = network.restart_peer(1, [Ticker(10)])
    assert reborn.address == peer.address
    assert reborn.incarnation == 1
    assert reborn.state is PeerState.RUNNING


def test_restart_requires_stopped_peer():
    network = PeerNetwork()
    network.create_peer(1, [Ticker(10)]).start()
    with pytest.raises(LifecycleError):
        network.restart_peer(1, [Ticker(10)])


@pytest.mark.live
def test_run_simulation_rejects_live_peers():
    network = PeerNetwork()
    peer = network.create_peer(1, [Ticker(10)], ExecutionMode.LIVE)
    try:
        with pytest.raises(ModeMismatchError):
            run_simulation([peer], 10, 0)
    finally:
        peer.stop()


def test_seed_fixed_after_start():
    network = PeerNetwork(seed=1)
    network.create_peer(1, [Ticker(10)])
    run_simulation(network.peers, 10, 1)
    with pytest.raises(ValueError):
        network.reseed(2)


def test_stop_all_orders_last_ids():
    network = PeerNetwork()
    stopped = []

    class Recorder(Peerlet):
        def stop(self):
            stopped.append(self.peer.id)

    for peer_id in (1, 2, 3):
        network.create_peer(peer_id, [Recorder()]).start()
    network.stop_all(last=[1])
    assert stopped == [2, 3, 1]


@pytest.mark.live
def test_live_ping_pong_runs_same_peerlets():
    network = PeerNetwork()
    responder = PingPong()
    initiator = PingPong(target=2)
    network.create_peer(2, [responder], ExecutionMode.LIVE).start()
    network.create_peer(1, [initiator], ExecutionMode.LIVE).start()
    try:
        deadline = time.monotonic() + 10
        while len(initiator.received) < 3 and time.monotonic() < deadline:
            time.sleep(0.05)
    finally:
        network.stop_all()
    assert [body for _, _, body in initiator.received] == [b"0", b"1", b"2"]
    assert len(responder.received) == 3


def test_remote_peers_resolve_by_id_and_address():
    network = PeerNetwork()
    network.create_peer(1, [Peerlet()])
    network.add_remote(7, "127.0.0.1:7007")
    assert network.knows(1)
    assert network.knows(7)
    assert not network.knows(8)
    assert network.peer(7) is None
    assert network.address_of(7) == "127.0.0.1:7007"
    assert network.id_for_address("127.0.0.1:7007") == 7
    assert network.id_for_address(network.address_of(1)) == 1
    assert network.id_for_address("127.0.0.1:9") is None
    with pytest.raises(DuplicatePeerError):
        network.create_peer(7, [Peerlet()])
    with pytest.raises(DuplicatePeerError):
        network.add_remote(1, "127.0.0.1:7001")


def test_fresh_peer_has_empty_queues():
    network = PeerNetwork()
    peer = network.create_peer(5, [Peerlet()])
    assert monitor_queues(peer) == QueueStats(0, 0, 0)


class Sink(Peerlet):
    message_types = frozenset({PING})

    def __init__(self):
        super().__init__()
        self.received = []

    def handle_message(self, envelope):
        self.received.append((self.now_ms(), envelope.sender, envelope.seq))


class Burst(Peerlet):
    def __init__(self, targets, count):
        super().__init__()
        self.targets = targets
        self.count = count
        self.receipts = []

    def start(self):
        for _ in range(self.count):
            for target in self.targets:
                self.receipts.append(self.send(target, PING, b"x"))


class DelayedSend(Peerlet):
    def __init__(self, target, at_ms):
        super().__init__()
        self.target = target
        self.at_ms = at_ms

    def start(self):
        self.schedule_timer(self.at_ms)

    def handle_timer(self, timer):
        self.send(self.target, PING, b"late")


class TimerOrder(Peerlet):
    def __init__(self, delays):
        super().__init__()
        self.delays = delays
        self.fired = []

    def start(self):
        for delay in self.delays:
            self.schedule_timer(delay)

    def handle_timer(self, timer):
        self.fired.append((self.now_ms(), timer.timer_id))


class Lifecycle(Peerlet):
    def __init__(self):
        super().__init__()
        self.calls = []

    def init(self, peer):
        super().init(peer)
        self.calls.append("init")

    def start(self):
        self.calls.append("start")

    def stop(self):
        self.calls.append("stop")


def _conserved(network):
    stats = network.stats.snapshot()
    return stats["sent"] == stats["delivered"] + stats["dropped"]


def test_full_outbound_queue_drops_instead_of_failing_the_callback():
    network = PeerNetwork(queue_capacity=1, delay_ms=5)
    sink = Sink()
    burst = Burst([2], 3)
    network.create_peer(2, [sink])
    sender = network.create_peer(1, [burst])
    run_simulation(network.peers, 100, 0)
    assert network.stats.snapshot() == {"sent": 3, "delivered": 1, "dropped": 2, "failed": 0}
    assert _conserved(network)
    assert network.callback_errors == 0
    assert [r.status for r in burst.receipts] == [SendStatus.DELIVERED, SendStatus.DROPPED, SendStatus.DROPPED]
    assert monitor_queues(sender).dropped_count == 2
    assert [t for t, _, _ in sink.received] == [5]


def test_sent_equals_delivered_plus_dropped():
    network, _, _ = _ping_network()
    run_simulation(network.peers, 100, 0)
    assert network.stats.snapshot()["sent"] == 6
    assert _conserved(network)

    lossy = PeerNetwork()
    lossy.create_peer(2, [Sink()]).start()
    lossy.peer(2).stop()
    lossy.create_peer(1, [Burst([2], 4)])
    run_simulation([lossy.peer(1)], 50, 0)
    assert lossy.stats.snapshot()["dropped"] == 4
    assert _conserved(lossy)


def test_seq_strictly_increasing_per_pair():
    network = PeerNetwork()
    sinks = {2: Sink(), 3: Sink()}
    for peer_id, sink in sinks.items():
        network.create_peer(peer_id, [sink])
    network.create_peer(1, [Burst([2, 3], 5)])
    network.create_peer(4, [Burst([2], 3)])
    run_simulation(network.peers, 100, 0)
    for sink in sinks.values():
        by_sender = {}
        for _, sender, seq in sink.received:
            by_sender.setdefault(sender, []).append(seq)
        for seqs in by_sender.values():
            assert all(a < b for a, b in zip(seqs, seqs[1:]))
    assert [seq for _, sender, seq in sinks[2].received if sender == "sim:1"] == [0, 1, 2, 3, 4]
    assert len(sinks[2].received) == 8


def test_delivery_lands_after_configured_delay():
    network = PeerNetwork(delay_ms=5)
    sink = Sink()
    network.create_peer(2, [sink])
    network.create_peer(1, [DelayedSend(2, 10)])
    trace = run_simulation(network.peers, 100, 0)
    assert [t for t, _, _ in sink.received] == [15]
    assert [e.timestamp_ms for e in trace.deliveries()] == [15]


def test_equal_deadlines_fire_by_ascending_timer_id():
    network = PeerNetwork()
    order = TimerOrder([60, 60, 50, 60, 60, 60, 50])
    network.create_peer(1, [order])
    run_simulation(network.peers, 100, 0)
    assert order.fired[:2] == [(50, 3), (50, 7)]
    assert [timer_id for _, timer_id in order.fired[2:]] == [1, 2, 4, 5, 6]


def test_zero_delay_timer_fires_before_later_events():
    network = PeerNetwork()
    network.create_peer(2, [Sink()])
    network.create_peer(1, [Burst([2], 1), TimerOrder([0])])
    trace = run_simulation(network.peers, 10, 0)
    assert [(e.timestamp_ms, e.event_kind) for e in trace] == [(0, "timer"), (1, "deliver")]


def test_run_until_zero_returns_empty_trace():
    network, initiator, _ = _ping_network()
    trace = run_simulation(network.peers, 0, 0)
    assert len(trace) == 0
    assert initiator.received == []


def test_lifecycle_callbacks_run_once():
    network = PeerNetwork()
    lifecycle = Lifecycle()
    peer = network.create_peer(1, [lifecycle])
    run_simulation(network.peers, 10, 0)
    peer.stop()
    peer.stop()
    network.sim.run(20)
    assert lifecycle.calls == ["init", "start", "stop"]


def test_monitor_queues_counts_pending_inbound():
    network = PeerNetwork()
    peer = network.create_peer(5, [Sink()])
    peer.start()
    for seq in range(3):
        peer.enqueue_inbound(Envelope(PING, "sim:9", peer.address, seq))
    assert peer.process_inbound(limit=1) == 1
    assert monitor_queues(peer) == QueueStats(in_len=2, out_len=0, dropped_count=0)


def test_default_memory_reader_reports_resident_bytes():
    network = PeerNetwork()
    peer = network.create_peer(1, [Peerlet()])
    assert peer.memory_bytes() > 0
