#!/usr/bin/env python3
"""
Tests for the monitoring pipeline: record stores, the logging gateway and agent loggers
"""

import pytest

from monitoring import (
    FileRecordStore,
    LogGateway,
    LogGatewayPeerlet,
    LogKind,
    LogRecord,
    MonitoringPeerlet,
    RecordFilter,
    flush_and_query,
    open_store,
)
from peerbed_errors import MonitoringError
from runtime_core import PeerNetwork, Peerlet, run_simulation


def _records():
    return [
        LogRecord(1000, 10, LogKind.SERVICE, "epos.cost", 4.5),
        LogRecord(1001, 10, LogKind.EVENT, "dias.change", "JOIN"),
        LogRecord(1000, 20, LogKind.MEMORY, "resident_bytes", 1024),
        LogRecord(1001, 30, LogKind.SERVICE, "epos.cost", 3.25),
    ]


def test_record_line_escapes_separators():
    record = LogRecord(7, 100, LogKind.EVENT, "a|b", "line\nbreak|50%")
    line = record.to_line()
    assert line.count("|") == 4
    assert "\n" not in line
    assert LogRecord.from_line(line) == record


def test_record_line_with_wrong_arity_rejected():
    with pytest.raises(MonitoringError):
        LogRecord.from_line("1|2|EVENT")


def test_filter_rejects_malformed_range():
    with pytest.raises(MonitoringError):
        RecordFilter(start_ms=10, end_ms=5)
    with pytest.raises(MonitoringError):
        RecordFilter(start_ms=-1)


@pytest.mark.parametrize("backend", ["file", "sqlite"])
def test_store_queries_by_agent_kind_and_range(tmp_path, backend):
    store = open_store(backend, tmp_path)
    try:
        store.append_batch(_records()[:2])
        store.append_batch(_records()[2:])
        assert store.count() == 4
        everything = store.query(RecordFilter())
        assert [(r.ts_ms, r.agent) for r in everything] == [(10, 1000), (10, 1001), (20, 1000), (30, 1001)]
        assert [r.key for r in store.query(RecordFilter(agent=1001))] == ["dias.change", "epos.cost"]
        assert [r.value for r in store.query(RecordFilter(kind=LogKind.SERVICE))] == [4.5, 3.25]
        assert [r.ts_ms for r in store.query(RecordFilter(start_ms=15, end_ms=30))] == [20, 30]
    finally:
        store.close()


def test_unknown_backend_rejected(tmp_path):
    with pytest.raises(MonitoringError):
        open_store("postgres", tmp_path)


def test_gateway_commits_in_bounded_batches(tmp_path):
    gateway = LogGateway(FileRecordStore(tmp_path), commit_batch=3)
    assert gateway.submit(None, _records() * 2)
    assert gateway.commit() == 8
    assert gateway.commits == 3
    assert gateway.persisted == 8
    assert len(flush_and_query(gateway, agent=1000)) == 4


def test_gateway_rejects_unknown_token(tmp_path):
    gateway = LogGateway(FileRecordStore(tmp_path), auth_tokens=["secret"])
    assert not gateway.submit("guess", _records())
    assert gateway.submit("secret", _records())
    assert gateway.rejected_batches == 1
    assert gateway.accepted == 4


def test_gateway_counts_overflow(tmp_path):
    gateway = LogGateway(FileRecordStore(tmp_path), queue_size=2)
    gateway.submit(None, _records())
    assert gateway.overflow_dropped == 2
    assert gateway.commit() == 2


def test_gateway_flags_unregistered_keys(tmp_path):
    gateway = LogGateway(FileRecordStore(tmp_path))
    gateway.register_schema(1000, None, ["epos.cost"])
    gateway.submit(None, _records())
    assert gateway.unregistered_keys == 1


class FlakyStore:
    def __init__(self, failures):
        self.failures = failures
        self.batches = []

    def append_batch(self, records):
        if self.failures > 0:
            self.failures -= 1
            raise OSError("disk full")
        self.batches.append(list(records))

    def query(self, record_filter):
        return [r for batch in self.batches for r in batch if record_filter.matches(r)]


def test_gateway_retries_once_then_records_drop():
    store = FlakyStore(failures=2)
    gateway = LogGateway(store, gateway_agent=3, clock=lambda: 77)
    gateway.submit(None, _records())
    assert gateway.commit() == 0
    assert gateway.failed_dropped == 4
    assert store.batches == [[LogRecord(3, 77, LogKind.EVENT, "persist_failed", 4)]]


def test_gateway_retry_succeeds_after_single_failure():
    store = FlakyStore(failures=1)
    gateway = LogGateway(store)
    gateway.submit(None, _records())
    assert gateway.commit() == 4
    assert gateway.failed_dropped == 0


class Counter(Peerlet):
    """Logs an increasing service value every 50 ms"""

    def __init__(self):
        super().__init__()
        self.value = 0

    def start(self):
        self.schedule_timer(50, periodic=True)

    def handle_timer(self, timer):
        self.value += 1
        self.log(LogKind.SERVICE, "counter", self.value)


def _monitored_network(tmp_path, agent_token=None, gateway_tokens=()):
    network = PeerNetwork()
    gateway = LogGateway(FileRecordStore(tmp_path), auth_tokens=gateway_tokens)
    network.create_peer(3, [LogGatewayPeerlet(gateway, commit_period_ms=200)])
    monitor = MonitoringPeerlet(3, token=agent_token, flush_period_ms=100, schema_keys=["counter"])
    network.create_peer(1000, [monitor, Counter()])
    return network, gateway, monitor


def test_agent_records_reach_store_in_order(tmp_path):
    network, gateway, monitor = _monitored_network(tmp_path)
    run_simulation(network.peers, 1000, 0)
    records = gateway.flush_and_query(RecordFilter(agent=1000, kind=LogKind.SERVICE))
    assert [r.value for r in records] == list(range(1, len(records) + 1))
    assert len(records) >= 15
    timestamps = [r.ts_ms for r in records]
    assert timestamps == sorted(timestamps)
    assert monitor.emitted == 19
    assert gateway.unregistered_keys == 0


def test_agent_with_wrong_token_sees_rejections(tmp_path):
    network, gateway, monitor = _monitored_network(tmp_path, agent_token="bad", gateway_tokens=["good"])
    run_simulation(network.peers, 500, 0)
    assert gateway.accepted == 0
    assert monitor.rejected > 0


def test_logging_without_monitor_is_a_no_op():
    network = PeerNetwork()
    counter = Counter()
    network.create_peer(1, [counter])
    run_simulation(network.peers, 200, 0)
    assert counter.value == 3


@pytest.mark.parametrize("backend", ["file", "sqlite"])
def test_store_keeps_value_types(tmp_path, backend):
    values = ["1_000", "nan", "42", 42, 0.1, -3.5e-300, "", True]
    store = open_store(backend, tmp_path)
    try:
        store.append_batch([LogRecord(1000, i, LogKind.EVENT, "v", v) for i, v in enumerate(values)])
        found = [r.value for r in store.query(RecordFilter())]
    finally:
        store.close()
    assert found == ["1_000", "nan", "42", 42, 0.1, -3.5e-300, "", 1]
    assert [type(v) for v in found[:4]] == [str, str, str, int]


def test_records_without_gateway_are_counted_as_dropped(caplog):
    network = PeerNetwork()
    monitor = MonitoringPeerlet(3, flush_period_ms=100)
    counter = Counter()
    network.create_peer(1000, [monitor, counter])
    with caplog.at_level("WARNING", logger="monitoring"):
        run_simulation(network.peers, 250, 0)
        network.stop_all()
    assert counter.value == 4
    assert monitor.dropped == 4
    assert "records dropped" in caplog.text
